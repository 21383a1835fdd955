//! Run configuration read from TOML. Unknown keys are rejected and numeric
//! ranges are checked when the file is parsed.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::economy::{StructuralParams, DEFAULT_BURN_IN};
use crate::error::{Error, Result};
use crate::experiments::DataModel;
use crate::fi::FiMleOptions;
use crate::filter::{FilterConfig, ResamplingScheme};
use crate::ii::{AuxKind, IiMethod, IiOptions, Weighting, NW_LAGS};
use crate::kernels::{BandwidthMode, BandwidthPolicy, Kernel, KernelName};

pub const DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Units {
    #[default]
    Daily,
    Yearly,
}

/// Model whose likelihood a filter run targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterModel {
    #[default]
    Learning,
    FullInformation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub filter: FilterBlock,
    pub simulate: SimulateBlock,
    pub estimation: EstimationBlock,
    pub mc_accuracy: McAccuracyBlock,
    pub var: VarBlock,
    pub vuong: VuongBlock,
    pub io: IoBlock,
}

/// Structural parameters. Omitted values take the daily calibration. With
/// `units = "yearly"` the drifts are divided by 252, the volatilities by
/// `√252` and `q_bar` is multiplied by 252; switching probabilities are per
/// day in both cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub units: Units,
    pub kbar: usize,
    pub m0: Option<f64>,
    pub gamma_kbar: Option<f64>,
    pub b: Option<f64>,
    pub sigma_delta: Option<f64>,
    pub g_c: Option<f64>,
    pub g_d: Option<f64>,
    pub r_f: Option<f64>,
    pub sigma_c: Option<f64>,
    pub sigma_d_bar: Option<f64>,
    pub rho_cd: Option<f64>,
    pub q_bar: Option<f64>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            units: Units::Daily,
            kbar: 3,
            m0: None,
            gamma_kbar: None,
            b: None,
            sigma_delta: None,
            g_c: None,
            g_d: None,
            r_f: None,
            sigma_c: None,
            sigma_d_bar: None,
            rho_cd: None,
            q_bar: None,
        }
    }
}

impl ModelBlock {
    /// Daily-unit parameters; `alpha` is left for calibration.
    pub fn params(&self) -> Result<StructuralParams> {
        let mut p = StructuralParams::daily_calibration(self.kbar);
        let (rate, vol, level) = match self.units {
            Units::Daily => (1.0, 1.0, 1.0),
            Units::Yearly => (
                1.0 / DAYS_PER_YEAR,
                1.0 / DAYS_PER_YEAR.sqrt(),
                DAYS_PER_YEAR,
            ),
        };
        let set = |dst: &mut f64, v: Option<f64>, scale: f64| {
            if let Some(v) = v {
                *dst = v * scale;
            }
        };
        set(&mut p.m0, self.m0, 1.0);
        set(&mut p.gamma_kbar, self.gamma_kbar, 1.0);
        set(&mut p.b, self.b, 1.0);
        set(&mut p.sigma_delta, self.sigma_delta, 1.0);
        set(&mut p.rho_cd, self.rho_cd, 1.0);
        set(&mut p.g_c, self.g_c, rate);
        set(&mut p.g_d, self.g_d, rate);
        set(&mut p.r_f, self.r_f, rate);
        set(&mut p.sigma_c, self.sigma_c, vol);
        set(&mut p.sigma_d_bar, self.sigma_d_bar, vol);
        // q_bar is a price over a per-period dividend
        set(&mut p.q_bar, self.q_bar, level);
        p.validate()
            .map_err(|e| Error::Config(format!("[model] {e}")))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterBlock {
    pub model: FilterModel,
    pub particles: usize,
    pub kernel: KernelName,
    pub bandwidth: BandwidthMode,
    /// Fixed bandwidth or power-law prefactor.
    pub h1: f64,
    /// Multiplier of the robust spread in adaptive-scale mode.
    pub scale_constant: f64,
    /// Power-law exponent; defaults to `-1/(n_R + 4)`.
    pub exponent: Option<f64>,
    pub scheme: ResamplingScheme,
    /// Master seed of every command.
    pub seed: u64,
    /// Burn-in of each prior draw of the learning economy.
    pub burn_in: usize,
}

impl Default for FilterBlock {
    fn default() -> Self {
        Self {
            model: FilterModel::Learning,
            particles: 10_000,
            kernel: KernelName::Gaussian,
            bandwidth: BandwidthMode::AdaptiveScale,
            h1: 1.0,
            scale_constant: 1.0,
            exponent: None,
            scheme: ResamplingScheme::default(),
            seed: 0,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

impl FilterBlock {
    pub fn bandwidth_policy(&self) -> Result<BandwidthPolicy> {
        let mut policy = match self.bandwidth {
            BandwidthMode::Fixed => BandwidthPolicy::fixed(self.h1),
            BandwidthMode::PowerLaw => match self.exponent {
                Some(e) => BandwidthPolicy::power_law_with_exponent(self.h1, e, 1),
                None => BandwidthPolicy::power_law(self.h1, 1),
            },
            BandwidthMode::AdaptiveScale => BandwidthPolicy::adaptive(self.scale_constant, 1),
        }
        .map_err(|e| Error::Config(format!("[filter] {e}")))?;
        if let (BandwidthMode::AdaptiveScale, Some(e)) = (self.bandwidth, self.exponent) {
            policy.exponent = e;
        }
        Ok(policy)
    }

    /// Filter settings for scalar returns with `particles` particles.
    pub fn filter_config(&self, particles: usize, seed: u64) -> Result<FilterConfig> {
        Ok(FilterConfig {
            particles,
            kernel: Kernel::from_name(self.kernel, 1),
            bandwidth: self.bandwidth_policy()?,
            scheme: self.scheme,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateBlock {
    pub length: usize,
    pub data: DataModel,
    /// First date of the exported series (ISO 8601).
    pub start_date: Option<String>,
}

impl Default for SimulateBlock {
    fn default() -> Self {
        Self {
            length: 2_000,
            data: DataModel::Learning,
            start_date: None,
        }
    }
}

impl SimulateBlock {
    pub fn start_date(&self) -> Result<Option<NaiveDate>> {
        self.start_date
            .as_deref()
            .map(|s| {
                NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .map_err(|e| Error::Config(format!("[simulate] start_date `{s}`: {e}")))
            })
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationBlock {
    pub method: IiMethod,
    pub s: usize,
    pub kind: AuxKind,
    pub weighting: Weighting,
    pub max_evals: usize,
    /// Starts of the FI maximum-likelihood search.
    pub starts: usize,
    pub mle_max_evals: usize,
    pub inner_max_evals: usize,
    pub tau: usize,
    pub jacobian_step: f64,
    /// `σ_δ` values the II and SMM searches start from.
    pub sigma_delta_starts: Vec<f64>,
}

impl Default for EstimationBlock {
    fn default() -> Self {
        let ii = IiOptions::default();
        Self {
            method: ii.method,
            s: ii.s,
            kind: ii.kind,
            weighting: ii.weighting,
            max_evals: ii.max_evals,
            starts: ii.mle.starts,
            mle_max_evals: ii.mle.max_evals,
            inner_max_evals: ii.inner_max_evals,
            tau: ii.tau,
            jacobian_step: ii.jacobian_step,
            sigma_delta_starts: ii.sigma_delta_starts,
        }
    }
}

impl EstimationBlock {
    pub fn mle_options(&self, seed: u64) -> FiMleOptions {
        FiMleOptions {
            starts: self.starts,
            max_evals: self.mle_max_evals,
            seed,
            ..FiMleOptions::default()
        }
    }

    pub fn ii_options(&self, seed: u64) -> IiOptions {
        IiOptions {
            method: self.method,
            s: self.s,
            kind: self.kind,
            weighting: self.weighting,
            max_evals: self.max_evals,
            seed,
            tau: self.tau,
            jacobian_step: self.jacobian_step,
            mle: self.mle_options(seed),
            inner_max_evals: self.inner_max_evals,
            sigma_delta_starts: self.sigma_delta_starts.clone(),
            ..IiOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McAccuracyBlock {
    pub data: DataModel,
    pub length: usize,
    pub particles: Vec<usize>,
    pub replications: usize,
    /// Noise levels of the learning filters.
    pub sigma_deltas: Vec<f64>,
    pub full_information_filter: bool,
}

impl Default for McAccuracyBlock {
    fn default() -> Self {
        Self {
            data: DataModel::FullInformation,
            length: 2_000,
            particles: vec![1_000, 10_000, 100_000],
            replications: 20,
            sigma_deltas: vec![0.01],
            full_information_filter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarBlock {
    pub levels: Vec<f64>,
    pub horizons: Vec<usize>,
    pub paths_per_particle: usize,
    /// Window of the historical-simulation benchmark.
    pub window: usize,
    /// Observations filtered before the first forecast.
    pub warmup: usize,
    /// Forecast days simulated when no return file is given.
    pub out_of_sample: usize,
}

impl Default for VarBlock {
    fn default() -> Self {
        Self {
            levels: vec![0.01, 0.05, 0.10],
            horizons: vec![1, 5],
            paths_per_particle: crate::risk::DEFAULT_PATHS_PER_PARTICLE,
            window: crate::risk::HISTORICAL_WINDOW,
            warmup: 500,
            out_of_sample: 2_500,
        }
    }
}

/// The rival model of a Vuong comparison: the `[model]` block with these
/// values replaced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlternativeBlock {
    pub model: Option<FilterModel>,
    pub m0: Option<f64>,
    pub gamma_kbar: Option<f64>,
    pub b: Option<f64>,
    pub sigma_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VuongBlock {
    pub alternative: AlternativeBlock,
    pub tau: usize,
}

impl Default for VuongBlock {
    fn default() -> Self {
        Self {
            alternative: AlternativeBlock {
                model: Some(FilterModel::FullInformation),
                ..AlternativeBlock::default()
            },
            tau: NW_LAGS,
        }
    }
}

impl VuongBlock {
    pub fn alternative_params(&self, base: &StructuralParams) -> Result<StructuralParams> {
        let a = &self.alternative;
        let p = StructuralParams {
            m0: a.m0.unwrap_or(base.m0),
            gamma_kbar: a.gamma_kbar.unwrap_or(base.gamma_kbar),
            b: a.b.unwrap_or(base.b),
            sigma_delta: a.sigma_delta.unwrap_or(base.sigma_delta),
            ..base.clone()
        };
        p.validate()
            .map_err(|e| Error::Config(format!("[vuong.alternative] {e}")))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoBlock {
    /// Return series (`date,excess_log_return`) used instead of simulated
    /// data.
    pub returns: Option<PathBuf>,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn check_fraction(block: &str, key: &str, v: f64) -> Result<()> {
    ensure(v > 0.0 && v < 1.0, || {
        format!("[{block}] {key} = {v} must lie in (0, 1)")
    })
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check every range.
    pub fn validate(&self) -> Result<()> {
        self.model.params()?;
        let f = &self.filter;
        ensure(f.particles >= 1, || {
            "[filter] particles must be at least 1".into()
        })?;
        f.bandwidth_policy()?;

        ensure(self.simulate.length >= 1, || {
            "[simulate] length must be at least 1".into()
        })?;
        self.simulate.start_date()?;

        let e = &self.estimation;
        ensure(e.s >= 1, || "[estimation] s must be at least 1".into())?;
        ensure(
            e.max_evals >= 1 && e.mle_max_evals >= 1 && e.inner_max_evals >= 1,
            || "[estimation] evaluation budgets must be at least 1".into(),
        )?;
        ensure(e.starts >= 1, || {
            "[estimation] starts must be at least 1".into()
        })?;
        ensure(e.jacobian_step > 0.0 && e.jacobian_step.is_finite(), || {
            "[estimation] jacobian_step must be positive".into()
        })?;
        ensure(
            e.sigma_delta_starts
                .iter()
                .all(|&x| x > 0.0 && x.is_finite()),
            || "[estimation] sigma_delta_starts must be positive".into(),
        )?;

        let m = &self.mc_accuracy;
        ensure(m.length >= 1 && m.replications >= 1, || {
            "[mc_accuracy] length and replications must be at least 1".into()
        })?;
        ensure(
            !m.particles.is_empty() && m.particles.iter().all(|&n| n >= 1),
            || "[mc_accuracy] particles must be a non-empty list of positive sizes".into(),
        )?;
        ensure(
            m.sigma_deltas.iter().all(|&s| s >= 0.0 && s.is_finite()),
            || "[mc_accuracy] sigma_deltas must be nonnegative".into(),
        )?;
        ensure(
            !m.sigma_deltas.is_empty() || m.full_information_filter,
            || "[mc_accuracy] no filter selected".into(),
        )?;

        let v = &self.var;
        ensure(!v.levels.is_empty() && !v.horizons.is_empty(), || {
            "[var] levels and horizons must be non-empty".into()
        })?;
        for &p in &v.levels {
            check_fraction("var", "level", p)?;
        }
        ensure(v.horizons.iter().all(|&h| h >= 1), || {
            "[var] horizons must be positive".into()
        })?;
        ensure(v.paths_per_particle >= 1, || {
            "[var] paths_per_particle must be at least 1".into()
        })?;
        ensure(v.window >= 1 && v.warmup >= v.window, || {
            format!(
                "[var] need 1 <= window ({}) <= warmup ({})",
                v.window, v.warmup
            )
        })?;

        self.vuong.alternative_params(&self.model.params()?)?;
        ensure(self.vuong.tau >= 1, || {
            "[vuong] tau must be at least 1".into()
        })
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default_calibration() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(
            cfg.model.params().unwrap(),
            StructuralParams::daily_calibration(3)
        );
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[model]\nkbarr = 2\n",
            "[nope]\n",
            "[filter]\nparticles = 5\ncolor = 1\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn ranges_checked_at_parse() {
        for text in [
            "[model]\nm0 = 2.5\n",
            "[filter]\nparticles = 0\n",
            "[filter]\nbandwidth = \"power-law\"\nexponent = -2.0\n",
            "[var]\nlevels = [1.5]\n",
            "[var]\nwindow = 100\nwarmup = 50\n",
            "[simulate]\nstart_date = \"2001-02-30\"\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn yearly_units_convert() {
        let cfg = RunConfig::from_toml_str(
            "[model]\nunits = \"yearly\"\nq_bar = 25.0\nsigma_c = 0.03\nr_f = 0.0105\n",
        )
        .unwrap();
        let p = cfg.model.params().unwrap();
        assert!((p.q_bar - 6300.0).abs() < 1e-9);
        assert!((p.sigma_c - 0.03 / 252f64.sqrt()).abs() < 1e-15);
        assert!((p.r_f - 0.0105 / 252.0).abs() < 1e-15);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.filter.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let back = RunConfig::from_toml_str(&a.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
