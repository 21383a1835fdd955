//! Multi-run experiments shared by the command line and the test suites:
//! likelihood precision of the filter and VaR backtests.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::economy::{
    price_dividend, simulate_path, Economy, EconomyState, LearningModel, StructuralParams,
};
use crate::error::{Error, Result};
use crate::fi::{fi_loglik, fi_simulate, FiModel, FiStateModel};
use crate::filter::{csv_io, run_filter, FilterConfig, MomentFn, SosFilter, StateModel};
use crate::risk::{
    failure_rate, forward_sums, historical_var, predictive_sample, var_from_sample, BacktestReport,
    VarForecast,
};
use crate::rng::derive_seed;

/// Pseudo-R² `1 - Σ(Q̂_t - Q_t)² / Σ(Q̂_t - Q̄)²` with `Q̄` the time average of
/// the true series.
pub fn pseudo_r2(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(
            "estimate and truth series must have equal positive length",
        ));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let num: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, q)| (e - q).powi(2))
        .sum();
    let den: f64 = estimates.iter().map(|e| (e - mean).powi(2)).sum();
    if den == 0.0 {
        return Ok(if num == 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    Ok(1.0 - num / den)
}

/// Which economy generates the reference path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataModel {
    FullInformation,
    Learning,
}

/// Settings of a likelihood-precision study.
#[derive(Debug, Clone)]
pub struct McAccuracySpec {
    /// Data-generating parameters; `sigma_delta` is used when the data come
    /// from the learning economy.
    pub params: StructuralParams,
    pub data: DataModel,
    pub path_length: usize,
    pub particles: Vec<usize>,
    pub replications: usize,
    /// Learning filters to run, one per noise level.
    pub sigma_deltas: Vec<f64>,
    /// Also run the filter on the full-information economy.
    pub full_information_filter: bool,
    pub burn_in: usize,
    /// Template for kernel, bandwidth and resampling.
    pub filter: FilterConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McRow {
    pub filter: String,
    pub sigma_delta: Option<f64>,
    pub particles: usize,
    pub replications: usize,
    pub mean_loglik: f64,
    pub rmse: f64,
    pub relative_rmse: f64,
    pub r2_q_nature: f64,
    pub r2_q_belief: f64,
    pub logliks: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub path_length: usize,
    /// Exact log-likelihood for full-information data; otherwise the mean
    /// estimate at the largest filter size of the first filter.
    pub reference_loglik: f64,
    pub exact_reference: bool,
    pub rows: Vec<McRow>,
}

impl McReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "filter",
            "sigma_delta",
            "particles",
            "replications",
            "mean_loglik",
            "rmse",
            "relative_rmse",
            "r2_q_nature",
            "r2_q_belief",
        ])
        .map_err(csv_io)?;
        for r in &self.rows {
            w.write_record([
                r.filter.clone(),
                r.sigma_delta.map_or(String::new(), |s| s.to_string()),
                r.particles.to_string(),
                r.replications.to_string(),
                r.mean_loglik.to_string(),
                r.rmse.to_string(),
                r.relative_rmse.to_string(),
                r.r2_q_nature.to_string(),
                r.r2_q_belief.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reference path with the true price-dividend ratios.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    pub nature: Vec<usize>,
    pub returns: Vec<f64>,
    pub q_nature: Vec<f64>,
    pub q_belief: Vec<f64>,
    pub exact_loglik: Option<f64>,
}

const DATA_TAG: u64 = 1 << 40;

/// Simulated data for a study; the path uses `derive_seed(seed, 2^40)`.
pub fn reference_path(
    params: &StructuralParams,
    data: DataModel,
    t: usize,
    seed: u64,
) -> Result<ReferencePath> {
    let data_seed = derive_seed(seed, DATA_TAG);
    match data {
        DataModel::FullInformation => {
            let model = FiModel::new(params)?;
            let (states, returns) = fi_simulate(&model, t, data_seed)?;
            let q: Vec<f64> = states
                .iter()
                .map(|&j| model.economy().coefficients()[j])
                .collect();
            Ok(ReferencePath {
                exact_loglik: Some(fi_loglik(&returns, &model)?),
                nature: states,
                returns,
                q_belief: q.clone(),
                q_nature: q,
            })
        }
        DataModel::Learning => {
            let econ = Economy::calibrated(params.clone())?;
            let path = simulate_path(&econ, t, data_seed, None)?;
            Ok(ReferencePath {
                nature: path.nature,
                returns: path.returns,
                q_nature: path.q_nature,
                q_belief: path.q_belief,
                exact_loglik: None,
            })
        }
    }
}

struct Run {
    loglik: f64,
    r2_nature: f64,
    r2_belief: f64,
}

fn run_one<M: StateModel>(
    model: &M,
    path: &ReferencePath,
    config: &FilterConfig,
    moments: &[MomentFn<'_, M::State>],
) -> Result<Run> {
    let out = run_filter(model, &path.returns, config, moments)?;
    let col = |k: usize| out.steps.iter().map(|s| s.moments[k]).collect::<Vec<_>>();
    Ok(Run {
        loglik: out.loglik,
        r2_nature: pseudo_r2(&col(0), &path.q_nature)?,
        r2_belief: pseudo_r2(&col(1), &path.q_belief)?,
    })
}

/// Replication `r` of every filter uses the seed `derive_seed(seed, r)`,
/// independently of the filter size.
pub fn mc_accuracy(spec: &McAccuracySpec) -> Result<McReport> {
    if spec.particles.is_empty() || spec.replications == 0 {
        return Err(Error::invalid(
            "need at least one filter size and one replication",
        ));
    }
    let path = reference_path(&spec.params, spec.data, spec.path_length, spec.seed)?;
    let mut rows = Vec::new();
    let mut push_rows =
        |name: String, sd: Option<f64>, run: &dyn Fn(usize, u64) -> Result<Run>| -> Result<()> {
            for &n in &spec.particles {
                let runs: Vec<Run> = (0..spec.replications)
                    .map(|r| run(n, derive_seed(spec.seed, r as u64)))
                    .collect::<Result<_>>()?;
                let k = runs.len() as f64;
                let logliks: Vec<f64> = runs.iter().map(|r| r.loglik).collect();
                rows.push(McRow {
                    filter: name.clone(),
                    sigma_delta: sd,
                    particles: n,
                    replications: spec.replications,
                    mean_loglik: logliks.iter().sum::<f64>() / k,
                    rmse: f64::NAN,
                    relative_rmse: f64::NAN,
                    r2_q_nature: runs.iter().map(|r| r.r2_nature).sum::<f64>() / k,
                    r2_q_belief: runs.iter().map(|r| r.r2_belief).sum::<f64>() / k,
                    logliks,
                });
            }
            Ok(())
        };

    for &sd in &spec.sigma_deltas {
        let mut p = spec.params.clone();
        p.sigma_delta = sd;
        let econ = Economy::calibrated(p)?;
        let coeffs = econ.coefficients().to_vec();
        let model = LearningModel {
            economy: econ,
            burn_in: spec.burn_in,
        };
        let qm = |s: &EconomyState| coeffs[s.nature];
        let qb = |s: &EconomyState| price_dividend(&s.belief, &coeffs);
        let moments: [MomentFn<'_, EconomyState>; 2] = [&qm, &qb];
        push_rows(
            format!("learning sigma_delta={sd}"),
            Some(sd),
            &|n, seed| {
                let cfg = FilterConfig {
                    particles: n,
                    seed,
                    ..spec.filter.clone()
                };
                run_one(&model, &path, &cfg, &moments)
            },
        )?;
    }
    if spec.full_information_filter {
        let model = FiStateModel {
            model: FiModel::new(&spec.params)?,
        };
        let coeffs = model.model.economy().coefficients().to_vec();
        let q = |s: &usize| coeffs[*s];
        let moments: [MomentFn<'_, usize>; 2] = [&q, &q];
        push_rows("full-information".into(), None, &|n, seed| {
            let cfg = FilterConfig {
                particles: n,
                seed,
                ..spec.filter.clone()
            };
            run_one(&model, &path, &cfg, &moments)
        })?;
    }

    let reference = match path.exact_loglik {
        Some(l) => l,
        None => {
            let first = &rows[spec.particles.len() - 1];
            first.mean_loglik
        }
    };
    for row in &mut rows {
        let k = row.logliks.len() as f64;
        row.rmse = (row
            .logliks
            .iter()
            .map(|l| (l - reference).powi(2))
            .sum::<f64>()
            / k)
            .sqrt();
        row.relative_rmse = row.rmse / reference.abs();
    }
    Ok(McReport {
        path_length: spec.path_length,
        reference_loglik: reference,
        exact_reference: path.exact_loglik.is_some(),
        rows,
    })
}

/// Settings of a VaR backtest.
#[derive(Debug, Clone)]
pub struct VarBacktestSpec {
    pub levels: Vec<f64>,
    pub horizons: Vec<usize>,
    pub paths_per_particle: usize,
    pub window: usize,
    /// First forecast origin: the number of observations seen before the
    /// first forecast.
    pub first_origin: usize,
    pub filter: FilterConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarRow {
    pub method: String,
    pub report: BacktestReport,
}

/// Model-based and historical VaR forecasts at every origin
/// `first_origin..=T - h`, backtested against the realized `h`-day sums.
pub fn var_backtest<M: StateModel>(
    model: &M,
    returns: &[f64],
    spec: &VarBacktestSpec,
) -> Result<Vec<VarRow>> {
    let t_max = returns.len();
    let h_max = *spec
        .horizons
        .iter()
        .max()
        .ok_or_else(|| Error::invalid("no horizons requested"))?;
    if spec.horizons.contains(&0) || spec.levels.is_empty() {
        return Err(Error::invalid(
            "horizons must be positive and levels non-empty",
        ));
    }
    if spec.first_origin < spec.window || spec.first_origin + h_max > t_max {
        return Err(Error::InsufficientSample(format!(
            "origins from {} need {} prior and {h_max} later observations of {t_max}",
            spec.first_origin, spec.window
        )));
    }
    let nl = spec.levels.len();
    let nh = spec.horizons.len();
    let mut model_fc: Vec<Vec<VarForecast>> = vec![Vec::new(); nl * nh];
    let mut hist_fc: Vec<Vec<VarForecast>> = vec![Vec::new(); nl * nh];

    let mut filter = SosFilter::new(model, spec.filter.clone())?;
    for t in 0..t_max {
        if t >= spec.first_origin && t < t_max {
            let states: Vec<M::State> = filter.particles().cloned().collect();
            let sample = predictive_sample(
                model,
                &states,
                &filter.history(),
                h_max,
                spec.paths_per_particle,
                spec.filter.seed,
                t,
            )?;
            for (hi, &h) in spec.horizons.iter().enumerate() {
                if t + h > t_max {
                    continue;
                }
                for (li, &p) in spec.levels.iter().enumerate() {
                    model_fc[hi * nl + li].push(VarForecast {
                        t,
                        horizon: h,
                        level: p,
                        value: var_from_sample(&sample[h - 1], p)?,
                    });
                    hist_fc[hi * nl + li].push(historical_var(returns, t, spec.window, h, p)?);
                }
            }
        }
        filter.step(&returns[t..t + 1], &[])?;
    }

    let mut rows = Vec::new();
    for (method, fcs) in [("model", &model_fc), ("historical", &hist_fc)] {
        for (hi, &h) in spec.horizons.iter().enumerate() {
            let realized = forward_sums(&returns[spec.first_origin..], h);
            for li in 0..nl {
                let f = &fcs[hi * nl + li];
                rows.push(VarRow {
                    method: method.into(),
                    report: failure_rate(&realized[..f.len()], f)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Backtest table: one row per method, level and horizon.
pub fn write_backtest_csv<W: Write>(out: W, rows: &[VarRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "level",
        "horizon",
        "n",
        "failure_rate",
        "std_error",
        "reject_1pct",
        "nonoverlap_n",
        "nonoverlap_failure_rate",
        "nonoverlap_std_error",
        "nonoverlap_reject_1pct",
    ])
    .map_err(csv_io)?;
    for row in rows {
        let r = &row.report;
        let mut rec = vec![
            row.method.clone(),
            r.level.to_string(),
            r.horizon.to_string(),
            r.all.n.to_string(),
            r.all.failure_rate.to_string(),
            r.all.std_error.to_string(),
            r.all.reject_at_1pct.to_string(),
        ];
        match &r.non_overlapping {
            Some(s) => rec.extend([
                s.n.to_string(),
                s.failure_rate.to_string(),
                s.std_error.to_string(),
                s.reject_at_1pct.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}
