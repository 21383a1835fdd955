//! Value-at-risk forecasts from a particle cloud, the historical-simulation
//! benchmark, failure-rate backtests and the HAC Vuong test.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{History, StateModel};
use crate::ii::newey_west;
use crate::numeric::{quantile, quantile_sorted};
use crate::rng::{inverse_normal_cdf, Domain, Stream};

/// Default number of forward paths per particle.
pub const DEFAULT_PATHS_PER_PARTICLE: usize = 10;
/// Default historical-simulation window.
pub const HISTORICAL_WINDOW: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarForecast {
    /// Forecast origin: the number of observations already seen.
    pub t: usize,
    pub horizon: usize,
    pub level: f64,
    /// Loss threshold: the `horizon`-day return falls below `-value` with
    /// probability `level`.
    pub value: f64,
}

fn check_level(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("VaR level {p} must lie in (0, 1)")))
    }
}

/// Pooled predictive sample of cumulative returns over `1..=horizon` days.
/// Entry `h - 1` holds the `h`-day sums. Path `k` of particle `n` uses stream
/// `(seed, Forecast, t, n·paths + k)`. The conditioning history is held at
/// the forecast origin.
#[allow(clippy::too_many_arguments)]
pub fn predictive_sample<M: StateModel>(
    model: &M,
    particles: &[M::State],
    history: &History<'_>,
    horizon: usize,
    paths: usize,
    seed: u64,
    t: usize,
) -> Result<Vec<Vec<f64>>> {
    if horizon == 0 || paths == 0 || particles.is_empty() {
        return Err(Error::invalid(
            "horizon, paths per particle and cloud size must all be positive",
        ));
    }
    if model.obs_dim() != 1 {
        return Err(Error::invalid("VaR needs a scalar observation"));
    }
    let per_particle: Vec<Vec<f64>> = particles
        .par_iter()
        .enumerate()
        .map(|(n, s0)| {
            let mut out = Vec::with_capacity(paths * horizon);
            let mut obs = [0.0];
            for k in 0..paths {
                let mut rng = Stream::new(seed, Domain::Forecast, t as u64, (n * paths + k) as u64);
                let mut state = s0.clone();
                let mut cum = 0.0;
                for _ in 0..horizon {
                    state = model
                        .sample_transition(&state, history, &mut rng, &mut obs)
                        .map_err(|e| Error::ModelEvaluation {
                            particle: n,
                            message: e.to_string(),
                        })?;
                    cum += obs[0];
                    out.push(cum);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let total = particles.len() * paths;
    let mut by_h = vec![Vec::with_capacity(total); horizon];
    for block in &per_particle {
        for path in block.chunks_exact(horizon) {
            for (h, v) in path.iter().enumerate() {
                by_h[h].push(*v);
            }
        }
    }
    Ok(by_h)
}

/// `-quantile(sample, p)`; the sample must hold at least `100/p` draws.
pub fn var_from_sample(sample: &[f64], p: f64) -> Result<f64> {
    check_level(p)?;
    let needed = (100.0 / p).ceil() as usize;
    if sample.len() < needed {
        return Err(Error::InsufficientSample(format!(
            "VaR at level {p} needs {needed} predictive draws, got {}",
            sample.len()
        )));
    }
    Ok(-quantile(sample, p))
}

/// Model VaR from a post-resampling cloud.
#[allow(clippy::too_many_arguments)]
pub fn model_var<M: StateModel>(
    model: &M,
    particles: &[M::State],
    history: &History<'_>,
    horizon: usize,
    p: f64,
    paths: usize,
    seed: u64,
    t: usize,
) -> Result<VarForecast> {
    check_level(p)?;
    let sample = predictive_sample(model, particles, history, horizon, paths, seed, t)?;
    Ok(VarForecast {
        t,
        horizon,
        level: p,
        value: var_from_sample(&sample[horizon - 1], p)?,
    })
}

/// Historical-simulation VaR made at origin `t` from `returns[t - window..t]`.
/// For `horizon > 1` the overlapping `horizon`-day sums inside the window are
/// used.
pub fn historical_var(
    returns: &[f64],
    t: usize,
    window: usize,
    horizon: usize,
    p: f64,
) -> Result<VarForecast> {
    check_level(p)?;
    if horizon == 0 || window < horizon {
        return Err(Error::invalid("window must cover at least one horizon"));
    }
    if t < window || t > returns.len() {
        return Err(Error::InsufficientSample(format!(
            "historical VaR at origin {t} needs {window} prior returns"
        )));
    }
    let w = &returns[t - window..t];
    let mut sums: Vec<f64> = w.windows(horizon).map(|s| s.iter().sum()).collect();
    sums.sort_by(f64::total_cmp);
    Ok(VarForecast {
        t,
        horizon,
        level: p,
        value: -quantile_sorted(&sums, p),
    })
}

/// Failure statistics on one sample of forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    pub n: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub std_error: f64,
    pub reject_at_1pct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub level: f64,
    pub horizon: usize,
    /// Every forecast. For `horizon > 1` the windows overlap and the standard
    /// error is Newey-West with `horizon - 1` lags.
    pub all: FailureStats,
    /// Every `horizon`-th forecast with the binomial standard error; only
    /// for `horizon > 1`.
    pub non_overlapping: Option<FailureStats>,
}

impl BacktestReport {
    pub fn failure_rate(&self) -> f64 {
        self.all.failure_rate
    }

    pub fn std_error(&self) -> f64 {
        self.all.std_error
    }

    pub fn reject_at_1pct(&self) -> bool {
        self.all.reject_at_1pct
    }
}

/// Two-sided 1% critical value of the standard normal.
pub fn z_995() -> f64 {
    inverse_normal_cdf(0.995)
}

fn stats(hits: &[bool], p: f64, lags: usize) -> Result<FailureStats> {
    let n = hits.len();
    if n == 0 {
        return Err(Error::InsufficientSample("no forecasts to evaluate".into()));
    }
    let failures = hits.iter().filter(|h| **h).count();
    let rate = failures as f64 / n as f64;
    let std_error = if lags == 0 {
        (rate * (1.0 - rate) / n as f64).sqrt()
    } else {
        let centered = DMatrix::from_iterator(
            n,
            1,
            hits.iter().map(|&h| if h { 1.0 - rate } else { -rate }),
        );
        (newey_west(&centered, lags.min(n - 1))?[(0, 0)].max(0.0) / n as f64).sqrt()
    };
    Ok(FailureStats {
        n,
        failures,
        failure_rate: rate,
        std_error,
        reject_at_1pct: (rate - p).abs() > z_995() * std_error,
    })
}

/// Backtest of `forecasts[i]` against `realized[i]`, the return over the
/// forecast's horizon. A failure is `realized < -value`.
pub fn failure_rate(realized: &[f64], forecasts: &[VarForecast]) -> Result<BacktestReport> {
    if realized.len() != forecasts.len() {
        return Err(Error::invalid(format!(
            "{} realized returns for {} forecasts",
            realized.len(),
            forecasts.len()
        )));
    }
    let first = forecasts
        .first()
        .ok_or_else(|| Error::InsufficientSample("no forecasts to evaluate".into()))?;
    let (p, horizon) = (first.level, first.horizon);
    if forecasts
        .iter()
        .any(|f| f.level != p || f.horizon != horizon)
    {
        return Err(Error::invalid("forecasts mix levels or horizons"));
    }
    let hits: Vec<bool> = realized
        .iter()
        .zip(forecasts)
        .map(|(r, f)| *r < -f.value)
        .collect();
    let all = stats(&hits, p, horizon - 1)?;
    let non_overlapping = if horizon > 1 {
        let sub: Vec<bool> = hits.iter().step_by(horizon).copied().collect();
        Some(stats(&sub, p, 0)?)
    } else {
        None
    };
    Ok(BacktestReport {
        level: p,
        horizon,
        all,
        non_overlapping,
    })
}

/// Cumulative `horizon`-day returns starting at each index: entry `i` is
/// `returns[i] + … + returns[i + horizon - 1]`.
pub fn forward_sums(returns: &[f64], horizon: usize) -> Vec<f64> {
    returns.windows(horizon).map(|w| w.iter().sum()).collect()
}

/// HAC Vuong statistic `√T·mean(d)/√(NW variance of d)` for
/// `d = a - b`; positive values favor `a`.
pub fn vuong_test(a: &[f64], b: &[f64], tau: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "likelihood increments have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let t = a.len();
    if t < 2 {
        return Err(Error::InsufficientSample(
            "Vuong test needs two observations".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / t as f64;
    let centered = DMatrix::from_iterator(t, 1, d.iter().map(|v| v - mean));
    let var = newey_west(&centered, tau.min(t - 1))?[(0, 0)];
    if !(var > 0.0) {
        return Err(Error::DegenerateTest(
            "likelihood differences have zero long-run variance".into(),
        ));
    }
    Ok((t as f64).sqrt() * mean / var.sqrt())
}
