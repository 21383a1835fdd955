//! Full-information (FI) economy: the agent observes the state of nature,
//! so the return law given two consecutive states is normal and the
//! likelihood follows from a Hamilton-type recursion.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::economy::{transition_nature, Economy, StructuralParams};
use crate::error::{Error, Result};
use crate::filter::{History, StateModel};
use crate::numeric::{nelder_mead, NelderMeadOptions};
use crate::rng::{Domain, Stream};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// The FI parameter `φ = (m0, γ_kbar, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiParams {
    pub m0: f64,
    pub gamma_kbar: f64,
    pub b: f64,
}

impl FiParams {
    pub fn of(p: &StructuralParams) -> Self {
        Self {
            m0: p.m0,
            gamma_kbar: p.gamma_kbar,
            b: p.b,
        }
    }

    /// `p` with its FI block replaced by `self`.
    pub fn apply(&self, p: &StructuralParams) -> StructuralParams {
        StructuralParams {
            m0: self.m0,
            gamma_kbar: self.gamma_kbar,
            b: self.b,
            ..p.clone()
        }
    }

    /// Unconstrained coordinates `(logit(m0 - 1), logit(γ), ln(b - 1))`.
    /// Fails on the boundary.
    pub fn to_unconstrained(&self) -> Result<[f64; 3]> {
        let x = [
            logit(self.m0 - 1.0),
            logit(self.gamma_kbar),
            (self.b - 1.0).ln(),
        ];
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::invalid(format!(
                "FI parameter {self:?} is on the boundary of the parameter space"
            )))
        }
    }

    pub fn from_unconstrained(x: &[f64]) -> Self {
        Self {
            m0: 1.0 + logistic(x[0]),
            gamma_kbar: logistic(x[1]),
            b: 1.0 + x[2].exp(),
        }
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A calibrated FI economy: `α` is re-solved so that the mean
/// price-dividend coefficient stays at `q_bar`.
#[derive(Debug, Clone)]
pub struct FiModel {
    economy: Economy,
    /// `ln a_ij`, row-major.
    ln_a: Vec<f64>,
    /// `ln Q_i` and `ln(1 + Q_j) + g_D - r_f - σ_j²/2`.
    ln_q: Vec<f64>,
    mean_j: Vec<f64>,
    sigma: Vec<f64>,
    inv_sigma: Vec<f64>,
    /// `-ln σ_j - ln √(2π)`.
    log_norm: Vec<f64>,
}

impl FiModel {
    /// Calibrate `α` to `params.q_bar` and precompute the transition
    /// densities. `sigma_delta` is irrelevant here.
    pub fn new(params: &StructuralParams) -> Result<Self> {
        Self::from_economy(Economy::calibrated(params.clone())?)
    }

    /// Use an economy as given (its `α` is not re-solved).
    pub fn from_economy(economy: Economy) -> Result<Self> {
        let p = economy.params().clone();
        let d = economy.states();
        let a = crate::economy::transition_matrix(&p);
        let q = economy.coefficients();
        if q.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::NumericalDegeneracy(
                "price-dividend coefficients must be positive".into(),
            ));
        }
        let sigma: Vec<f64> = (0..d).map(|j| economy.sigma_d(j)).collect();
        Ok(Self {
            ln_a: (0..d * d).map(|k| a[(k / d, k % d)].ln()).collect(),
            ln_q: q.iter().map(|v| v.ln()).collect(),
            mean_j: (0..d)
                .map(|j| (1.0 + q[j]).ln() + p.g_d - p.r_f - 0.5 * sigma[j] * sigma[j])
                .collect(),
            inv_sigma: sigma.iter().map(|s| 1.0 / s).collect(),
            log_norm: sigma.iter().map(|s| -s.ln() - LN_SQRT_2PI).collect(),
            sigma,
            economy,
        })
    }

    pub fn economy(&self) -> &Economy {
        &self.economy
    }

    pub fn params(&self) -> &StructuralParams {
        self.economy.params()
    }

    pub fn states(&self) -> usize {
        self.sigma.len()
    }

    /// Mean of the return when the state moves from `i` to `j`.
    pub fn mean(&self, i: usize, j: usize) -> f64 {
        self.mean_j[j] - self.ln_q[i]
    }

    pub fn sd(&self, j: usize) -> f64 {
        self.sigma[j]
    }

    #[inline]
    fn log_density(&self, i: usize, j: usize, r: f64) -> f64 {
        let z = (r - self.mean_j[j] + self.ln_q[i]) * self.inv_sigma[j];
        self.log_norm[j] - 0.5 * z * z
    }
}

/// Density of the return given the move `i → j`.
pub fn fi_density(i: usize, j: usize, r: f64, model: &FiModel) -> f64 {
    model.log_density(i, j, r).exp()
}

/// Hamilton filter output.
#[derive(Debug, Clone)]
pub struct FiFilterOutput {
    pub loglik: f64,
    /// `ln f(r_t | R_{t-1})` for each `t`.
    pub log_increments: Vec<f64>,
    /// Filtered probabilities, `T × d` row-major.
    pub probs: Vec<f64>,
}

impl FiFilterOutput {
    pub fn probs_at(&self, t: usize) -> &[f64] {
        let d = self.probs.len() / self.log_increments.len();
        &self.probs[t * d..(t + 1) * d]
    }
}

/// Exact FI likelihood recursion started from the uniform distribution.
pub fn fi_filter(returns: &[f64], model: &FiModel) -> Result<FiFilterOutput> {
    fi_filter_impl(returns, model, true)
}

/// Log-likelihood only; skips storing the filtered probabilities.
pub fn fi_loglik(returns: &[f64], model: &FiModel) -> Result<f64> {
    Ok(fi_filter_impl(returns, model, false)?.loglik)
}

fn fi_filter_impl(returns: &[f64], model: &FiModel, keep_probs: bool) -> Result<FiFilterOutput> {
    if returns.is_empty() {
        return Err(Error::invalid("empty return series"));
    }
    let d = model.states();
    let mut prev = vec![1.0 / d as f64; d];
    let mut next = vec![0.0; d];
    let mut logs = vec![0.0; d * d];
    let mut out = FiFilterOutput {
        loglik: 0.0,
        log_increments: Vec::with_capacity(returns.len()),
        probs: Vec::with_capacity(if keep_probs { returns.len() * d } else { 0 }),
    };
    for (t, &r) in returns.iter().enumerate() {
        if !r.is_finite() {
            return Err(Error::invalid(format!("return {t} is not finite")));
        }
        let mut max = f64::NEG_INFINITY;
        for i in 0..d {
            let row = &mut logs[i * d..(i + 1) * d];
            if prev[i] > 0.0 {
                let lp = prev[i].ln();
                for (j, l) in row.iter_mut().enumerate() {
                    *l = lp + model.ln_a[i * d + j] + model.log_density(i, j, r);
                    max = max.max(*l);
                }
            } else {
                row.fill(f64::NEG_INFINITY);
            }
        }
        next.fill(0.0);
        for i in 0..d {
            for (n, l) in next.iter_mut().zip(&logs[i * d..(i + 1) * d]) {
                let gap = l - max;
                if gap > -750.0 {
                    *n += gap.exp();
                }
            }
        }
        let sum: f64 = next.iter().sum();
        let mut log_inc = max + sum.ln();
        if !(log_inc >= f64::MIN_POSITIVE.ln()) {
            log::warn!("FI step {}: likelihood increment clipped", t + 1);
            log_inc = f64::MIN_POSITIVE.ln();
        }
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::NumericalDegeneracy(format!(
                "filtered probabilities vanish at step {}",
                t + 1
            )));
        }
        next.iter_mut().for_each(|v| *v /= sum);
        out.loglik += log_inc;
        out.log_increments.push(log_inc);
        if keep_probs {
            out.probs.extend_from_slice(&next);
        }
        std::mem::swap(&mut prev, &mut next);
    }
    Ok(out)
}

/// Options for [`fi_mle`].
#[derive(Debug, Clone)]
pub struct FiMleOptions {
    pub starts: usize,
    pub max_evals: usize,
    /// Standard deviation of the start jitter in unconstrained coordinates.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for FiMleOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            max_evals: 600,
            jitter: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiStartReport {
    pub start: FiParams,
    pub start_loglik: f64,
    pub end: FiParams,
    pub end_loglik: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiMleResult {
    pub phi: FiParams,
    pub loglik: f64,
    pub converged: bool,
    pub starts: Vec<FiStartReport>,
}

/// Minimum sample length accepted by [`fi_mle`].
pub const MIN_MLE_SAMPLE: usize = 100;

/// Log-likelihood at `phi` with `α` re-solved; `-inf` where the economy is
/// infeasible.
pub fn fi_loglik_at(returns: &[f64], base: &StructuralParams, phi: &FiParams) -> f64 {
    FiModel::new(&phi.apply(base))
        .and_then(|m| fi_loglik(returns, &m))
        .unwrap_or(f64::NEG_INFINITY)
}

/// FI maximum likelihood over `(m0, γ_kbar, b)`; the calibrated block comes
/// from `base`. Nelder-Mead from several jittered starts in unconstrained
/// coordinates; for `kbar = 1` the spacing `b` plays no role and is held
/// fixed.
pub fn fi_mle(
    returns: &[f64],
    base: &StructuralParams,
    start: Option<FiParams>,
    opts: &FiMleOptions,
) -> Result<FiMleResult> {
    if returns.len() < MIN_MLE_SAMPLE {
        return Err(Error::InsufficientSample(format!(
            "FI estimation needs at least {MIN_MLE_SAMPLE} observations, got {}",
            returns.len()
        )));
    }
    if opts.starts == 0 {
        return Err(Error::invalid("at least one start is required"));
    }
    let start = start.unwrap_or(FiParams {
        m0: 1.5,
        gamma_kbar: 0.1,
        b: 3.0,
    });
    let x0 = start.to_unconstrained()?;
    let free = if base.kbar == 1 { 2 } else { 3 };
    let objective = |x: &[f64]| {
        let mut full = x0;
        full[..free].copy_from_slice(&x[..free]);
        -fi_loglik_at(returns, base, &FiParams::from_unconstrained(&full))
    };

    let mut reports = Vec::with_capacity(opts.starts);
    let mut rng = Stream::new(opts.seed, Domain::Optimizer, 0, 0);
    for s in 0..opts.starts {
        let mut xs = x0[..free].to_vec();
        if s > 0 {
            xs.iter_mut().for_each(|v| *v += opts.jitter * rng.normal());
        }
        let mut nm = NelderMeadOptions::new(free, 0.3);
        nm.max_evals = opts.max_evals;
        nm.f_tol = 1e-7;
        nm.x_tol = 1e-6;
        let start_value = objective(&xs);
        let res = nelder_mead(objective, &xs, &nm);
        let unpack = |x: &[f64]| {
            let mut full = x0;
            full[..free].copy_from_slice(x);
            FiParams::from_unconstrained(&full)
        };
        reports.push(FiStartReport {
            start: unpack(&xs),
            start_loglik: -start_value,
            end: unpack(&res.x),
            end_loglik: -res.value,
            evaluations: res.evaluations,
            converged: res.converged,
        });
    }
    let best = reports
        .iter()
        .max_by(|a, b| a.end_loglik.total_cmp(&b.end_loglik))
        .expect("at least one start");
    if !best.end_loglik.is_finite() {
        return Err(Error::NonConvergence {
            evaluations: reports.iter().map(|r| r.evaluations).sum(),
            best_value: best.end_loglik,
            best_point: vec![best.end.m0, best.end.gamma_kbar, best.end.b],
        });
    }
    Ok(FiMleResult {
        phi: best.end,
        loglik: best.end_loglik,
        converged: best.converged,
        starts: reports.clone(),
    })
}

/// Default finite-difference step for [`fi_score`].
pub const SCORE_STEP: f64 = 1e-5;

/// Per-observation score `∂ ln f(r_t | R_{t-1}; φ) / ∂x` in unconstrained
/// coordinates `x`, by central differences. Returns a `T × 3` matrix.
pub fn fi_score(
    returns: &[f64],
    base: &StructuralParams,
    phi: &FiParams,
    step: f64,
) -> Result<DMatrix<f64>> {
    let x = phi.to_unconstrained()?;
    let t = returns.len();
    let mut score = DMatrix::zeros(t, 3);
    for k in 0..3 {
        let mut up = x;
        let mut down = x;
        up[k] += step;
        down[k] -= step;
        let inc = |xx: &[f64; 3]| -> Result<Vec<f64>> {
            let model = FiModel::new(&FiParams::from_unconstrained(xx).apply(base))?;
            Ok(fi_filter_impl(returns, &model, false)?.log_increments)
        };
        let (lu, ld) = (inc(&up)?, inc(&down)?);
        for (row, (a, b)) in lu.iter().zip(&ld).enumerate() {
            score[(row, k)] = (a - b) / (2.0 * step);
        }
    }
    Ok(score)
}

/// Outer-product-of-scores standard errors of `φ̂`, mapped to natural
/// coordinates. With `kbar = 1` the unidentified `b` gets `NaN`.
pub fn fi_std_errors(returns: &[f64], base: &StructuralParams, phi: &FiParams) -> Result<FiParams> {
    let q = if base.kbar == 1 { 2 } else { 3 };
    let score = fi_score(returns, base, phi, SCORE_STEP)?;
    let s = score.columns(0, q).into_owned();
    let opg = s.transpose() * &s;
    let cov = opg
        .try_inverse()
        .ok_or_else(|| Error::NumericalDegeneracy("singular outer product of FI scores".into()))?;
    let l = phi.m0 - 1.0;
    let jac = [
        l * (1.0 - l),
        phi.gamma_kbar * (1.0 - phi.gamma_kbar),
        phi.b - 1.0,
    ];
    let se = |k: usize| {
        if k < q {
            jac[k] * cov[(k, k)].max(0.0).sqrt()
        } else {
            f64::NAN
        }
    };
    Ok(FiParams {
        m0: se(0),
        gamma_kbar: se(1),
        b: se(2),
    })
}

/// The FI economy as a filtering model with state `M_t`.
#[derive(Debug, Clone)]
pub struct FiStateModel {
    pub model: FiModel,
}

impl StateModel for FiStateModel {
    type State = usize;

    fn obs_dim(&self) -> usize {
        1
    }

    fn sample_prior(&self, rng: &mut Stream) -> Result<usize> {
        let d = self.model.states();
        Ok(((rng.uniform() * d as f64) as usize).min(d - 1))
    }

    fn sample_transition(
        &self,
        prev: &usize,
        _history: &History<'_>,
        rng: &mut Stream,
        obs: &mut [f64],
    ) -> Result<usize> {
        let j = transition_nature(*prev, self.model.economy(), rng);
        obs[0] = self.model.mean(*prev, j) + self.model.sd(j) * rng.normal();
        Ok(j)
    }
}

/// Simulated FI path: states and returns. Period `t` uses stream
/// `(seed, Simulate, t, 0)`; the initial state is uniform.
pub fn fi_simulate(model: &FiModel, t: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    if t == 0 {
        return Err(Error::invalid("path length must be at least 1"));
    }
    let sm = FiStateModel {
        model: model.clone(),
    };
    let mut state = sm.sample_prior(&mut Stream::new(seed, Domain::BurnIn, 0, 0))?;
    let mut states = Vec::with_capacity(t);
    let mut returns = Vec::with_capacity(t);
    let empty = History::new(&[], 1);
    let mut obs = [0.0];
    for step in 1..=t {
        let mut rng = Stream::new(seed, Domain::Simulate, step as u64, 0);
        state = sm.sample_transition(&state, &empty, &mut rng, &mut obs)?;
        states.push(state);
        returns.push(obs[0]);
    }
    Ok((states, returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::integrate_real_line;

    fn model(kbar: usize) -> FiModel {
        FiModel::new(&StructuralParams::daily_calibration(kbar)).unwrap()
    }

    #[test]
    fn density_mode_and_mass() {
        let m = model(2);
        for j in 0..4 {
            let top = fi_density(j, j, m.mean(j, j), &m);
            let expected = 1.0 / (m.sd(j) * (2.0 * std::f64::consts::PI).sqrt());
            assert!((top - expected).abs() < 1e-9 * expected);
        }
        let mass = integrate_real_line(|r| fi_density(1, 2, r, &m), 1e-10, 4000).unwrap();
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_volatility_reduces_to_normal() {
        let mut p = StructuralParams::daily_calibration(1);
        p.m0 = 1.0;
        let m = FiModel::new(&p).unwrap();
        let r = [0.001, -0.02, 0.004, 0.0];
        let mu = m.mean(0, 0);
        let s = m.sd(0);
        let closed: f64 = r
            .iter()
            .map(|x| -0.5 * ((x - mu) / s).powi(2) - s.ln() - LN_SQRT_2PI)
            .sum();
        assert!((fi_loglik(&r, &m).unwrap() - closed).abs() < 1e-10);
    }

    #[test]
    fn hamilton_recursion_matches_path_enumeration() {
        let mut p = StructuralParams::daily_calibration(1);
        p.gamma_kbar = 0.3;
        let m = FiModel::new(&p).unwrap();
        let a = crate::economy::transition_matrix(m.params());
        let r = [0.002, -0.004, 0.02, -0.03, 0.001, 0.0005];
        let mut total = 0.0;
        for path in 0..(1usize << 7) {
            let s: Vec<usize> = (0..7).map(|t| path >> t & 1).collect();
            let mut w = 0.5;
            for t in 1..7 {
                w *= a[(s[t - 1], s[t])] * fi_density(s[t - 1], s[t], r[t - 1], &m);
            }
            total += w;
        }
        let ll = fi_filter(&r, &m).unwrap();
        assert!((ll.loglik - total.ln()).abs() < 1e-10);
        for t in 0..6 {
            assert!((ll.probs_at(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transforms_round_trip() {
        let phi = FiParams {
            m0: 1.4,
            gamma_kbar: 0.2,
            b: 4.0,
        };
        let back = FiParams::from_unconstrained(&phi.to_unconstrained().unwrap());
        assert!((back.m0 - 1.4).abs() < 1e-14 && (back.b - 4.0).abs() < 1e-12);
        let edge = FiParams { m0: 2.0, ..phi };
        assert!(edge.to_unconstrained().is_err());
    }

    #[test]
    fn state_model_matches_density_moments() {
        let m = model(1);
        let sm = FiStateModel { model: m.clone() };
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0usize;
        let h = History::new(&[], 1);
        for k in 0..n {
            let mut rng = Stream::new(4, Domain::Test, 0, k as u64);
            let mut obs = [0.0];
            if sm.sample_transition(&1, &h, &mut rng, &mut obs).unwrap() == 1 {
                sum += obs[0];
                sq += obs[0] * obs[0];
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let sd = (sq / count as f64 - mean * mean).sqrt();
        assert!((mean - m.mean(1, 1)).abs() < 4.0 * m.sd(1) / (count as f64).sqrt());
        assert!((sd / m.sd(1) - 1.0).abs() < 0.01);
    }
}
