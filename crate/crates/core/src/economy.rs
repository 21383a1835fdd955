//! Multifrequency learning economy.
//!
//! Nature's volatility state is a vector of `kbar` binary multipliers
//! switching at geometrically spaced frequencies. A Bayesian agent observes
//! dividend growth, consumption growth and a noisy reading of each
//! multiplier, prices a claim on dividends, and the econometrician sees only
//! the resulting log excess return.
//!
//! State index `j` in `0..2^kbar` encodes the multipliers: bit `k-1` set
//! means component `k` takes the high value `m0`, clear means `2 - m0`.
//! Component 1 is the lowest-frequency one. All rates are daily.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::filter::{History, StateModel};
use crate::numeric::brent_root;
use crate::rng::{Domain, Stream};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Agent belief over the `d` states of nature.
pub type Belief = SmallVec<[f64; 16]>;

/// Signal `x_t`: dividend growth, consumption growth, then one noisy
/// reading per multiplier.
pub type Signal = SmallVec<[f64; 12]>;

/// Number of simulated periods discarded before a default initial state.
pub const DEFAULT_BURN_IN: usize = 1000;

/// Structural parameters. Rates are per day, volatilities per square-root
/// day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuralParams {
    pub m0: f64,
    pub gamma_kbar: f64,
    pub b: f64,
    pub sigma_delta: f64,
    pub kbar: usize,
    pub g_c: f64,
    pub g_d: f64,
    pub r_f: f64,
    pub sigma_c: f64,
    pub sigma_d_bar: f64,
    pub rho_cd: f64,
    pub q_bar: f64,
    /// Relative risk aversion; set by [`solve_alpha`] when calibrating.
    #[serde(default)]
    pub alpha: f64,
}

impl StructuralParams {
    /// Daily calibration with `m0 = 1.7`, `γ_kbar = 0.06`, `b = 2`,
    /// `σ_δ = 1`, mean price-dividend ratio 6000 and `α` not yet solved.
    pub fn daily_calibration(kbar: usize) -> Self {
        Self {
            m0: 1.7,
            gamma_kbar: 0.06,
            b: 2.0,
            sigma_delta: 1.0,
            kbar,
            g_c: 0.000_075,
            g_d: 0.000_092,
            r_f: 0.000_042,
            sigma_c: 0.001_89,
            sigma_d_bar: 0.007,
            rho_cd: 0.6,
            q_bar: 6000.0,
            alpha: 0.0,
        }
    }

    /// Number of states `d = 2^kbar`.
    pub fn states(&self) -> usize {
        1 << self.kbar
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(what.to_string()))
            }
        };
        check((1.0..=2.0).contains(&self.m0), "m0 must lie in [1, 2]")?;
        check(
            self.gamma_kbar > 0.0 && self.gamma_kbar <= 1.0,
            "gamma_kbar must lie in (0, 1]",
        )?;
        check(self.b >= 1.0 && self.b.is_finite(), "b must be at least 1")?;
        check(
            self.sigma_delta >= 0.0 && self.sigma_delta.is_finite(),
            "sigma_delta must be nonnegative",
        )?;
        check((1..=12).contains(&self.kbar), "kbar must lie in 1..=12")?;
        check(
            self.sigma_c > 0.0 && self.sigma_c.is_finite(),
            "sigma_c must be positive",
        )?;
        check(
            self.sigma_d_bar > 0.0 && self.sigma_d_bar.is_finite(),
            "sigma_d_bar must be positive",
        )?;
        check(
            self.rho_cd > -1.0 && self.rho_cd < 1.0,
            "rho_cd must lie strictly inside (-1, 1)",
        )?;
        check(
            self.q_bar > 0.0 && self.q_bar.is_finite(),
            "q_bar must be positive",
        )?;
        check(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            "alpha must be nonnegative",
        )?;
        check(
            [self.g_c, self.g_d, self.r_f].iter().all(|x| x.is_finite()),
            "drifts must be finite",
        )
    }

    /// Switching probabilities `γ_k = 1 - (1 - γ_kbar)^(b^(k - kbar))`.
    pub fn gammas(&self) -> Vec<f64> {
        (1..=self.kbar)
            .map(|k| {
                let e = self.b.powi(k as i32 - self.kbar as i32);
                // 1 - (1-g)^e, accurate for small g
                -((e * (-self.gamma_kbar).ln_1p()).exp_m1())
            })
            .collect()
    }

    /// Multiplier vector of state `j`.
    pub fn multipliers(&self, j: usize) -> Vec<f64> {
        (0..self.kbar)
            .map(|k| {
                if j >> k & 1 == 1 {
                    self.m0
                } else {
                    2.0 - self.m0
                }
            })
            .collect()
    }

    /// Dividend volatility `σ_D(m^j) = σ̄_D (Π_k m_k)^(1/2)`.
    pub fn sigma_d(&self, j: usize) -> f64 {
        let c = (j as u32).count_ones() as i32;
        let lo = self.kbar as i32 - c;
        self.sigma_d_bar * (self.m0.powi(c) * (2.0 - self.m0).powi(lo)).sqrt()
    }
}

/// Transition matrix `a_ij = Π_k [(1-γ_k) 1{m^i_k = m^j_k} + γ_k/2]`.
pub fn transition_matrix(p: &StructuralParams) -> DMatrix<f64> {
    let g = p.gammas();
    let d = p.states();
    DMatrix::from_fn(d, d, |i, j| {
        g.iter()
            .enumerate()
            .map(|(k, gk)| {
                let same = (i >> k & 1) == (j >> k & 1);
                if same {
                    1.0 - gk / 2.0
                } else {
                    gk / 2.0
                }
            })
            .product()
    })
}

/// Mean of the price-dividend coefficients at risk aversion `alpha`.
fn coefficients_at(p: &StructuralParams, a: &DMatrix<f64>, alpha: f64) -> Result<Vec<f64>> {
    let d = p.states();
    let c: Vec<f64> = (0..d)
        .map(|j| (p.g_d - p.r_f - alpha * p.rho_cd * p.sigma_c * p.sigma_d(j)).exp())
        .collect();
    // B = A diag(c) is similar to the symmetric diag(c)^(1/2) A diag(c)^(1/2)
    let sym = DMatrix::from_fn(d, d, |i, j| c[i].sqrt() * a[(i, j)] * c[j].sqrt());
    let radius = sym
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |m, e| m.max(e.abs()));
    if !(radius < 1.0) {
        return Err(Error::DivergentPrice {
            spectral_radius: radius,
        });
    }
    let mut m = DMatrix::from_fn(d, d, |i, j| -a[(i, j)] * c[j]);
    for i in 0..d {
        m[(i, i)] += 1.0;
    }
    let x = m
        .lu()
        .solve(&DVector::from_element(d, 1.0))
        .ok_or_else(|| Error::NumericalDegeneracy("singular pricing system".into()))?;
    Ok(x.iter().map(|v| v - 1.0).collect())
}

/// Price-dividend coefficients `Q = (I - B)^{-1} ι - ι` with
/// `b_ij = a_ij exp(g_D - r_f - α ρ σ_C σ_D(m^j))`.
pub fn pd_coefficients(p: &StructuralParams) -> Result<Vec<f64>> {
    p.validate()?;
    coefficients_at(p, &transition_matrix(p), p.alpha)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Risk aversion such that the mean coefficient equals `q_bar`.
pub fn solve_alpha(p: &StructuralParams, q_bar: f64) -> Result<f64> {
    p.validate()?;
    if !(p.rho_cd * p.sigma_c > 0.0) {
        return Err(Error::invalid(
            "solving for alpha needs rho_cd * sigma_c > 0",
        ));
    }
    if !(q_bar > 0.0) {
        return Err(Error::invalid(
            "target price-dividend ratio must be positive",
        ));
    }
    let a = transition_matrix(p);
    // excess of the mean coefficient over the target; None when prices diverge
    let gap = |alpha: f64| coefficients_at(p, &a, alpha).ok().map(|q| mean(&q) - q_bar);
    let (lo_a, hi_a) = (1e-6f64, 1e3f64);
    let points = 181;
    let grid: Vec<f64> = (0..points)
        .map(|i| (lo_a.ln() + (hi_a / lo_a).ln() * i as f64 / (points - 1) as f64).exp())
        .collect();
    // the gap is decreasing in alpha (divergent prices count as +inf), so
    // the first grid point at or below the target is found by bisection
    let below = |x: f64| matches!(gap(x), Some(g) if g <= 0.0);
    if !below(hi_a) {
        return Err(Error::CalibrationInfeasible(format!(
            "mean price-dividend ratio stays above {q_bar} for alpha up to {hi_a}"
        )));
    }
    if below(lo_a) {
        return Err(Error::CalibrationInfeasible(format!(
            "mean price-dividend ratio is below {q_bar} already at alpha = {lo_a}"
        )));
    }
    let (mut left, mut right) = (0, points - 1);
    while right - left > 1 {
        let mid = (left + right) / 2;
        if below(grid[mid]) {
            right = mid;
        } else {
            left = mid;
        }
    }
    let first_below = right;
    let mut hi = grid[first_below];
    let mut lo = grid[first_below - 1];
    // shrink towards the divergence boundary until the lower end is finite
    let mut iterations = 0;
    while gap(lo).is_none() {
        let mid = (lo * hi).sqrt();
        match gap(mid) {
            None => lo = mid,
            Some(g) if g > 0.0 => lo = mid,
            Some(_) => hi = mid,
        }
        iterations += 1;
        if iterations > 200 {
            return Err(Error::CalibrationInfeasible(
                "no finite bracket near the price divergence boundary".into(),
            ));
        }
    }
    if gap(hi) == Some(0.0) {
        return Ok(hi);
    }
    brent_root(|x| gap(x).unwrap_or(f64::INFINITY), lo, hi, 1e-8, 200)
}

/// Agent price-dividend ratio `Q(Π) = Σ_j Q(m^j) Π^j`.
pub fn price_dividend(belief: &[f64], coeffs: &[f64]) -> f64 {
    belief.iter().zip(coeffs).map(|(p, q)| p * q).sum()
}

/// Log excess return `ln[(1 + Q(Π_t)) / Q(Π_{t-1})] + x1 - r_f`.
pub fn compute_return(
    x1: f64,
    belief: &[f64],
    belief_prev: &[f64],
    coeffs: &[f64],
    p: &StructuralParams,
) -> f64 {
    let q = price_dividend(belief, coeffs);
    let q_prev = price_dividend(belief_prev, coeffs);
    ((1.0 + q) / q_prev).ln() + x1 - p.r_f
}

/// Joint state of nature and agent.
#[derive(Debug, Clone, PartialEq)]
pub struct EconomyState {
    pub nature: usize,
    pub belief: Belief,
}

/// A parameterized economy with its derived quantities precomputed.
#[derive(Debug, Clone)]
pub struct Economy {
    params: StructuralParams,
    gammas: Vec<f64>,
    coeffs: Vec<f64>,
    /// `σ_D` and `ln σ_D` indexed by the number of high components.
    sigma_by_count: Vec<f64>,
    ln_sigma_by_count: Vec<f64>,
    inv_sigma_by_count: Vec<f64>,
    popcount: Vec<u8>,
}

impl Economy {
    /// Build with the given `alpha`.
    pub fn new(params: StructuralParams) -> Result<Self> {
        params.validate()?;
        let coeffs = pd_coefficients(&params)?;
        let kbar = params.kbar;
        let sigma_by_count: Vec<f64> = (0..=kbar)
            .map(|c| params.sigma_d((1usize << c) - 1))
            .collect();
        Ok(Self {
            gammas: params.gammas(),
            ln_sigma_by_count: sigma_by_count.iter().map(|s| s.ln()).collect(),
            inv_sigma_by_count: sigma_by_count.iter().map(|s| 1.0 / s).collect(),
            sigma_by_count,
            popcount: (0..params.states())
                .map(|j| (j as u32).count_ones() as u8)
                .collect(),
            coeffs,
            params,
        })
    }

    /// Solve `alpha` for the mean coefficient `q_bar`, then build.
    pub fn calibrated(mut params: StructuralParams) -> Result<Self> {
        params.alpha = solve_alpha(&params, params.q_bar)?;
        Self::new(params)
    }

    pub fn params(&self) -> &StructuralParams {
        &self.params
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn states(&self) -> usize {
        self.coeffs.len()
    }

    pub fn sigma_d(&self, j: usize) -> f64 {
        self.sigma_by_count[self.popcount[j] as usize]
    }

    fn multiplier(&self, j: usize, k: usize) -> f64 {
        if j >> k & 1 == 1 {
            self.params.m0
        } else {
            2.0 - self.params.m0
        }
    }

    /// `A' Π`: one prediction step of the belief, using the Kronecker
    /// structure of the transition matrix.
    pub fn predict(&self, belief: &[f64]) -> Belief {
        let mut out: Belief = SmallVec::from_slice(belief);
        self.predict_in_place(&mut out);
        out
    }

    fn predict_in_place(&self, v: &mut [f64]) {
        for (k, g) in self.gammas.iter().enumerate() {
            let (stay, move_) = (1.0 - g / 2.0, g / 2.0);
            let half = 1 << k;
            for block in v.chunks_exact_mut(2 * half) {
                let (lo, hi) = block.split_at_mut(half);
                for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                    let (x0, x1) = (*a, *b);
                    *a = stay * x0 + move_ * x1;
                    *b = move_ * x0 + stay * x1;
                }
            }
        }
    }

    /// Uniform belief.
    pub fn uniform_belief(&self) -> Belief {
        let d = self.states();
        smallvec::smallvec![1.0 / d as f64; d]
    }

    /// Log signal density for every state up to a common additive constant;
    /// `-inf` marks states ruled out by a noiseless signal.
    fn state_log_likelihoods(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let kbar = p.kbar;
        let inv_cond_sd = 1.0 / (p.sigma_c * (1.0 - p.rho_cd * p.rho_cd).sqrt());
        let rho_sc = p.rho_cd * p.sigma_c;
        let dx0 = x[0] - p.g_d;
        let dx1 = x[1] - p.g_c;
        let mut by_count = [0.0; 13];
        for (c, v) in by_count.iter_mut().enumerate().take(kbar + 1) {
            let s = self.sigma_by_count[c];
            let e = (dx0 + 0.5 * s * s) * self.inv_sigma_by_count[c];
            let z = (dx1 - rho_sc * e) * inv_cond_sd;
            *v = -self.ln_sigma_by_count[c] - 0.5 * (e * e + z * z);
        }
        if p.sigma_delta > 0.0 {
            let inv = 0.5 / (p.sigma_delta * p.sigma_delta);
            let mut base = 0.0;
            let mut diff = [0.0; 12];
            for k in 0..kbar {
                let dl = x[k + 2] - (2.0 - p.m0);
                let dh = x[k + 2] - p.m0;
                base -= dl * dl * inv;
                diff[k] = (dl * dl - dh * dh) * inv;
            }
            // noisy-reading term built up one set bit at a time
            out[0] = base;
            for j in 1..out.len() {
                out[j] = out[j & (j - 1)] + diff[j.trailing_zeros() as usize];
            }
        } else {
            for (j, v) in out.iter_mut().enumerate() {
                let consistent = (0..kbar).all(|k| x[k + 2] == self.multiplier(j, k));
                *v = if consistent { 0.0 } else { f64::NEG_INFINITY };
            }
        }
        for (v, c) in out.iter_mut().zip(&self.popcount) {
            *v += by_count[*c as usize];
        }
    }
}

/// Per-component switching: with probability `γ_k` the multiplier is
/// redrawn from `{m0, 2 - m0}` equiprobably. Uses one uniform per component.
pub fn transition_nature(j: usize, econ: &Economy, rng: &mut Stream) -> usize {
    let mut next = j;
    for (k, g) in econ.gammas().iter().enumerate() {
        let u = rng.uniform();
        if u < g / 2.0 {
            next |= 1 << k;
        } else if u < *g {
            next &= !(1 << k);
        }
    }
    next
}

/// Draw a signal in state `j`: one normal for the dividend shock, one for
/// the independent part of the consumption shock, then one per multiplier.
pub fn sample_signal(j: usize, econ: &Economy, rng: &mut Stream) -> Signal {
    let p = econ.params();
    let s = econ.sigma_d(j);
    let eps_d = rng.normal();
    let eps_c = p.rho_cd * eps_d + (1.0 - p.rho_cd * p.rho_cd).sqrt() * rng.normal();
    let mut x = Signal::with_capacity(p.kbar + 2);
    x.push(p.g_d - 0.5 * s * s + s * eps_d);
    x.push(p.g_c + p.sigma_c * eps_c);
    for k in 0..p.kbar {
        let m = econ.multiplier(j, k);
        x.push(if p.sigma_delta > 0.0 {
            m + p.sigma_delta * rng.normal()
        } else {
            m
        });
    }
    x
}

/// Log of the signal density `f_X(x | m^j)`.
pub fn log_signal_density(x: &[f64], j: usize, econ: &Economy) -> Result<f64> {
    let p = econ.params();
    if p.sigma_delta == 0.0 {
        return Err(Error::DegenerateDensity(
            "noiseless multiplier readings have no density".into(),
        ));
    }
    if x.len() != p.kbar + 2 {
        return Err(Error::invalid("signal length must be kbar + 2"));
    }
    let s = econ.sigma_d(j);
    let e = (x[0] - p.g_d + 0.5 * s * s) / s;
    let cond_sd = p.sigma_c * (1.0 - p.rho_cd * p.rho_cd).sqrt();
    let z = (x[1] - p.g_c - p.rho_cd * p.sigma_c * e) / cond_sd;
    let mut l = -2.0 * LN_SQRT_2PI - s.ln() - cond_sd.ln() - 0.5 * (e * e + z * z);
    for k in 0..p.kbar {
        let u = (x[k + 2] - econ.multiplier(j, k)) / p.sigma_delta;
        l += -LN_SQRT_2PI - p.sigma_delta.ln() - 0.5 * u * u;
    }
    Ok(l)
}

pub fn signal_density(x: &[f64], j: usize, econ: &Economy) -> Result<f64> {
    log_signal_density(x, j, econ).map(f64::exp)
}

/// Overwrite `ll` with the normalized posterior `pred_j · exp(ll_j)`.
fn posterior_in_place(pred: &[f64], ll: &mut [f64]) -> Result<()> {
    let max = ll
        .iter()
        .zip(pred)
        .filter(|(_, p)| **p > 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NumericalDegeneracy(
            "signal is impossible under every state".into(),
        ));
    }
    let mut sum = 0.0;
    for (l, p) in ll.iter_mut().zip(pred) {
        let gap = *l - max;
        // exp underflows to zero below about -745
        let w = if gap > -750.0 { p * gap.exp() } else { 0.0 };
        sum += w;
        *l = w;
    }
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::NumericalDegeneracy(
            "all belief weights underflow".into(),
        ));
    }
    let inv = 1.0 / sum;
    ll.iter_mut().for_each(|v| *v *= inv);
    Ok(())
}

#[cfg(test)]
fn posterior(pred: &[f64], ll: &[f64]) -> Result<Belief> {
    let mut out: Belief = SmallVec::from_slice(ll);
    posterior_in_place(pred, &mut out)?;
    Ok(out)
}

/// Bayes update into `out`; `out` and `prev` have length `d`.
fn update_belief_into(prev: &[f64], x: &[f64], econ: &Economy, out: &mut [f64]) -> Result<()> {
    let d = prev.len();
    let mut stack = [0.0; 16];
    let mut heap = Vec::new();
    let pred: &mut [f64] = if d <= stack.len() {
        &mut stack[..d]
    } else {
        heap.resize(d, 0.0);
        &mut heap
    };
    pred.copy_from_slice(prev);
    econ.predict_in_place(pred);
    econ.state_log_likelihoods(x, out);
    posterior_in_place(pred, out)
}

/// Bayes update `Π^j ∝ f_X(x | m^j) Σ_i a_ij Π^i_prev`, normalized in log
/// space. A noiseless signal identifies the multipliers exactly.
pub fn update_belief(prev: &[f64], x: &[f64], econ: &Economy) -> Result<Belief> {
    if prev.len() != econ.states() || x.len() != econ.params().kbar + 2 {
        return Err(Error::invalid("belief or signal has the wrong length"));
    }
    let mut out: Belief = smallvec::smallvec![0.0; prev.len()];
    update_belief_into(prev, x, econ, &mut out)?;
    Ok(out)
}

/// One period: switch nature, draw the signal, update the belief and form
/// the return.
pub fn step_economy(
    econ: &Economy,
    state: &EconomyState,
    rng: &mut Stream,
) -> Result<(EconomyState, Signal, f64)> {
    let nature = transition_nature(state.nature, econ, rng);
    let x = sample_signal(nature, econ, rng);
    let mut belief: Belief = smallvec::smallvec![0.0; state.belief.len()];
    update_belief_into(&state.belief, &x, econ, &mut belief)?;
    let r = compute_return(
        x[0],
        &belief,
        &state.belief,
        econ.coefficients(),
        econ.params(),
    );
    Ok((EconomyState { nature, belief }, x, r))
}

/// Draw nature from its uniform stationary law, start from a uniform
/// belief, and simulate `steps` periods from `rng`.
pub fn burn_in(econ: &Economy, rng: &mut Stream, steps: usize) -> Result<EconomyState> {
    let nature =
        (0..econ.params().kbar).fold(
            0usize,
            |j, k| {
                if rng.uniform() < 0.5 {
                    j | 1 << k
                } else {
                    j
                }
            },
        );
    let mut state = EconomyState {
        nature,
        belief: econ.uniform_belief(),
    };
    for _ in 0..steps {
        state = step_economy(econ, &state, rng)?.0;
    }
    Ok(state)
}

/// Default initial state for a simulated path: burn-in of
/// [`DEFAULT_BURN_IN`] periods on stream `(seed, BurnIn, 0, 0)`.
pub fn default_initial_state(econ: &Economy, seed: u64) -> Result<EconomyState> {
    burn_in(
        econ,
        &mut Stream::new(seed, Domain::BurnIn, 0, 0),
        DEFAULT_BURN_IN,
    )
}

/// A simulated path. Entry `t` describes period `t + 1`.
#[derive(Debug, Clone, Default)]
pub struct SimulatedPath {
    pub nature: Vec<usize>,
    /// Nature's price-dividend ratio `Q(M_t)`.
    pub q_nature: Vec<f64>,
    /// The agent's price-dividend ratio `Q(Π_t)`.
    pub q_belief: Vec<f64>,
    pub returns: Vec<f64>,
    /// Signals and beliefs, kept only by [`simulate_path_detailed`].
    pub signals: Vec<Signal>,
    pub beliefs: Vec<Belief>,
    pub initial: Option<EconomyState>,
    pub terminal: Option<EconomyState>,
}

fn simulate(
    econ: &Economy,
    t: usize,
    seed: u64,
    s0: Option<EconomyState>,
    detailed: bool,
) -> Result<SimulatedPath> {
    if t == 0 {
        return Err(Error::invalid("path length must be at least 1"));
    }
    let mut state = match s0 {
        Some(s) => {
            if s.nature >= econ.states() || s.belief.len() != econ.states() {
                return Err(Error::invalid("initial state does not match the economy"));
            }
            s
        }
        None => default_initial_state(econ, seed)?,
    };
    let coeffs = econ.coefficients();
    let mut path = SimulatedPath {
        nature: Vec::with_capacity(t),
        q_nature: Vec::with_capacity(t),
        q_belief: Vec::with_capacity(t),
        returns: Vec::with_capacity(t),
        initial: Some(state.clone()),
        ..Default::default()
    };
    for step in 1..=t {
        let mut rng = Stream::new(seed, Domain::Simulate, step as u64, 0);
        let (next, x, r) = step_economy(econ, &state, &mut rng)?;
        path.nature.push(next.nature);
        path.q_nature.push(coeffs[next.nature]);
        path.q_belief.push(price_dividend(&next.belief, coeffs));
        path.returns.push(r);
        if detailed {
            path.signals.push(x);
            path.beliefs.push(next.belief.clone());
        }
        state = next;
    }
    path.terminal = Some(state);
    Ok(path)
}

/// Simulate `t` periods. Period `t` draws from stream
/// `(seed, Simulate, t, 0)`; without `s0` the path starts from
/// [`default_initial_state`].
pub fn simulate_path(
    econ: &Economy,
    t: usize,
    seed: u64,
    s0: Option<EconomyState>,
) -> Result<SimulatedPath> {
    simulate(econ, t, seed, s0, false)
}

/// [`simulate_path`] that also records every signal and belief.
pub fn simulate_path_detailed(
    econ: &Economy,
    t: usize,
    seed: u64,
    s0: Option<EconomyState>,
) -> Result<SimulatedPath> {
    simulate(econ, t, seed, s0, true)
}

/// The learning economy as a filtering model: the state is `(M_t, Π_t)` and
/// the observation is the return.
#[derive(Debug, Clone)]
pub struct LearningModel {
    pub economy: Economy,
    /// Burn-in length of each prior draw.
    pub burn_in: usize,
}

impl LearningModel {
    pub fn new(economy: Economy) -> Self {
        Self {
            economy,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

/// Adapter of the economy for the SOS filter.
pub fn as_state_model(economy: Economy) -> LearningModel {
    LearningModel::new(economy)
}

impl StateModel for LearningModel {
    type State = EconomyState;

    fn obs_dim(&self) -> usize {
        1
    }

    fn sample_prior(&self, rng: &mut Stream) -> Result<EconomyState> {
        burn_in(&self.economy, rng, self.burn_in)
    }

    fn sample_transition(
        &self,
        prev: &EconomyState,
        _history: &History<'_>,
        rng: &mut Stream,
        obs: &mut [f64],
    ) -> Result<EconomyState> {
        let (next, _, r) = step_economy(&self.economy, prev, rng)?;
        obs[0] = r;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn econ(kbar: usize, sigma_delta: f64) -> Economy {
        let mut p = StructuralParams::daily_calibration(kbar);
        p.sigma_delta = sigma_delta;
        Economy::calibrated(p).unwrap()
    }

    #[test]
    fn single_component_transition_matrix() {
        let mut p = StructuralParams::daily_calibration(1);
        p.gamma_kbar = 0.06;
        let a = transition_matrix(&p);
        assert!((a[(0, 0)] - 0.97).abs() < 1e-15);
        assert!((a[(0, 1)] - 0.03).abs() < 1e-15);
        assert!((a[(1, 0)] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn switching_probabilities() {
        let g = StructuralParams::daily_calibration(3).gammas();
        assert!((g[0] - (1.0 - 0.94f64.powf(0.25))).abs() < 1e-14);
        assert!((g[0] - 0.015_345).abs() < 1e-5);
        assert!((g[1] - 0.030_464).abs() < 1e-6);
        assert!((g[2] - 0.06).abs() < 1e-14);
    }

    #[test]
    fn transition_rows_sum_to_one_and_symmetric() {
        let a = transition_matrix(&StructuralParams::daily_calibration(4));
        for i in 0..16 {
            assert!((a.row(i).sum() - 1.0).abs() < 1e-12);
            for j in 0..16 {
                assert_eq!(a[(i, j)], a[(j, i)]);
            }
        }
    }

    #[test]
    fn fast_prediction_matches_matrix() {
        let e = econ(3, 1.0);
        let a = transition_matrix(e.params());
        let prev = [0.3, 0.05, 0.1, 0.15, 0.02, 0.08, 0.2, 0.1];
        let fast = e.predict(&prev);
        let slow = a.transpose() * DVector::from_row_slice(&prev);
        for j in 0..8 {
            assert!((fast[j] - slow[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn high_state_dividend_volatility() {
        let p = StructuralParams::daily_calibration(3);
        assert!((p.sigma_d(7) - 0.007 * 1.7f64.powf(1.5)).abs() < 1e-15);
        assert!((p.sigma_d(7) - 0.015_516).abs() < 1e-6);
    }

    #[test]
    fn noiseless_signal_reveals_multipliers() {
        let e = econ(3, 0.0);
        let mut rng = Stream::new(1, Domain::Test, 0, 0);
        let x = sample_signal(5, &e, &mut rng);
        assert_eq!(&x[2..], &[1.7, 2.0 - 1.7, 1.7]);
        let b = update_belief(&e.uniform_belief(), &x, &e).unwrap();
        assert_eq!(b[5], 1.0);
        assert!(matches!(
            signal_density(&x, 5, &e),
            Err(Error::DegenerateDensity(_))
        ));
    }

    #[test]
    fn two_state_bayes_arithmetic() {
        let pred = [0.5 * 0.97 + 0.5 * 0.03, 0.5];
        let b = posterior(&pred, &[2.0f64.ln(), 0.5f64.ln()]).unwrap();
        assert!((b[0] - 0.8).abs() < 1e-15);
        assert!((b[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn density_factorizes_without_correlation() {
        let mut p = StructuralParams::daily_calibration(1);
        p.rho_cd = 0.0;
        p.g_d = 0.000_03;
        let e = Economy::new(p.clone()).unwrap();
        let x = [0.003, -0.001, 1.2];
        let norm = |v: f64, m: f64, s: f64| {
            (-0.5 * ((v - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let s = e.sigma_d(1);
        let hand = norm(x[0], p.g_d - s * s / 2.0, s)
            * norm(x[1], p.g_c, p.sigma_c)
            * norm(x[2], 1.7, 1.0);
        let f = signal_density(&x, 1, &e).unwrap();
        assert!((f - hand).abs() < 1e-10 * hand);
    }

    #[test]
    fn uninformative_signal_is_pure_prediction() {
        let e = econ(2, 1e6);
        let prev = [0.4, 0.1, 0.3, 0.2];
        let mut p = e.params().clone();
        p.m0 = 1.0;
        // with m0 = 1 all states share the same density
        let flat = Economy::new(p).unwrap();
        let post = update_belief(&prev, &[0.0, 0.0, 1.0, 1.0], &flat).unwrap();
        let pred = flat.predict(&prev);
        for j in 0..4 {
            assert!((post[j] - pred[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn geometric_series_for_one_state() {
        let mut p = StructuralParams::daily_calibration(1);
        p.m0 = 1.0;
        p.alpha = 30.0;
        let q = pd_coefficients(&p).unwrap();
        let beta = (p.g_d - p.r_f - 30.0 * p.rho_cd * p.sigma_c * p.sigma_d_bar).exp();
        // both states are identical so the chain collapses to one state
        assert!((q[0] - beta / (1.0 - beta)).abs() < 1e-8 * q[0]);
    }

    #[test]
    fn coefficients_match_truncated_series() {
        let mut p = StructuralParams::daily_calibration(1);
        p.gamma_kbar = 0.5;
        p.alpha = 0.0;
        p.g_d = -0.2;
        let q = pd_coefficients(&p).unwrap();
        let a = transition_matrix(&p);
        let b = DMatrix::from_fn(2, 2, |i, j| a[(i, j)] * (p.g_d - p.r_f).exp());
        let mut term = DVector::from_element(2, 1.0);
        let mut sum = DVector::zeros(2);
        for _ in 0..200 {
            term = &b * term;
            sum += &term;
        }
        assert!((q[0] - sum[0]).abs() < 1e-10 && (q[1] - sum[1]).abs() < 1e-10);
    }

    #[test]
    fn divergent_prices_detected() {
        let mut p = StructuralParams::daily_calibration(2);
        p.alpha = 0.0;
        assert!(matches!(
            pd_coefficients(&p),
            Err(Error::DivergentPrice { .. })
        ));
    }

    #[test]
    fn calibrated_mean_coefficient() {
        let e = econ(3, 1.0);
        let q = e.coefficients();
        assert!((mean(q) - 6000.0).abs() / 6000.0 < 1e-6);
        let uniform = e.uniform_belief();
        assert!((price_dividend(&uniform, q) - 6000.0).abs() / 6000.0 < 1e-6);
        // higher volatility states are cheaper
        assert!(q[0] > q[7]);
    }

    #[test]
    fn mean_coefficient_decreasing_in_alpha() {
        let p = StructuralParams::daily_calibration(3);
        let alpha = solve_alpha(&p, 6000.0).unwrap();
        let a = transition_matrix(&p);
        let means: Vec<f64> = (0..20)
            .map(|i| mean(&coefficients_at(&p, &a, alpha * (0.8 + 0.02 * i as f64)).unwrap()))
            .collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn infeasible_target_reported() {
        let p = StructuralParams::daily_calibration(2);
        assert!(matches!(
            solve_alpha(&p, 1e-3),
            Err(Error::CalibrationInfeasible(_))
        ));
    }

    #[test]
    fn static_belief_return_identity() {
        let e = econ(2, 1.0);
        let b = e.uniform_belief();
        let r = compute_return(0.001, &b, &b, e.coefficients(), e.params());
        let q = price_dividend(&b, e.coefficients());
        assert!((r - ((1.0 + 1.0 / q).ln() + 0.001 - e.params().r_f)).abs() < 1e-15);
    }

    #[test]
    fn adapter_reproduces_simulation_step() {
        let e = econ(3, 1.0);
        let model = as_state_model(e.clone());
        let s0 = default_initial_state(&e, 3).unwrap();
        let path = simulate_path(&e, 1, 3, Some(s0.clone())).unwrap();
        let mut obs = [0.0];
        let mut rng = Stream::new(3, Domain::Simulate, 1, 0);
        let s1 = model
            .sample_transition(&s0, &History::new(&[], 1), &mut rng, &mut obs)
            .unwrap();
        assert_eq!(obs[0], path.returns[0]);
        assert_eq!(Some(s1), path.terminal);
    }

    #[test]
    fn simulation_is_deterministic() {
        let e = econ(2, 0.5);
        let a = simulate_path(&e, 200, 17, None).unwrap();
        let b = simulate_path(&e, 200, 17, None).unwrap();
        assert_eq!(a.returns, b.returns);
        assert!(a.returns.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn long_run_mean_return() {
        let e = econ(3, 1.0);
        let p = e.params();
        let approx = (1.0 + 1.0 / p.q_bar).ln() + p.g_d - p.r_f - p.sigma_d_bar * p.sigma_d_bar;
        let r = simulate_path(&e, 400_000, 5, None).unwrap().returns;
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        assert!(
            ((mean - approx) / approx).abs() < 0.25,
            "{mean} vs {approx}"
        );
    }
}
