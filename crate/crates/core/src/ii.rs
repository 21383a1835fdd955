//! Indirect inference with the full-information economy as auxiliary model,
//! the score-based EMM variant, a simulated method of moments benchmark and
//! the HAC pieces of the asymptotic covariance.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::economy::{simulate_path, Economy, StructuralParams};
use crate::error::{Error, Result};
use crate::fi::{fi_loglik_at, fi_mle, fi_score, logistic, logit, FiMleOptions, FiParams};
use crate::numeric::{lower_median, nelder_mead, quantile, NelderMeadOptions};

/// Skewness statistic paired with the FI estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxKind {
    Median,
    ThirdMoment,
}

impl FromStr for AuxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Self::Median),
            "third-moment" => Ok(Self::ThirdMoment),
            _ => Err(Error::invalid(format!("unknown auxiliary statistic `{s}`"))),
        }
    }
}

impl AuxKind {
    /// `η̂`: the lower median or `T⁻¹ Σ r³`.
    pub fn statistic(self, returns: &[f64]) -> f64 {
        match self {
            Self::Median => lower_median(returns),
            Self::ThirdMoment => {
                returns.iter().map(|r| r * r * r).sum::<f64>() / returns.len() as f64
            }
        }
    }

    /// Per-observation estimating function of `η`.
    pub fn estimating_fn(self, r: f64, eta: f64) -> f64 {
        match self {
            Self::Median => {
                if r > eta {
                    1.0
                } else if r < eta {
                    -1.0
                } else {
                    0.0
                }
            }
            Self::ThirdMoment => r * r * r - eta,
        }
    }
}

/// Number of identified FI coordinates: `b` drops out when `kbar = 1`.
pub fn phi_dim(kbar: usize) -> usize {
    if kbar == 1 {
        2
    } else {
        3
    }
}

/// `μ̂ = (φ̂, η̂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryEstimate {
    pub phi: FiParams,
    pub eta: f64,
    pub kind: AuxKind,
    pub loglik: f64,
}

impl AuxiliaryEstimate {
    /// The vector form used by the objectives: `φ` in unconstrained
    /// coordinates (identified ones only) followed by `η`.
    pub fn to_vec(&self, kbar: usize) -> Result<Vec<f64>> {
        let x = self.phi.to_unconstrained()?;
        let mut v = x[..phi_dim(kbar)].to_vec();
        v.push(self.eta);
        Ok(v)
    }
}

/// Minimum sample length for the auxiliary estimator.
pub const MIN_SAMPLE: usize = 100;

pub fn auxiliary_estimator(
    returns: &[f64],
    base: &StructuralParams,
    kind: AuxKind,
    start: Option<FiParams>,
    opts: &FiMleOptions,
) -> Result<AuxiliaryEstimate> {
    if returns.len() < MIN_SAMPLE {
        return Err(Error::InsufficientSample(format!(
            "auxiliary estimation needs at least {MIN_SAMPLE} observations, got {}",
            returns.len()
        )));
    }
    let mle = fi_mle(returns, base, start, opts)?;
    Ok(AuxiliaryEstimate {
        phi: mle.phi,
        eta: kind.statistic(returns),
        kind,
        loglik: mle.loglik,
    })
}

/// The structural block estimated by indirect inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaFree {
    pub m0: f64,
    pub gamma_kbar: f64,
    pub b: f64,
    pub sigma_delta: f64,
}

impl ThetaFree {
    pub fn of(p: &StructuralParams) -> Self {
        Self {
            m0: p.m0,
            gamma_kbar: p.gamma_kbar,
            b: p.b,
            sigma_delta: p.sigma_delta,
        }
    }

    pub fn apply(&self, p: &StructuralParams) -> StructuralParams {
        StructuralParams {
            m0: self.m0,
            gamma_kbar: self.gamma_kbar,
            b: self.b,
            sigma_delta: self.sigma_delta,
            ..p.clone()
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.m0, self.gamma_kbar, self.b, self.sigma_delta]
    }

    /// `(logit(m0 - 1), logit(γ), ln(b - 1), ln σ_δ)`, without `b` when
    /// `kbar = 1`.
    pub fn to_unconstrained(&self, kbar: usize) -> Result<Vec<f64>> {
        let mut x = vec![logit(self.m0 - 1.0), logit(self.gamma_kbar)];
        if kbar > 1 {
            x.push((self.b - 1.0).ln());
        }
        x.push(self.sigma_delta.ln());
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::invalid(format!(
                "{self:?} is on the boundary of the parameter space"
            )))
        }
    }

    /// Inverse of [`ThetaFree::to_unconstrained`]; `b` is taken from
    /// `template` when `kbar = 1`.
    pub fn from_unconstrained(x: &[f64], kbar: usize, template: &ThetaFree) -> Self {
        let (b, last) = if kbar > 1 {
            (1.0 + x[2].exp(), x[3])
        } else {
            (template.b, x[2])
        };
        Self {
            m0: 1.0 + logistic(x[0]),
            gamma_kbar: logistic(x[1]),
            b,
            sigma_delta: last.exp(),
        }
    }

    /// Diagonal of `∂θ/∂x` for the identified coordinates.
    pub fn jacobian_diag(&self, kbar: usize) -> Vec<f64> {
        let mut g = vec![
            (self.m0 - 1.0) * (2.0 - self.m0),
            self.gamma_kbar * (1.0 - self.gamma_kbar),
        ];
        if kbar > 1 {
            g.push(self.b - 1.0);
        }
        g.push(self.sigma_delta);
        g
    }
}

/// Simulated auxiliary estimate `μ̂_ST(θ)` from one learning-economy path of
/// length `s·t`. The same `seed` across `θ` gives common random numbers.
pub fn binding_function_sim(
    theta: &StructuralParams,
    s: usize,
    t: usize,
    seed: u64,
    kind: AuxKind,
    start: Option<FiParams>,
    opts: &FiMleOptions,
) -> Result<AuxiliaryEstimate> {
    if s == 0 {
        return Err(Error::invalid("simulation size S must be at least 1"));
    }
    let returns = simulate_returns(theta, s * t, seed)?;
    auxiliary_estimator(&returns, theta, kind, start, opts)
}

fn simulate_returns(theta: &StructuralParams, len: usize, seed: u64) -> Result<Vec<f64>> {
    let econ = Economy::calibrated(theta.clone())?;
    Ok(simulate_path(&econ, len, seed, None)?.returns)
}

/// `vᵀ Ω v`; fails when `Ω` is not positive definite.
pub fn quadratic_form(v: &[f64], omega: &DMatrix<f64>) -> Result<f64> {
    if omega.nrows() != v.len() || omega.ncols() != v.len() {
        return Err(Error::invalid(format!(
            "weighting matrix is {}x{}, discrepancy has length {}",
            omega.nrows(),
            omega.ncols(),
            v.len()
        )));
    }
    let chol = omega
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("weighting matrix is not positive definite"))?;
    let y = chol.l().transpose() * DVector::from_column_slice(v);
    Ok(y.norm_squared())
}

/// `[μ̂_ST(θ) - μ̂_T]ᵀ Ω [μ̂_ST(θ) - μ̂_T]`.
#[allow(clippy::too_many_arguments)]
pub fn ii_objective(
    theta: &StructuralParams,
    mu_hat: &AuxiliaryEstimate,
    s: usize,
    t: usize,
    omega: &DMatrix<f64>,
    seed: u64,
    opts: &FiMleOptions,
) -> Result<f64> {
    let sim = binding_function_sim(theta, s, t, seed, mu_hat.kind, Some(mu_hat.phi), opts)?;
    let target = mu_hat.to_vec(theta.kbar)?;
    let diff: Vec<f64> = sim
        .to_vec(theta.kbar)?
        .iter()
        .zip(&target)
        .map(|(a, b)| a - b)
        .collect();
    quadratic_form(&diff, omega)
}

/// Per-observation estimating functions `ψ_t` at `μ`: the FI scores in
/// unconstrained coordinates followed by the `η` function. `T × p`.
pub fn auxiliary_scores(
    returns: &[f64],
    base: &StructuralParams,
    mu: &AuxiliaryEstimate,
) -> Result<DMatrix<f64>> {
    let q = phi_dim(base.kbar);
    let score = fi_score(returns, base, &mu.phi, crate::fi::SCORE_STEP)?;
    let mut psi = DMatrix::zeros(returns.len(), q + 1);
    psi.columns_mut(0, q).copy_from(&score.columns(0, q));
    for (t, &r) in returns.iter().enumerate() {
        psi[(t, q)] = mu.kind.estimating_fn(r, mu.eta);
    }
    Ok(psi)
}

/// `scoreᵀ W score` with `score` the mean of `ψ(r̃_t; μ̂_T)` along a path
/// simulated at `θ`.
pub fn emm_objective(
    theta: &StructuralParams,
    mu_hat: &AuxiliaryEstimate,
    s: usize,
    t: usize,
    w: &DMatrix<f64>,
    seed: u64,
) -> Result<f64> {
    if s == 0 {
        return Err(Error::invalid("simulation size S must be at least 1"));
    }
    quadratic_form(&simulated_mean_score(theta, mu_hat, s * t, seed)?, w)
}

/// Mean of `ψ(r̃_t; μ)` along a path of length `len` simulated at `θ`.
pub fn simulated_mean_score(
    theta: &StructuralParams,
    mu: &AuxiliaryEstimate,
    len: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let returns = simulate_returns(theta, len, seed)?;
    let psi = auxiliary_scores(&returns, theta, mu)?;
    Ok(psi.column_iter().map(|c| c.mean()).collect())
}

/// Default number of lags in [`newey_west`].
pub const NW_LAGS: usize = 10;

/// Uncentered Newey-West long-run second moment of the rows of `psi`.
pub fn newey_west(psi: &DMatrix<f64>, tau: usize) -> Result<DMatrix<f64>> {
    let t = psi.nrows();
    if tau >= t {
        return Err(Error::invalid(format!(
            "lag count {tau} must be below the sample length {t}"
        )));
    }
    let inv_t = 1.0 / t as f64;
    let mut out = psi.transpose() * psi * inv_t;
    for v in 1..=tau {
        let lead = psi.rows(v, t - v);
        let lag = psi.rows(0, t - v);
        let gamma = lead.transpose() * lag * inv_t;
        let w = 1.0 - v as f64 / (tau as f64 + 1.0);
        out += (&gamma + gamma.transpose()) * w;
    }
    Ok(out)
}

/// Gaussian kernel density estimate at `x` with Silverman's bandwidth.
fn density_at(xs: &[f64], x: f64) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile(xs, 0.75) - quantile(xs, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    let c = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    c * xs
        .iter()
        .map(|v| (-0.5 * ((x - v) / h).powi(2)).exp())
        .sum::<f64>()
}

/// Second-difference step for the auxiliary Hessian.
const HESSIAN_STEP: f64 = 1e-3;

/// Pieces of `W* = J⁻¹ I₀ J⁻¹` for the auxiliary estimator, in the vector
/// coordinates of [`AuxiliaryEstimate::to_vec`].
#[derive(Debug, Clone)]
pub struct AuxiliaryCovariance {
    pub i0: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub w_star: DMatrix<f64>,
}

pub fn auxiliary_covariance(
    returns: &[f64],
    base: &StructuralParams,
    mu: &AuxiliaryEstimate,
    tau: usize,
) -> Result<AuxiliaryCovariance> {
    let q = phi_dim(base.kbar);
    let p = q + 1;
    let psi = auxiliary_scores(returns, base, mu)?;
    let i0 = newey_west(&psi, tau)?;

    let x0 = mu.phi.to_unconstrained()?;
    let t = returns.len() as f64;
    let ll = |dx: &[(usize, f64)]| {
        let mut x = x0;
        for &(k, d) in dx {
            x[k] += d;
        }
        fi_loglik_at(returns, base, &FiParams::from_unconstrained(&x)) / t
    };
    let h = HESSIAN_STEP;
    let f0 = ll(&[]);
    let mut j = DMatrix::zeros(p, p);
    for a in 0..q {
        let second = (ll(&[(a, h)]) - 2.0 * f0 + ll(&[(a, -h)])) / (h * h);
        j[(a, a)] = -second;
        for b in 0..a {
            let cross = (ll(&[(a, h), (b, h)]) - ll(&[(a, h), (b, -h)]) - ll(&[(a, -h), (b, h)])
                + ll(&[(a, -h), (b, -h)]))
                / (4.0 * h * h);
            j[(a, b)] = -cross;
            j[(b, a)] = -cross;
        }
    }
    j[(q, q)] = match mu.kind {
        AuxKind::Median => 2.0 * density_at(returns, mu.eta),
        AuxKind::ThirdMoment => 1.0,
    };
    if !j.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalDegeneracy(
            "auxiliary Hessian is not finite".into(),
        ));
    }
    let j_inv = j
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NumericalDegeneracy("auxiliary Hessian is singular".into()))?;
    let w_star = &j_inv * &i0 * j_inv.transpose();
    Ok(AuxiliaryCovariance { i0, j, w_star })
}

/// `(1 + 1/S)/T · (DᵀΩD)⁻¹ DᵀΩ W* ΩD (DᵀΩD)⁻¹`, which is `D⁻¹ W* D⁻ᵀ`
/// scaled when `D` is square.
pub fn ii_covariance(
    d: &DMatrix<f64>,
    w_star: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    s: usize,
    t: usize,
) -> Result<DMatrix<f64>> {
    let dto = d.transpose() * omega;
    let bread = (&dto * d).try_inverse().ok_or_else(|| {
        Error::NumericalDegeneracy("binding-function Jacobian is singular".into())
    })?;
    let meat = &dto * w_star * dto.transpose();
    let scale = (1.0 + 1.0 / s as f64) / t as f64;
    let cov = &bread * meat * bread.transpose() * scale;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Weighting used by the distance estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Identity,
    /// `diag(1 / Var)` of the data statistics.
    #[default]
    InverseVariance,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "inverse-variance" => Ok(Self::InverseVariance),
            _ => Err(Error::invalid(format!("unknown weighting `{s}`"))),
        }
    }
}

/// How the II objective is minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IiMethod {
    /// Re-estimate the auxiliary model on every simulated path.
    Distance,
    /// Drive the simulated auxiliary score at `μ̂_T` to zero.
    #[default]
    Emm,
}

impl FromStr for IiMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(Self::Distance),
            "emm" => Ok(Self::Emm),
            _ => Err(Error::invalid(format!("unknown II method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IiOptions {
    pub method: IiMethod,
    pub s: usize,
    pub kind: AuxKind,
    pub weighting: Weighting,
    /// Overrides `weighting` when set.
    pub omega: Option<DMatrix<f64>>,
    pub max_evals: usize,
    pub seed: u64,
    pub tau: usize,
    /// Relative central-difference step for the binding-function Jacobian.
    pub jacobian_step: f64,
    pub start: Option<ThetaFree>,
    /// The search runs once from the start with `σ_δ` replaced by each of
    /// these values and keeps the lowest objective; empty means the start
    /// alone.
    pub sigma_delta_starts: Vec<f64>,
    /// Options for the data-side FI estimate.
    pub mle: FiMleOptions,
    /// Inner FI iterations for each simulated estimate.
    pub inner_max_evals: usize,
    /// Objective level below which the fit is considered exact.
    pub objective_floor: f64,
}

impl Default for IiOptions {
    fn default() -> Self {
        Self {
            method: IiMethod::Emm,
            s: 20,
            kind: AuxKind::Median,
            weighting: Weighting::InverseVariance,
            omega: None,
            max_evals: 300,
            seed: 0,
            tau: NW_LAGS,
            jacobian_step: 0.1,
            start: None,
            sigma_delta_starts: vec![0.5, 1.0, 2.0],
            mle: FiMleOptions::default(),
            inner_max_evals: 600,
            objective_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IiDiagnostics {
    pub evaluations: usize,
    pub converged: bool,
    pub floor_reached: bool,
    pub objective_at_start: f64,
    pub start: ThetaFree,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IiResult {
    pub theta_hat: ThetaFree,
    /// Value of the minimized objective (the EMM objective for
    /// [`IiMethod::Emm`]).
    pub objective_value: f64,
    /// Covariance of the identified coordinates of `(m0, γ_kbar, b, σ_δ)`.
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: ThetaFree,
    /// Data statistics the fit targets.
    pub target: Vec<f64>,
    /// Simulated statistics at the estimate.
    pub fitted: Vec<f64>,
    pub diagnostics: IiDiagnostics,
}

/// Shared minimum-distance machinery for II and SMM.
struct Distance<'a, F> {
    base: &'a StructuralParams,
    target: Vec<f64>,
    omega: DMatrix<f64>,
    stat: F,
}

impl<F> Distance<'_, F>
where
    F: Fn(&StructuralParams) -> Result<Vec<f64>>,
{
    fn discrepancy(&self, theta: &ThetaFree) -> Result<Vec<f64>> {
        let sim = (self.stat)(&theta.apply(self.base))?;
        Ok(sim.iter().zip(&self.target).map(|(a, b)| a - b).collect())
    }

    fn objective(&self, theta: &ThetaFree) -> f64 {
        self.discrepancy(theta)
            .and_then(|d| quadratic_form(&d, &self.omega))
            .unwrap_or(f64::INFINITY)
    }

    fn minimize(
        &self,
        start: &ThetaFree,
        opts: &IiOptions,
    ) -> Result<(ThetaFree, f64, IiDiagnostics)> {
        let kbar = self.base.kbar;
        let x0 = start.to_unconstrained(kbar)?;
        let objective_at_start = self.objective(start);
        let mut nm = NelderMeadOptions::new(x0.len(), 0.25);
        nm.max_evals = opts.max_evals;
        nm.f_tol = opts.objective_floor * 1e-2;
        nm.x_tol = 1e-5;
        let res = nelder_mead(
            |x| self.objective(&ThetaFree::from_unconstrained(x, kbar, start)),
            &x0,
            &nm,
        );
        let theta = ThetaFree::from_unconstrained(&res.x, kbar, start);
        if !res.value.is_finite() {
            return Err(Error::NonConvergence {
                evaluations: res.evaluations,
                best_value: res.value,
                best_point: theta.as_array().to_vec(),
            });
        }
        let floor_reached = res.value <= opts.objective_floor;
        if !floor_reached {
            log::warn!(
                "distance objective floor {} not reached: attained {}",
                opts.objective_floor,
                res.value
            );
        }
        Ok((
            theta,
            res.value,
            IiDiagnostics {
                evaluations: res.evaluations,
                converged: res.converged,
                floor_reached,
                objective_at_start,
                start: *start,
            },
        ))
    }

    fn minimize_multi(
        &self,
        start: &ThetaFree,
        opts: &IiOptions,
    ) -> Result<(ThetaFree, f64, IiDiagnostics)> {
        let starts: Vec<ThetaFree> = if opts.sigma_delta_starts.is_empty() {
            vec![*start]
        } else {
            opts.sigma_delta_starts
                .iter()
                .map(|&sigma_delta| ThetaFree {
                    sigma_delta,
                    ..*start
                })
                .collect()
        };
        let mut best: Option<(ThetaFree, f64, IiDiagnostics)> = None;
        let mut evaluations = 0;
        let mut last_err = None;
        for s in &starts {
            match self.minimize(s, opts) {
                Ok(fit) => {
                    evaluations += fit.2.evaluations;
                    if best.as_ref().is_none_or(|b| fit.1 < b.1) {
                        best = Some(fit);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        match best {
            Some((theta, value, mut diag)) => {
                diag.evaluations = evaluations;
                Ok((theta, value, diag))
            }
            None => Err(last_err.expect("at least one start")),
        }
    }

    /// `∂stat/∂x` at `theta` by central differences in unconstrained
    /// coordinates.
    fn jacobian(&self, theta: &ThetaFree, rel_step: f64) -> Result<DMatrix<f64>> {
        let kbar = self.base.kbar;
        let x0 = theta.to_unconstrained(kbar)?;
        let mut d = DMatrix::zeros(self.target.len(), x0.len());
        for k in 0..x0.len() {
            let h = rel_step * x0[k].abs().max(1.0);
            let eval = |sign: f64| {
                let mut x = x0.clone();
                x[k] += sign * h;
                (self.stat)(&ThetaFree::from_unconstrained(&x, kbar, theta).apply(self.base))
            };
            let (up, down) = (eval(1.0)?, eval(-1.0)?);
            for (i, (u, l)) in up.iter().zip(&down).enumerate() {
                d[(i, k)] = (u - l) / (2.0 * h);
            }
        }
        Ok(d)
    }

    /// Covariance in natural coordinates by the delta method.
    fn covariance(
        &self,
        theta: &ThetaFree,
        w_star: &DMatrix<f64>,
        s: usize,
        t: usize,
        rel_step: f64,
    ) -> Result<(Vec<Vec<f64>>, ThetaFree)> {
        let d = self.jacobian(theta, rel_step)?;
        let cov_x = ii_covariance(&d, w_star, &self.omega, s, t)?;
        let g = DMatrix::from_diagonal(&DVector::from_vec(theta.jacobian_diag(self.base.kbar)));
        let cov = &g * cov_x * &g;
        let se: Vec<f64> = cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
        let std_errors = if self.base.kbar > 1 {
            ThetaFree {
                m0: se[0],
                gamma_kbar: se[1],
                b: se[2],
                sigma_delta: se[3],
            }
        } else {
            ThetaFree {
                m0: se[0],
                gamma_kbar: se[1],
                b: 0.0,
                sigma_delta: se[2],
            }
        };
        let rows = cov
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        Ok((rows, std_errors))
    }
}

fn weighting_matrix(opts: &IiOptions, w_star: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(omega) = &opts.omega {
        return Ok(omega.clone());
    }
    let p = w_star.nrows();
    match opts.weighting {
        Weighting::Identity => Ok(DMatrix::identity(p, p)),
        Weighting::InverseVariance => {
            let diag = w_star.diagonal();
            if diag.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::NumericalDegeneracy(
                    "auxiliary variance has a non-positive diagonal entry".into(),
                ));
            }
            Ok(DMatrix::from_diagonal(&diag.map(|v| 1.0 / v)))
        }
    }
}

/// Indirect inference estimate of `(m0, γ_kbar, b, σ_δ)` given the
/// calibrated block of `base`. Either method reports the covariance built
/// from the binding-function Jacobian at the estimate.
pub fn estimate_ii(returns: &[f64], base: &StructuralParams, opts: &IiOptions) -> Result<IiResult> {
    let kbar = base.kbar;
    let t = returns.len();
    let mu_hat = auxiliary_estimator(returns, base, opts.kind, None, &opts.mle)?;
    let aux = auxiliary_covariance(returns, base, &mu_hat, opts.tau)?;
    let omega = weighting_matrix(opts, &aux.w_star)?;
    let inner = FiMleOptions {
        starts: 1,
        max_evals: opts.inner_max_evals,
        ..opts.mle.clone()
    };
    let dist = Distance {
        base,
        target: mu_hat.to_vec(kbar)?,
        omega,
        stat: |theta: &StructuralParams| {
            binding_function_sim(
                theta,
                opts.s,
                t,
                opts.seed,
                opts.kind,
                Some(mu_hat.phi),
                &inner,
            )?
            .to_vec(kbar)
        },
    };
    let start = opts.start.unwrap_or(ThetaFree {
        m0: mu_hat.phi.m0,
        gamma_kbar: mu_hat.phi.gamma_kbar,
        b: mu_hat.phi.b,
        sigma_delta: 1.0,
    });
    let (theta_hat, value, diagnostics) = match opts.method {
        IiMethod::Distance => dist.minimize_multi(&start, opts)?,
        IiMethod::Emm => {
            let emm = Distance {
                base,
                target: vec![0.0; aux.i0.nrows()],
                omega: weighting_matrix(opts, &aux.i0)?,
                stat: |theta: &StructuralParams| {
                    simulated_mean_score(theta, &mu_hat, opts.s * t, opts.seed)
                },
            };
            emm.minimize_multi(&start, opts)?
        }
    };
    let (covariance, std_errors) =
        dist.covariance(&theta_hat, &aux.w_star, opts.s, t, opts.jacobian_step)?;
    let fitted = (dist.stat)(&theta_hat.apply(base))?;
    Ok(IiResult {
        theta_hat,
        objective_value: value,
        covariance,
        std_errors,
        target: dist.target.clone(),
        fitted,
        diagnostics,
    })
}

/// Per-observation contributions to `(E r², E r³, E r⁴, E r_{t-1} r_t²)`;
/// the lag term starts at the second observation. `(T - 1) × 4`.
fn moment_contributions(returns: &[f64]) -> DMatrix<f64> {
    let t = returns.len();
    DMatrix::from_fn(t - 1, 4, |i, k| {
        let r = returns[i + 1];
        match k {
            0 => r * r,
            1 => r * r * r,
            2 => r * r * r * r,
            _ => returns[i] * r * r,
        }
    })
}

/// `(E r², E r³, E r⁴, E r_{t-1} r_t²)`, each averaged over the available
/// terms.
pub fn smm_moments(returns: &[f64]) -> Result<[f64; 4]> {
    if returns.len() < 2 {
        return Err(Error::InsufficientSample(
            "moments need at least two observations".into(),
        ));
    }
    let n = returns.len() as f64;
    let mean = |f: &dyn Fn(f64) -> f64| returns.iter().map(|&r| f(r)).sum::<f64>() / n;
    let lag = returns.windows(2).map(|w| w[0] * w[1] * w[1]).sum::<f64>() / (n - 1.0);
    Ok([
        mean(&|r| r * r),
        mean(&|r| r * r * r),
        mean(&|r| r.powi(4)),
        lag,
    ])
}

/// Simulated method of moments on [`smm_moments`]. Weighting and covariance
/// use the centered Newey-West matrix of the data moment contributions.
pub fn smm_estimator(
    returns: &[f64],
    base: &StructuralParams,
    opts: &IiOptions,
) -> Result<IiResult> {
    if returns.len() < MIN_SAMPLE {
        return Err(Error::InsufficientSample(format!(
            "SMM needs at least {MIN_SAMPLE} observations, got {}",
            returns.len()
        )));
    }
    if opts.s == 0 {
        return Err(Error::invalid("simulation size S must be at least 1"));
    }
    let t = returns.len();
    let target = smm_moments(returns)?.to_vec();
    let mut contrib = moment_contributions(returns);
    for mut col in contrib.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let v = newey_west(&contrib, opts.tau)?;
    let omega = weighting_matrix(opts, &v)?;
    let dist = Distance {
        base,
        target,
        omega,
        stat: |theta: &StructuralParams| {
            Ok(smm_moments(&simulate_returns(theta, opts.s * t, opts.seed)?)?.to_vec())
        },
    };
    let start = opts.start.unwrap_or(ThetaFree {
        m0: 1.5,
        gamma_kbar: 0.1,
        b: 3.0,
        sigma_delta: 1.0,
    });
    let (theta_hat, value, diagnostics) = dist.minimize_multi(&start, opts)?;
    let (covariance, std_errors) =
        dist.covariance(&theta_hat, &v, opts.s, t, opts.jacobian_step)?;
    let fitted = (dist.stat)(&theta_hat.apply(base))?;
    Ok(IiResult {
        theta_hat,
        objective_value: value,
        covariance,
        std_errors,
        target: dist.target.clone(),
        fitted,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, Stream};

    #[test]
    fn statistics_of_small_sample() {
        let r = [1.0, 2.0, 3.0];
        assert_eq!(AuxKind::Median.statistic(&r), 2.0);
        assert_eq!(AuxKind::ThirdMoment.statistic(&r), 12.0);
        assert_eq!(AuxKind::Median.statistic(&[4.0, 1.0, 3.0, 2.0]), 2.0);
    }

    #[test]
    fn smm_moments_by_hand() {
        let m = smm_moments(&[1.0, -1.0, 2.0]).unwrap();
        let expected = [2.0, 8.0 / 3.0, 6.0, -1.5];
        for (a, b) in m.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(smm_moments(&[0.0; 10]).unwrap(), [0.0; 4]);
    }

    #[test]
    fn quadratic_forms() {
        let v = [1.0, -2.0, 0.5, 3.0];
        let id = DMatrix::identity(4, 4);
        assert!((quadratic_form(&v, &id).unwrap() - 14.25).abs() < 1e-12);
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5, 4.0, 1.0]));
        assert!((quadratic_form(&v, &diag).unwrap() - (2.0 + 2.0 + 1.0 + 9.0)).abs() < 1e-12);
        assert_eq!(quadratic_form(&[0.0; 4], &diag).unwrap(), 0.0);
        let mut bad = DMatrix::identity(4, 4);
        bad[(2, 2)] = -1.0;
        assert!(matches!(
            quadratic_form(&v, &bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn newey_west_zero_lag_is_second_moment() {
        let psi = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.0, 3.0, 1.0]);
        let nw = newey_west(&psi, 0).unwrap();
        let expected =
            DMatrix::from_row_slice(2, 2, &[11.0 / 3.0, 5.0 / 3.0, 5.0 / 3.0, 5.0 / 3.0]);
        assert!((nw - expected).abs().max() < 1e-14);
        assert!(newey_west(&psi, 3).is_err());
    }

    #[test]
    fn newey_west_one_lag_by_hand() {
        let psi = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, -1.0, 3.0]);
        // Γ0 = 15/4, Γ1 = (2 - 2 - 3)/4, weight 1/2.
        let nw = newey_west(&psi, 1).unwrap();
        assert!((nw[(0, 0)] - (15.0 / 4.0 - 3.0 / 4.0)).abs() < 1e-14);
    }

    #[test]
    fn newey_west_iid_close_to_second_moment() {
        let t = 100_000;
        let mut rng = Stream::new(1, Domain::Test, 0, 0);
        let psi = DMatrix::from_fn(t, 2, |_, _| rng.normal());
        let nw = newey_west(&psi, NW_LAGS).unwrap();
        let raw = newey_west(&psi, 0).unwrap();
        assert!((nw[(0, 0)] / raw[(0, 0)] - 1.0).abs() < 0.05);
        assert!((nw[(1, 1)] / raw[(1, 1)] - 1.0).abs() < 0.05);
    }

    #[test]
    fn covariance_scales_with_simulation_size() {
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, -0.1, 1.5]);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let om = DMatrix::identity(2, 2);
        let c1 = ii_covariance(&d, &w, &om, 1, 100).unwrap();
        let c2 = ii_covariance(&d, &w, &om, 2, 100).unwrap();
        assert!((c2 - c1.clone() * 0.75).abs().max() < 1e-15 * c1.abs().max());
        let direct = d.clone().try_inverse().unwrap()
            * &w
            * d.try_inverse().unwrap().transpose()
            * (2.0 / 100.0);
        assert!((c1 - direct).abs().max() < 1e-14);
    }

    #[test]
    fn multi_start_keeps_best_single_start() {
        let base = StructuralParams::daily_calibration(2);
        // Two wells in σ_δ, the deeper one near 2.
        let dist = Distance {
            base: &base,
            target: vec![1.6, 0.1, 2.5, 0.0],
            omega: DMatrix::identity(4, 4),
            stat: |p: &StructuralParams| {
                let s = p.sigma_delta.ln();
                let well = (s - 0.7).powi(2) * ((s + 0.7).powi(2) + 0.05);
                Ok(vec![p.m0, p.gamma_kbar, p.b, well.sqrt()])
            },
        };
        let start = ThetaFree {
            m0: 1.5,
            gamma_kbar: 0.2,
            b: 2.0,
            sigma_delta: 1.0,
        };
        let opts = IiOptions {
            sigma_delta_starts: vec![0.5, 2.0],
            ..IiOptions::default()
        };
        let (theta, value, diag) = dist.minimize_multi(&start, &opts).unwrap();
        let mut evaluations = 0;
        for sd in [0.5, 2.0] {
            let single = ThetaFree {
                sigma_delta: sd,
                ..start
            };
            let (_, v, d) = dist.minimize(&single, &opts).unwrap();
            assert!(value <= v);
            evaluations += d.evaluations;
        }
        assert_eq!(diag.evaluations, evaluations);
        assert!((theta.sigma_delta.ln() - 0.7).abs() < 0.05);
        let none = IiOptions {
            sigma_delta_starts: vec![],
            ..IiOptions::default()
        };
        let (_, _, d) = dist.minimize_multi(&start, &none).unwrap();
        assert_eq!(d.start, start);
    }

    #[test]
    fn theta_round_trip() {
        let th = ThetaFree {
            m0: 1.6,
            gamma_kbar: 0.1,
            b: 2.5,
            sigma_delta: 0.7,
        };
        for kbar in [1, 3] {
            let x = th.to_unconstrained(kbar).unwrap();
            let back = ThetaFree::from_unconstrained(&x, kbar, &th);
            for (a, b) in back.as_array().iter().zip(th.as_array()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn median_estimating_function_balances() {
        let mut rng = Stream::new(2, Domain::Test, 0, 0);
        for t in [101, 200] {
            let r: Vec<f64> = (0..t).map(|_| rng.normal()).collect();
            let eta = AuxKind::Median.statistic(&r);
            let s: f64 = r
                .iter()
                .map(|&x| AuxKind::Median.estimating_fn(x, eta))
                .sum();
            assert!(s.abs() <= 1.0);
        }
    }

    #[test]
    fn unknown_names_rejected() {
        assert!("mode".parse::<AuxKind>().is_err());
        assert_eq!(
            "third-moment".parse::<AuxKind>().unwrap(),
            AuxKind::ThirdMoment
        );
        assert!("diagonal".parse::<Weighting>().is_err());
        assert_eq!("emm".parse::<IiMethod>().unwrap(), IiMethod::Emm);
    }
}
