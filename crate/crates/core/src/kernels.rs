//! Smoothing kernels for the importance weights and the bandwidth policies
//! that scale them.
//!
//! A kernel is a strictly positive, symmetric density on `R^n` with finite
//! second moment `A(K) = ∫‖u‖²K(u)du` and finite `B(K) = ∫K(u)²du`. Two are
//! shipped: the Gaussian (product form in several dimensions) and a
//! heavy-tailed "quasi-Cauchy" kernel `K(u) = (2/π)(1+u²)^(-2)`, also
//! extended to several dimensions in product form.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{integrate_real_line, median_abs_deviation};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Name of a shipped kernel, as it appears in run configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelName {
    Gaussian,
    QuasiCauchy,
}

type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Shape {
    Gaussian,
    QuasiCauchy,
    Custom(Evaluator),
}

/// A kernel density on `R^dim` together with its constants `A(K)` and `B(K)`.
#[derive(Clone)]
pub struct Kernel {
    dim: usize,
    shape: Shape,
    a: f64,
    b: f64,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.shape {
            Shape::Gaussian => "gaussian",
            Shape::QuasiCauchy => "quasi-cauchy",
            Shape::Custom(_) => "custom",
        };
        f.debug_struct("Kernel")
            .field("shape", &name)
            .field("dim", &self.dim)
            .field("a", &self.a)
            .field("b", &self.b)
            .finish()
    }
}

impl Kernel {
    /// Standard normal density (product form when `dim > 1`).
    pub fn gaussian(dim: usize) -> Self {
        assert!(dim >= 1, "kernel dimension must be positive");
        Self {
            dim,
            shape: Shape::Gaussian,
            a: dim as f64,
            b: (0.5 / PI.sqrt()).powi(dim as i32),
        }
    }

    /// `(2/π)(1+u²)^(-2)` per coordinate.
    pub fn quasi_cauchy(dim: usize) -> Self {
        assert!(dim >= 1, "kernel dimension must be positive");
        Self {
            dim,
            shape: Shape::QuasiCauchy,
            a: dim as f64,
            b: (5.0 / (4.0 * PI)).powi(dim as i32),
        }
    }

    pub fn from_name(name: KernelName, dim: usize) -> Self {
        match name {
            KernelName::Gaussian => Self::gaussian(dim),
            KernelName::QuasiCauchy => Self::quasi_cauchy(dim),
        }
    }

    /// A user-supplied kernel with declared constants. Use
    /// [`kernel_constants`] to check the declaration.
    pub fn custom<F>(dim: usize, evaluator: F, a: f64, b: f64) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        assert!(dim >= 1, "kernel dimension must be positive");
        Self {
            dim,
            shape: Shape::Custom(Arc::new(evaluator)),
            a,
            b,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Second-moment constant `A(K)`.
    pub fn a(&self) -> f64 {
        self.a
    }

    /// L2 constant `B(K)`.
    pub fn b(&self) -> f64 {
        self.b
    }

    #[inline]
    fn eval_1d(&self, u: f64) -> f64 {
        match &self.shape {
            Shape::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
            Shape::QuasiCauchy => {
                let s = 1.0 + u * u;
                2.0 / (PI * s * s)
            }
            Shape::Custom(f) => f(&[u]),
        }
    }

    /// `K(u)`.
    pub fn eval(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim);
        match &self.shape {
            Shape::Custom(f) => f(u),
            _ => u.iter().map(|&x| self.eval_1d(x)).product(),
        }
    }

    /// `K_h(r) = h^(-n) K(r/h)`.
    pub fn eval_scaled(&self, h: f64, r: &[f64]) -> Result<f64> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        if r.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has dimension {}, kernel has dimension {}",
                r.len(),
                self.dim
            )));
        }
        let u: Vec<f64> = r.iter().map(|x| x / h).collect();
        Ok(self.eval(&u) / h.powi(self.dim as i32))
    }

    /// Unchecked one-dimensional `K_h(x)` given `1/h`.
    #[inline]
    pub(crate) fn eval_scaled_1d(&self, inv_h: f64, x: f64) -> f64 {
        self.eval_1d(x * inv_h) * inv_h
    }
}

const QUAD_TOL: f64 = 1e-11;
const QUAD_INTERVALS: usize = 4000;

/// Integrate `g(u) K(u)` over `R^dim` by nested adaptive quadrature.
fn integrate_against(kernel: &Kernel, g: &dyn Fn(&[f64], f64) -> f64) -> Result<f64> {
    fn nest(kernel: &Kernel, g: &dyn Fn(&[f64], f64) -> f64, prefix: &mut Vec<f64>) -> Result<f64> {
        let dim = kernel.dim();
        if prefix.len() + 1 == dim {
            let mut point = prefix.clone();
            point.push(0.0);
            return integrate_real_line(
                |u| {
                    point[dim - 1] = u;
                    let k = kernel.eval(&point);
                    g(&point, k)
                },
                QUAD_TOL,
                QUAD_INTERVALS,
            );
        }
        let mut err = None;
        let value = integrate_real_line(
            |u| {
                prefix.push(u);
                let inner = nest(kernel, g, prefix);
                prefix.pop();
                match inner {
                    Ok(v) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            QUAD_TOL,
            QUAD_INTERVALS,
        );
        match err {
            Some(e) => Err(e),
            None => value,
        }
    }
    nest(kernel, g, &mut Vec::with_capacity(kernel.dim()))
}

/// Quadrature values of the four kernel conditions.
#[derive(Debug, Clone)]
pub struct KernelMoments {
    /// `∫K`
    pub mass: f64,
    /// `∫u_i K` for each coordinate.
    pub first_moment: Vec<f64>,
    /// `∫‖u‖²K`
    pub a: f64,
    /// `∫K²`
    pub b: f64,
}

/// Compute all kernel conditions by quadrature.
pub fn kernel_moments(kernel: &Kernel) -> Result<KernelMoments> {
    let mass = integrate_against(kernel, &|_, k| k)?;
    let first_moment = (0..kernel.dim())
        .map(|i| integrate_against(kernel, &|u, k| u[i] * k))
        .collect::<Result<Vec<_>>>()?;
    let a = integrate_against(kernel, &|u, k| u.iter().map(|x| x * x).sum::<f64>() * k)?;
    let b = integrate_against(kernel, &|_, k| k * k)?;
    Ok(KernelMoments {
        mass,
        first_moment,
        a,
        b,
    })
}

/// `(A(K), B(K))` by quadrature. Fails with an assumption violation when
/// either integral does not converge, or when the declared constants
/// disagree with the quadrature values beyond 1e-6.
pub fn kernel_constants(kernel: &Kernel) -> Result<(f64, f64)> {
    let m = kernel_moments(kernel)?;
    if (m.mass - 1.0).abs() > 1e-6 {
        return Err(Error::AssumptionViolation(format!(
            "kernel integrates to {} rather than 1",
            m.mass
        )));
    }
    if (m.a - kernel.a()).abs() > 1e-6 || (m.b - kernel.b()).abs() > 1e-6 {
        return Err(Error::AssumptionViolation(format!(
            "declared constants (A={}, B={}) differ from quadrature (A={}, B={})",
            kernel.a(),
            kernel.b(),
            m.a,
            m.b
        )));
    }
    Ok((m.a, m.b))
}

/// How the bandwidth is chosen at each filter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    Fixed,
    PowerLaw,
    AdaptiveScale,
}

/// Bandwidth policy `h_t(N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthPolicy {
    pub mode: BandwidthMode,
    /// Reference bandwidth (observation units): the fixed value, the
    /// power-law prefactor, or the fallback prefactor when the adaptive
    /// spread is zero.
    pub h1: f64,
    pub exponent: f64,
    /// Multiplier `c` of the robust spread in adaptive-scale mode.
    pub scale_constant: f64,
}

/// Consistency scale of the median absolute deviation under normality.
pub const MAD_TO_SD: f64 = 1.4826;

impl BandwidthPolicy {
    fn default_exponent(obs_dim: usize) -> f64 {
        -1.0 / (obs_dim as f64 + 4.0)
    }

    fn check_exponent(exponent: f64, obs_dim: usize) -> Result<()> {
        let lower = -1.0 / obs_dim as f64;
        if exponent < 0.0 && exponent > lower {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "bandwidth exponent {exponent} outside ({lower}, 0)"
            )))
        }
    }

    pub fn fixed(h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::invalid("fixed bandwidth must be positive"));
        }
        Ok(Self {
            mode: BandwidthMode::Fixed,
            h1: h,
            exponent: 0.0,
            scale_constant: 1.0,
        })
    }

    /// `h1 · N^(-1/(n_R+4))`.
    pub fn power_law(h1: f64, obs_dim: usize) -> Result<Self> {
        Self::power_law_with_exponent(h1, Self::default_exponent(obs_dim), obs_dim)
    }

    pub fn power_law_with_exponent(h1: f64, exponent: f64, obs_dim: usize) -> Result<Self> {
        if !(h1 > 0.0) {
            return Err(Error::invalid("reference bandwidth must be positive"));
        }
        Self::check_exponent(exponent, obs_dim)?;
        Ok(Self {
            mode: BandwidthMode::PowerLaw,
            h1,
            exponent,
            scale_constant: 1.0,
        })
    }

    /// `c · scale · N^(-1/(n_R+4))` with `scale` the robust spread of the
    /// current pseudo-observations.
    pub fn adaptive(scale_constant: f64, obs_dim: usize) -> Result<Self> {
        if !(scale_constant > 0.0) {
            return Err(Error::invalid("scale constant must be positive"));
        }
        Ok(Self {
            mode: BandwidthMode::AdaptiveScale,
            h1: 1.0,
            exponent: Self::default_exponent(obs_dim),
            scale_constant,
        })
    }

    /// Bandwidth for `n` particles. `scale` is required in adaptive mode.
    pub fn bandwidth(&self, n: usize, scale: Option<f64>) -> Result<f64> {
        if n == 0 {
            return Err(Error::invalid("particle count must be at least 1"));
        }
        let rate = (n as f64).powf(self.exponent);
        match self.mode {
            BandwidthMode::Fixed => Ok(self.h1),
            BandwidthMode::PowerLaw => Ok(self.h1 * rate),
            BandwidthMode::AdaptiveScale => {
                let s = scale.ok_or_else(|| {
                    Error::invalid("adaptive-scale bandwidth needs a spread estimate")
                })?;
                if s > 0.0 && s.is_finite() {
                    Ok(self.scale_constant * s * rate)
                } else {
                    Ok(self.h1 * rate)
                }
            }
        }
    }
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        Self::adaptive(1.0, 1).expect("valid default")
    }
}

/// Robust spread of points stored row-major with `dim` coordinates:
/// `1.4826 · MAD` per coordinate, combined by geometric mean. Falls back to
/// the standard deviation of a coordinate whose MAD is zero.
pub fn robust_scale(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    if n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for j in 0..dim {
        let col: Vec<f64> = points.iter().skip(j).step_by(dim).copied().collect();
        let mut s = MAD_TO_SD * median_abs_deviation(&col);
        if !(s > 0.0) {
            let mean = col.iter().sum::<f64>() / n as f64;
            s = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        }
        if !(s > 0.0) {
            return 0.0;
        }
        log_sum += s.ln();
    }
    (log_sum / dim as f64).exp()
}

/// Bandwidth minimizing the one-step error bound, given the bound constants
/// `κ_t` and `κ'_t`.
pub fn optimal_bandwidth(kappa: f64, kappa_prime: f64, kernel: &Kernel, n: usize) -> f64 {
    let nr = kernel.dim() as f64;
    let base = kappa * nr * kernel.b() / (8.0 * kappa_prime * kappa_prime * kernel.a().powi(2));
    (n as f64).powf(-1.0 / (nr + 4.0)) * base.powf(1.0 / (nr + 4.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_gaussian_at_origin() {
        let k = Kernel::gaussian(1);
        assert!((k.eval_scaled(1.0, &[0.0]).unwrap() - 0.398_942_3).abs() < 1e-7);
        let k0 = k.eval(&[0.0]);
        assert!((k.eval_scaled(2.0, &[0.0]).unwrap() - k0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn scaled_quasi_cauchy_at_origin() {
        let k = Kernel::quasi_cauchy(1);
        assert!((k.eval_scaled(1.0, &[0.0]).unwrap() - 2.0 / PI).abs() < 1e-15);
        let k0 = k.eval(&[0.0]);
        assert!((k.eval_scaled(2.0, &[0.0]).unwrap() - k0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_positive_bandwidth_rejected() {
        let k = Kernel::gaussian(1);
        assert!(matches!(
            k.eval_scaled(0.0, &[0.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            k.eval_scaled(-1.0, &[0.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn constants_by_quadrature() {
        let (a, b) = kernel_constants(&Kernel::gaussian(1)).unwrap();
        assert!((a - 1.0).abs() < 1e-6);
        assert!((b - 0.282_094_8).abs() < 1e-6);
        let (a, b) = kernel_constants(&Kernel::quasi_cauchy(1)).unwrap();
        assert!((a - 1.0).abs() < 1e-6);
        assert!((b - 0.397_887_4).abs() < 1e-6);
    }

    #[test]
    fn product_gaussian_second_moment() {
        let (a, _) = kernel_constants(&Kernel::gaussian(2)).unwrap();
        assert!((a - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cauchy_second_moment_diverges() {
        let cauchy = Kernel::custom(1, |u| 1.0 / (PI * (1.0 + u[0] * u[0])), 1.0, 1.0);
        assert!(matches!(
            kernel_constants(&cauchy),
            Err(Error::AssumptionViolation(_))
        ));
    }

    #[test]
    fn scaled_kernel_integrates_to_one() {
        for k in [Kernel::gaussian(1), Kernel::quasi_cauchy(1)] {
            for h in [0.01, 0.3, 5.0] {
                let mass =
                    integrate_real_line(|r| k.eval_scaled(h, &[r]).unwrap(), 1e-10, QUAD_INTERVALS)
                        .unwrap();
                assert!((mass - 1.0).abs() < 1e-6, "h={h}: {mass}");
            }
        }
    }

    #[test]
    fn optimal_bandwidth_reference_value() {
        let h = optimal_bandwidth(1.0, 1.0, &Kernel::gaussian(1), 100_000);
        let expected = (0.5 / PI.sqrt() / 8.0).powf(0.2) * 0.1;
        assert!((h - expected).abs() < 1e-15);
        assert!((h - 0.0512).abs() < 1e-4);
    }

    #[test]
    fn power_law_bandwidth() {
        let p = BandwidthPolicy::power_law(1.0, 1).unwrap();
        assert_eq!(p.bandwidth(1, None).unwrap(), 1.0);
        for n in [10usize, 1000, 100_000, 10_000_000] {
            let h = p.bandwidth(n, None).unwrap();
            let nh = n as f64 * h;
            assert!((nh - (n as f64).powf(0.8)).abs() < 1e-9 * nh);
        }
        assert!(BandwidthPolicy::power_law_with_exponent(1.0, -1.2, 1).is_err());
        assert!(BandwidthPolicy::power_law_with_exponent(1.0, 0.1, 1).is_err());
    }

    #[test]
    fn adaptive_requires_scale() {
        let p = BandwidthPolicy::adaptive(1.0, 1).unwrap();
        assert!(matches!(
            p.bandwidth(100, None),
            Err(Error::InvalidArgument(_))
        ));
        let h = p.bandwidth(32, Some(2.0)).unwrap();
        assert!((h - 2.0 * 32f64.powf(-0.2)).abs() < 1e-15);
    }

    #[test]
    fn robust_scale_of_symmetric_points() {
        let pts = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert!((robust_scale(&pts, 1) - MAD_TO_SD).abs() < 1e-15);
        assert_eq!(robust_scale(&[0.0; 10], 1), 0.0);
    }
}
