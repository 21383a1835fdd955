//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use sos_core::linear_gaussian::LinearGaussian;
use statrs::distribution::{ContinuousCDF, Normal};

/// Exact filtering distributions of the scalar linear-Gaussian model.
pub struct Kalman {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub log_increments: Vec<f64>,
    pub loglik: f64,
}

pub fn kalman(m: &LinearGaussian, obs: &[f64]) -> Kalman {
    let mut mean = m.prior_mean;
    let mut var = m.prior_sd * m.prior_sd;
    let mut out = Kalman {
        means: vec![],
        sds: vec![],
        log_increments: vec![],
        loglik: 0.0,
    };
    for &r in obs {
        let pm = m.phi * mean;
        let pv = m.phi * m.phi * var + m.sigma_state * m.sigma_state;
        let sv = pv + m.sigma_obs * m.sigma_obs;
        let e = r - pm;
        let li = -0.5 * ((2.0 * std::f64::consts::PI * sv).ln() + e * e / sv);
        let gain = pv / sv;
        mean = pm + gain * e;
        var = (1.0 - gain) * pv;
        out.means.push(mean);
        out.sds.push(var.sqrt());
        out.log_increments.push(li);
        out.loglik += li;
    }
    out
}

/// Likelihood of a hidden Markov chain with pair densities `dens(i, j, r)`
/// by summing over every state path. Exponential in `T`.
pub fn enumerate_paths(
    pi0: &[f64],
    a: &DMatrix<f64>,
    obs: &[f64],
    dens: impl Fn(usize, usize, f64) -> f64,
) -> f64 {
    let d = pi0.len();
    let t = obs.len();
    let paths = d.pow(t as u32 + 1);
    let mut total = 0.0;
    for code in 0..paths {
        let mut c = code;
        let s: Vec<usize> = (0..=t)
            .map(|_| {
                let v = c % d;
                c /= d;
                v
            })
            .collect();
        let mut w = pi0[s[0]];
        for k in 1..=t {
            w *= a[(s[k - 1], s[k])] * dens(s[k - 1], s[k], obs[k - 1]);
        }
        total += w;
    }
    total.ln()
}

/// Forward recursion with `perm` relabelling the states.
pub fn hamilton_permuted(
    pi0: &[f64],
    a: &DMatrix<f64>,
    obs: &[f64],
    dens: impl Fn(usize, usize, f64) -> f64,
    perm: &[usize],
) -> f64 {
    let d = pi0.len();
    // state k of the relabelled chain is state perm[k] of the original
    let mut p: Vec<f64> = (0..d).map(|k| pi0[perm[k]]).collect();
    let mut ll = 0.0;
    for &r in obs {
        let mut next = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                next[j] += p[i] * a[(perm[i], perm[j])] * dens(perm[i], perm[j], r);
            }
        }
        let s: f64 = next.iter().sum();
        ll += s.ln();
        p = next.iter().map(|v| v / s).collect();
    }
    ll
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn rmse(xs: &[f64], target: f64) -> f64 {
    (xs.iter().map(|x| (x - target).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Least-squares slope, computed directly.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
