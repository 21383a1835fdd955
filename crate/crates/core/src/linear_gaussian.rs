//! Scalar linear-Gaussian state space model, a reference case whose exact
//! filter is the Kalman recursion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{History, StateModel};
use crate::rng::{Domain, Stream};

/// `s_t = φ s_{t-1} + σ_s ε_t`, `r_t = s_t + σ_r η_t`, `s_0 ~ N(m_0, v_0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub phi: f64,
    pub sigma_state: f64,
    pub sigma_obs: f64,
    pub prior_mean: f64,
    pub prior_sd: f64,
}

impl LinearGaussian {
    pub fn new(
        phi: f64,
        sigma_state: f64,
        sigma_obs: f64,
        prior_mean: f64,
        prior_sd: f64,
    ) -> Result<Self> {
        if !(sigma_state >= 0.0 && sigma_obs >= 0.0 && prior_sd >= 0.0) || !phi.is_finite() {
            return Err(Error::invalid("standard deviations must be non-negative"));
        }
        Ok(Self {
            phi,
            sigma_state,
            sigma_obs,
            prior_mean,
            prior_sd,
        })
    }

    /// States and observations for `t` periods; period `k` uses stream
    /// `(seed, Simulate, k, 0)`.
    pub fn simulate(&self, t: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut s =
            self.prior_mean + self.prior_sd * Stream::new(seed, Domain::BurnIn, 0, 0).normal();
        let mut states = Vec::with_capacity(t);
        let mut obs = Vec::with_capacity(t);
        for k in 1..=t {
            let mut rng = Stream::new(seed, Domain::Simulate, k as u64, 0);
            s = self.phi * s + self.sigma_state * rng.normal();
            states.push(s);
            obs.push(s + self.sigma_obs * rng.normal());
        }
        (states, obs)
    }
}

impl StateModel for LinearGaussian {
    type State = f64;

    fn obs_dim(&self) -> usize {
        1
    }

    fn sample_prior(&self, rng: &mut Stream) -> Result<f64> {
        Ok(self.prior_mean + self.prior_sd * rng.normal())
    }

    fn sample_transition(
        &self,
        prev: &f64,
        _history: &History<'_>,
        rng: &mut Stream,
        obs: &mut [f64],
    ) -> Result<f64> {
        let s = self.phi * prev + self.sigma_state * rng.normal();
        obs[0] = s + self.sigma_obs * rng.normal();
        Ok(s)
    }
}
