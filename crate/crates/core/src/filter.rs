//! State-observation sampling (SOS) particle filter.
//!
//! Each step draws a state and a pseudo-observation jointly from the model's
//! transition law, weights the pairs by the kernel distance between the
//! pseudo-observation and the actual data point, and resamples. The
//! observation density never has to be evaluated.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{robust_scale, BandwidthMode, BandwidthPolicy, Kernel};
use crate::rng::{Domain, Stream};

/// Read-only view of the observations `r_1..r_{t-1}` available when the
/// step-`t` pairs are drawn.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> History<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        debug_assert_eq!(data.len() % dim, 0);
        Self { data, dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Observation `t` (zero-based).
    pub fn get(&self, t: usize) -> &'a [f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn last(&self) -> Option<&'a [f64]> {
        (!self.is_empty()).then(|| self.get(self.len() - 1))
    }
}

/// A hidden-state model that can be simulated but whose observation density
/// need not be known.
///
/// Implementations are called concurrently from many workers and must not
/// keep shared mutable state; all randomness comes from the stream argument.
pub trait StateModel: Sync {
    type State: Clone + Send + Sync;

    /// Dimension `n_R` of an observation.
    fn obs_dim(&self) -> usize;

    /// Draw an initial state.
    fn sample_prior(&self, rng: &mut Stream) -> Result<Self::State>;

    /// Draw `(s_t, r_t)` given `s_{t-1}` and the history, writing the
    /// pseudo-observation into `obs` (length `obs_dim`).
    fn sample_transition(
        &self,
        prev: &Self::State,
        history: &History<'_>,
        rng: &mut Stream,
        obs: &mut [f64],
    ) -> Result<Self::State>;
}

/// Resampling scheme used in the selection step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplingScheme {
    Multinomial,
    Stratified,
    Residual,
    #[default]
    ResidualStratified,
}

impl FromStr for ResamplingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(Self::Multinomial),
            "stratified" => Ok(Self::Stratified),
            "residual" => Ok(Self::Residual),
            "residual-stratified" => Ok(Self::ResidualStratified),
            other => Err(Error::invalid(format!(
                "unknown resampling scheme '{other}'"
            ))),
        }
    }
}

/// `N` particles, optionally paired with pseudo-observations (row-major,
/// `obs_dim` per particle) and normalized weights.
#[derive(Debug, Clone)]
pub struct ParticleCloud<S> {
    pub states: Vec<S>,
    pub pseudo_obs: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

impl<S> ParticleCloud<S> {
    pub fn unweighted(states: Vec<S>) -> Self {
        Self {
            states,
            pseudo_obs: None,
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// A state functional whose weighted mean is reported at every step.
pub type MomentFn<'a, S> = &'a (dyn Fn(&S) -> f64 + Sync);

/// Everything recorded about one filter step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// One-based time index.
    pub step: usize,
    /// `f̂(r_t | R_{t-1}) = N^{-1} Σ K_h(r_t - r̃_t^(n))`.
    pub increment: f64,
    /// `ln` of the increment after clipping at the smallest normal number.
    pub log_increment: f64,
    /// Bandwidth used, after any escalation.
    pub bandwidth: f64,
    /// Number of bandwidth doublings needed to obtain non-zero weights.
    pub escalations: u32,
    pub ess: f64,
    /// `Σ p^(n) Φ(s̃^(n))` for each requested functional.
    pub moments: Vec<f64>,
}

/// Result of a filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    pub loglik: f64,
    pub steps: Vec<StepRecord>,
}

impl FilterOutput {
    fn push(&mut self, rec: StepRecord) {
        self.loglik += rec.log_increment;
        self.steps.push(rec);
    }

    /// Per-step trace as CSV: step, increment, log increment, bandwidth,
    /// ESS and one column per moment.
    pub fn write_trace_csv<W: Write>(&self, out: W, moment_names: &[&str]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step", "increment", "log_increment", "bandwidth", "ess"];
        header.extend_from_slice(moment_names);
        w.write_record(&header).map_err(csv_io)?;
        for r in &self.steps {
            let mut row = vec![
                r.step.to_string(),
                format!("{:e}", r.increment),
                r.log_increment.to_string(),
                r.bandwidth.to_string(),
                r.ess.to_string(),
            ];
            row.extend(r.moments.iter().map(|m| m.to_string()));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Filter settings.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub particles: usize,
    pub kernel: Kernel,
    pub bandwidth: BandwidthPolicy,
    pub scheme: ResamplingScheme,
    pub seed: u64,
}

impl FilterConfig {
    /// Gaussian kernel, adaptive-scale bandwidth, residual-stratified
    /// resampling.
    pub fn new(particles: usize, obs_dim: usize, seed: u64) -> Self {
        Self {
            particles,
            kernel: Kernel::gaussian(obs_dim),
            bandwidth: BandwidthPolicy::adaptive(1.0, obs_dim).expect("positive constant"),
            scheme: ResamplingScheme::default(),
            seed,
        }
    }
}

const MAX_ESCALATIONS: u32 = 10;

/// Draw initial states; particle `n` uses stream `(seed, Prior, 0, n)`.
pub fn sample_prior_cloud<M: StateModel>(
    model: &M,
    n: usize,
    seed: u64,
) -> Result<ParticleCloud<M::State>> {
    if n == 0 {
        return Err(Error::invalid("particle count must be at least 1"));
    }
    let draws: Vec<Result<M::State>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = Stream::new(seed, Domain::Prior, 0, i as u64);
            model
                .sample_prior(&mut rng)
                .map_err(|e| Error::ModelEvaluation {
                    particle: i,
                    message: e.to_string(),
                })
        })
        .collect();
    draws
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map(ParticleCloud::unweighted)
}

fn in_order<T>(draws: Vec<Result<T>>) -> Result<Vec<T>> {
    draws.into_iter().collect()
}

/// Step 1 for every particle. Particle `i` starts from
/// `parents[ancestors[i]]` (or `parents[i]`) and uses stream
/// `(seed, Transition, step, i)`.
fn draw_pairs<M: StateModel>(
    model: &M,
    parents: &[M::State],
    ancestors: Option<&[usize]>,
    history: &History<'_>,
    seed: u64,
    step: usize,
) -> Result<(Vec<M::State>, Vec<f64>)> {
    let dim = model.obs_dim();
    let n = ancestors.map_or(parents.len(), <[usize]>::len);
    let mut pseudo = vec![0.0; n * dim];
    let states: Vec<Result<M::State>> = pseudo
        .par_chunks_mut(dim)
        .enumerate()
        .map(|(i, out)| {
            let parent = &parents[ancestors.map_or(i, |a| a[i])];
            let mut rng = Stream::new(seed, Domain::Transition, step as u64, i as u64);
            let s = model
                .sample_transition(parent, history, &mut rng, out)
                .map_err(|e| Error::ModelEvaluation {
                    particle: i,
                    message: e.to_string(),
                })?;
            if out.iter().all(|x| x.is_finite()) {
                Ok(s)
            } else {
                Err(Error::ModelEvaluation {
                    particle: i,
                    message: "non-finite pseudo-observation".into(),
                })
            }
        })
        .collect();
    Ok((in_order(states)?, pseudo))
}

/// Step 1: draw a state-observation pair from every particle of an
/// unweighted cloud.
pub fn sample_pairs<M: StateModel>(
    model: &M,
    cloud: &ParticleCloud<M::State>,
    history: &History<'_>,
    seed: u64,
    step: usize,
) -> Result<ParticleCloud<M::State>> {
    if cloud.weights.is_some() {
        return Err(Error::invalid("sample_pairs expects an unweighted cloud"));
    }
    if cloud.is_empty() {
        return Err(Error::invalid("particle count must be at least 1"));
    }
    let (states, pseudo) = draw_pairs(model, &cloud.states, None, history, seed, step)?;
    Ok(ParticleCloud {
        states,
        pseudo_obs: Some(pseudo),
        weights: None,
    })
}

/// Normalized importance weights and the likelihood estimate they imply.
#[derive(Debug, Clone)]
pub struct Weights {
    pub probs: Vec<f64>,
    /// `N^{-1} Σ K_h(r_t - r̃^(n))`.
    pub mean_kernel: f64,
}

impl Weights {
    pub fn ess(&self) -> f64 {
        1.0 / self.probs.iter().map(|p| p * p).sum::<f64>()
    }
}

/// Step 2: `p^(n) ∝ K_h(r_t - r̃^(n))`. `step` is only used to label a
/// degenerate-weights error.
pub fn compute_weights(
    pseudo_obs: &[f64],
    observation: &[f64],
    kernel: &Kernel,
    h: f64,
    step: usize,
) -> Result<Weights> {
    let dim = observation.len();
    if dim != kernel.dim()
        || dim == 0
        || !pseudo_obs.len().is_multiple_of(dim)
        || pseudo_obs.is_empty()
    {
        return Err(Error::invalid(
            "pseudo-observation and kernel dimensions disagree",
        ));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let n = pseudo_obs.len() / dim;
    let mut vals: Vec<f64> = if dim == 1 {
        let inv_h = 1.0 / h;
        let r = observation[0];
        pseudo_obs
            .par_iter()
            .map(|&x| kernel.eval_scaled_1d(inv_h, r - x))
            .collect()
    } else {
        let norm = h.powi(dim as i32);
        pseudo_obs
            .par_chunks(dim)
            .map(|p| {
                let u: smallvec::SmallVec<[f64; 8]> = p
                    .iter()
                    .zip(observation)
                    .map(|(x, r)| (r - x) / h)
                    .collect();
                kernel.eval(&u) / norm
            })
            .collect()
    };
    let sum: f64 = vals.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::DegenerateWeights { step, bandwidth: h });
    }
    let inv = 1.0 / sum;
    vals.par_iter_mut().for_each(|v| *v *= inv);
    Ok(Weights {
        probs: vals,
        mean_kernel: sum / n as f64,
    })
}

/// Compute weights, doubling the bandwidth up to ten times while every
/// kernel value underflows. Returns the weights, final bandwidth and number
/// of doublings.
pub fn compute_weights_escalating(
    pseudo_obs: &[f64],
    observation: &[f64],
    kernel: &Kernel,
    h: f64,
    step: usize,
) -> Result<(Weights, f64, u32)> {
    let mut h = h;
    for k in 0..=MAX_ESCALATIONS {
        match compute_weights(pseudo_obs, observation, kernel, h, step) {
            Ok(w) => return Ok((w, h, k)),
            Err(Error::DegenerateWeights { .. }) if k < MAX_ESCALATIONS => {
                log::warn!("step {step}: all kernel weights vanish at h={h:e}, doubling bandwidth");
                h *= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop returns on the last iteration")
}

/// Map ascending points in (0, 1] to indices of the normalized cumulative
/// weights `cum` (last entry 1).
fn select_sorted(cum: &[f64], points: impl Iterator<Item = f64>, out: &mut Vec<usize>) {
    let last = cum.len() - 1;
    let mut j = 0;
    for u in points {
        while j < last && cum[j] < u {
            j += 1;
        }
        out.push(j);
    }
}

fn normalized_cumsum(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cum: Vec<f64> = w
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    let total = acc;
    cum.iter_mut().for_each(|c| *c /= total);
    *cum.last_mut().expect("non-empty") = 1.0;
    cum
}

/// `n` sorted i.i.d. uniforms from normalized exponential spacings.
fn sorted_uniforms(n: usize, rng: &mut Stream) -> Vec<f64> {
    let mut acc = 0.0;
    let mut pts: Vec<f64> = (0..n)
        .map(|_| {
            acc -= rng.uniform().ln();
            acc
        })
        .collect();
    let total = acc - rng.uniform().ln();
    pts.iter_mut().for_each(|p| *p /= total);
    pts
}

fn stratified_points(n: usize, rng: &mut Stream) -> impl Iterator<Item = f64> + '_ {
    let inv = 1.0 / n as f64;
    (0..n).map(move |k| (k as f64 + rng.uniform()) * inv)
}

/// Step 3: ancestor indices for `N = weights.len()` draws.
pub fn resample_indices(
    weights: &[f64],
    scheme: ResamplingScheme,
    rng: &mut Stream,
) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::invalid("cannot resample an empty cloud"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("weights sum to zero"));
    }
    let mut out = Vec::with_capacity(n);
    match scheme {
        ResamplingScheme::Multinomial => {
            let cum = normalized_cumsum(weights);
            select_sorted(&cum, sorted_uniforms(n, rng).into_iter(), &mut out);
        }
        ResamplingScheme::Stratified => {
            let cum = normalized_cumsum(weights);
            select_sorted(&cum, stratified_points(n, rng), &mut out);
        }
        ResamplingScheme::Residual | ResamplingScheme::ResidualStratified => {
            let scale = n as f64 / total;
            let mut frac = Vec::with_capacity(n);
            for (i, w) in weights.iter().enumerate() {
                let np = w * scale;
                let copies = np.floor();
                out.extend(std::iter::repeat_n(i, copies as usize));
                frac.push(np - copies);
            }
            let remaining = n.saturating_sub(out.len());
            if remaining > 0 {
                let cum = normalized_cumsum(&frac);
                if scheme == ResamplingScheme::Residual {
                    select_sorted(&cum, sorted_uniforms(remaining, rng).into_iter(), &mut out);
                } else {
                    select_sorted(&cum, stratified_points(remaining, rng), &mut out);
                }
            }
            out.truncate(n);
        }
    }
    Ok(out)
}

/// Step 3 on a weighted cloud: returns the unweighted resampled cloud.
pub fn resample<S: Clone>(
    cloud: &ParticleCloud<S>,
    scheme: ResamplingScheme,
    rng: &mut Stream,
) -> Result<ParticleCloud<S>> {
    let w = cloud
        .weights
        .as_ref()
        .ok_or_else(|| Error::invalid("resample needs a weighted cloud"))?;
    let idx = resample_indices(w, scheme, rng)?;
    Ok(ParticleCloud::unweighted(
        idx.into_iter().map(|i| cloud.states[i].clone()).collect(),
    ))
}

/// A running SOS filter.
///
/// The resampled cloud is kept as the previous step's proposals plus
/// ancestor indices, so no state is copied during selection.
pub struct SosFilter<'m, M: StateModel> {
    model: &'m M,
    config: FilterConfig,
    proposals: Vec<M::State>,
    ancestors: Option<Vec<usize>>,
    history: Vec<f64>,
    step: usize,
}

impl<'m, M: StateModel> SosFilter<'m, M> {
    /// Start from `N` prior draws.
    pub fn new(model: &'m M, config: FilterConfig) -> Result<Self> {
        Self::check_config(model, &config)?;
        let cloud = sample_prior_cloud(model, config.particles, config.seed)?;
        Ok(Self::from_cloud(model, config, cloud.states, Vec::new(), 0))
    }

    /// Resume from an unweighted cloud after `step` observations (`history`
    /// holds them row-major).
    pub fn resume(
        model: &'m M,
        config: FilterConfig,
        states: Vec<M::State>,
        history: Vec<f64>,
        step: usize,
    ) -> Result<Self> {
        Self::check_config(model, &config)?;
        if states.is_empty() {
            return Err(Error::invalid("particle count must be at least 1"));
        }
        Ok(Self::from_cloud(model, config, states, history, step))
    }

    fn check_config(model: &M, config: &FilterConfig) -> Result<()> {
        if config.particles == 0 {
            return Err(Error::invalid("particle count must be at least 1"));
        }
        if config.kernel.dim() != model.obs_dim() {
            return Err(Error::invalid(format!(
                "kernel dimension {} does not match observation dimension {}",
                config.kernel.dim(),
                model.obs_dim()
            )));
        }
        Ok(())
    }

    fn from_cloud(
        model: &'m M,
        config: FilterConfig,
        states: Vec<M::State>,
        history: Vec<f64>,
        step: usize,
    ) -> Self {
        Self {
            model,
            config,
            proposals: states,
            ancestors: None,
            history,
            step,
        }
    }

    pub fn model(&self) -> &'m M {
        self.model
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    /// Number of observations processed.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.ancestors
            .as_ref()
            .map_or(self.proposals.len(), Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Particle `n` of the current unweighted cloud.
    pub fn particle(&self, n: usize) -> &M::State {
        match &self.ancestors {
            Some(a) => &self.proposals[a[n]],
            None => &self.proposals[n],
        }
    }

    pub fn particles(&self) -> impl Iterator<Item = &M::State> + '_ {
        (0..self.len()).map(move |n| self.particle(n))
    }

    /// Materialize the current unweighted cloud.
    pub fn cloud(&self) -> ParticleCloud<M::State> {
        ParticleCloud::unweighted(self.particles().cloned().collect())
    }

    pub fn history(&self) -> History<'_> {
        History::new(&self.history, self.model.obs_dim())
    }

    /// Process one observation.
    pub fn step(
        &mut self,
        observation: &[f64],
        moments: &[MomentFn<'_, M::State>],
    ) -> Result<StepRecord> {
        let dim = self.model.obs_dim();
        if observation.len() != dim {
            return Err(Error::invalid(format!(
                "observation has dimension {}, model has {dim}",
                observation.len()
            )));
        }
        if observation.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("observation must be finite"));
        }
        let t = self.step + 1;
        let cfg = &self.config;
        let history = History::new(&self.history, dim);
        let (states, pseudo) = draw_pairs(
            self.model,
            &self.proposals,
            self.ancestors.as_deref(),
            &history,
            cfg.seed,
            t,
        )?;
        let n = states.len();
        let scale = (cfg.bandwidth.mode == BandwidthMode::AdaptiveScale)
            .then(|| robust_scale(&pseudo, dim));
        let h0 = cfg.bandwidth.bandwidth(n, scale)?;
        let (w, h, escalations) =
            compute_weights_escalating(&pseudo, observation, &cfg.kernel, h0, t)?;
        let increment = w.mean_kernel;
        let log_increment = if increment >= f64::MIN_POSITIVE {
            increment.ln()
        } else {
            log::warn!("step {t}: likelihood increment {increment:e} clipped");
            f64::MIN_POSITIVE.ln()
        };
        let moments = moments
            .iter()
            .map(|f| {
                let vals: Vec<f64> = states.par_iter().map(f).collect();
                vals.iter().zip(&w.probs).map(|(v, p)| v * p).sum()
            })
            .collect();
        let ess = w.ess();
        let mut rng = Stream::new(cfg.seed, Domain::Resample, t as u64, 0);
        let ancestors = resample_indices(&w.probs, cfg.scheme, &mut rng)?;

        self.proposals = states;
        self.ancestors = Some(ancestors);
        self.history.extend_from_slice(observation);
        self.step = t;
        Ok(StepRecord {
            step: t,
            increment,
            log_increment,
            bandwidth: h,
            escalations,
            ess,
            moments,
        })
    }
}

/// One complete filter step (sample pairs, weight, resample) on an
/// unweighted cloud. `history` holds the `step - 1` earlier observations.
#[allow(clippy::too_many_arguments)]
pub fn filter_step<M: StateModel>(
    model: &M,
    cloud: &ParticleCloud<M::State>,
    history: &[f64],
    observation: &[f64],
    config: &FilterConfig,
    step: usize,
    moments: &[MomentFn<'_, M::State>],
) -> Result<(ParticleCloud<M::State>, StepRecord)> {
    if cloud.weights.is_some() {
        return Err(Error::invalid("filter_step expects an unweighted cloud"));
    }
    if step == 0 {
        return Err(Error::invalid("steps are numbered from 1"));
    }
    let mut f = SosFilter::resume(
        model,
        FilterConfig {
            particles: cloud.len(),
            ..config.clone()
        },
        cloud.states.clone(),
        history.to_vec(),
        step - 1,
    )?;
    let rec = f.step(observation, moments)?;
    Ok((f.cloud(), rec))
}

/// Run the filter over `observations` (row-major, `obs_dim` per step).
///
/// On failure the error carries the output accumulated before the failing
/// step.
pub fn run_filter<M: StateModel>(
    model: &M,
    observations: &[f64],
    config: &FilterConfig,
    moments: &[MomentFn<'_, M::State>],
) -> Result<FilterOutput> {
    run_filter_with(model, observations, config, moments, |_, _| {})
}

/// [`run_filter`] with a callback invoked after every step with the filter
/// (holding the resampled cloud) and the step record.
pub fn run_filter_with<M, F>(
    model: &M,
    observations: &[f64],
    config: &FilterConfig,
    moments: &[MomentFn<'_, M::State>],
    mut observer: F,
) -> Result<FilterOutput>
where
    M: StateModel,
    F: FnMut(&SosFilter<'_, M>, &StepRecord),
{
    let dim = model.obs_dim();
    if observations.is_empty() {
        return Err(Error::invalid("empty observation set"));
    }
    if !observations.len().is_multiple_of(dim) {
        return Err(Error::invalid(
            "observation length is not a multiple of the dimension",
        ));
    }
    let mut filter = SosFilter::new(model, config.clone())?;
    let mut out = FilterOutput {
        loglik: 0.0,
        steps: Vec::with_capacity(observations.len() / dim),
    };
    for (i, obs) in observations.chunks(dim).enumerate() {
        match filter.step(obs, moments) {
            Ok(rec) => {
                observer(&filter, &rec);
                out.push(rec);
            }
            Err(e) => {
                return Err(Error::Filter {
                    step: i + 1,
                    partial: Box::new(out),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(out)
}

/// Mean-squared-error bound `U_t(N)` for `t = 0..T`.
///
/// `kappas[t]` holds `(κ_t, κ'_t)`, `f_r[t]` the true conditional density
/// of the step-`t` observation and `h[t]` the bandwidth used.
pub fn mse_bound(
    kappas: &[(f64, f64)],
    f_r: &[f64],
    kernel: &Kernel,
    h: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    if kappas.len() != f_r.len() || kappas.len() != h.len() {
        return Err(Error::invalid(
            "kappas, densities and bandwidths must have equal length",
        ));
    }
    if n == 0 {
        return Err(Error::invalid("particle count must be at least 1"));
    }
    let positive = |x: f64| x > 0.0 && x.is_finite();
    let nf = n as f64;
    let (a, b) = (kernel.a(), kernel.b());
    let nr = kernel.dim() as i32;
    let mut u = Vec::with_capacity(kappas.len() + 1);
    u.push(1.0 / nf);
    for ((&(k, kp), &f), &ht) in kappas.iter().zip(f_r).zip(h) {
        if !(positive(k) && positive(kp) && positive(f) && positive(ht)) {
            return Err(Error::invalid("bound inputs must be finite and positive"));
        }
        let prev = *u.last().expect("seeded");
        let inner =
            2.0 * kp * kp * a * a * ht.powi(4) + b * k / (nf * ht.powi(nr)) + 2.0 * prev * k * k;
        u.push(4.0 / (f * f) * inner + 1.0 / nf);
    }
    Ok(u)
}
