//! C interface to `sos_core`.
//!
//! Every fallible function returns an [`SosStatus`]; on failure the message
//! is available from [`sos_last_error`] on the same thread. Models and
//! filters are opaque handles released with their `_free` functions.
//! Observations are scalar returns.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sos_core::economy::{price_dividend, simulate_path, Economy, LearningModel, StructuralParams};
use sos_core::error::ErrorFamily;
use sos_core::fi::{fi_loglik, fi_simulate, FiModel, FiStateModel};
use sos_core::filter::{FilterConfig, MomentFn, SosFilter as CoreFilter, StateModel};
use sos_core::linear_gaussian::LinearGaussian;
use sos_core::risk::model_var;
use sos_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SosStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numeric = 3,
    Data = 4,
    Panic = 5,
}

/// Structural parameters, per day.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SosParams {
    pub m0: f64,
    pub gamma_kbar: f64,
    pub b: f64,
    pub sigma_delta: f64,
    pub kbar: u32,
    pub g_c: f64,
    pub g_d: f64,
    pub r_f: f64,
    pub sigma_c: f64,
    pub sigma_d_bar: f64,
    pub rho_cd: f64,
    pub q_bar: f64,
}

impl From<&StructuralParams> for SosParams {
    fn from(p: &StructuralParams) -> Self {
        Self {
            m0: p.m0,
            gamma_kbar: p.gamma_kbar,
            b: p.b,
            sigma_delta: p.sigma_delta,
            kbar: p.kbar as u32,
            g_c: p.g_c,
            g_d: p.g_d,
            r_f: p.r_f,
            sigma_c: p.sigma_c,
            sigma_d_bar: p.sigma_d_bar,
            rho_cd: p.rho_cd,
            q_bar: p.q_bar,
        }
    }
}

impl SosParams {
    fn to_core(self) -> sos_core::Result<StructuralParams> {
        let p = StructuralParams {
            m0: self.m0,
            gamma_kbar: self.gamma_kbar,
            b: self.b,
            sigma_delta: self.sigma_delta,
            kbar: self.kbar as usize,
            g_c: self.g_c,
            g_d: self.g_d,
            r_f: self.r_f,
            sigma_c: self.sigma_c,
            sigma_d_bar: self.sigma_d_bar,
            rho_cd: self.rho_cd,
            q_bar: self.q_bar,
            alpha: 0.0,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Summary of one filter step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SosStepRecord {
    pub log_increment: f64,
    pub bandwidth: f64,
    pub ess: f64,
    /// Filtered mean of the model's summary state: the agent's
    /// price-dividend ratio, nature's price-dividend ratio, or the latent
    /// state of the linear-Gaussian model.
    pub state_mean: f64,
}

#[derive(Debug, Clone)]
enum ModelKind {
    Learning(LearningModel),
    FullInformation(FiStateModel),
    LinearGaussian(LinearGaussian),
}

/// Opaque model handle.
pub struct SosModel {
    kind: ModelKind,
}

enum FilterKind {
    Learning(CoreFilter<'static, LearningModel>),
    FullInformation(CoreFilter<'static, FiStateModel>),
    LinearGaussian(CoreFilter<'static, LinearGaussian>),
}

/// Opaque filter handle.
pub struct SosFilter {
    // Declared before `_model` so it is dropped first.
    filter: FilterKind,
    loglik: f64,
    _model: Box<ModelKind>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> SosStatus {
    match err.family() {
        ErrorFamily::Config => SosStatus::Config,
        ErrorFamily::Numeric => SosStatus::Numeric,
        ErrorFamily::Data => SosStatus::Data,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SosStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SosStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            SosStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SosStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sos_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn sos_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default daily calibration with `kbar` frequencies.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sos_params_daily_calibration(kbar: u32, out: *mut SosParams) -> SosStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let p = StructuralParams::daily_calibration(kbar as usize);
        p.validate()?;
        *out = SosParams::from(&p);
        Ok(())
    })
}

fn boxed(kind: ModelKind, out: *mut *mut SosModel) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: checked non-null above; the caller guarantees validity.
    unsafe { *out = Box::into_raw(Box::new(SosModel { kind })) };
    Ok(())
}

/// Learning economy with the agent's belief in the state; each prior draw
/// burns in for `burn_in` periods.
///
/// # Safety
/// `params` must point to a valid `SosParams`; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sos_model_learning_new(
    params: *const SosParams,
    burn_in: usize,
    out: *mut *mut SosModel,
) -> SosStatus {
    guard(|| {
        let p = deref(params, "params")?.to_core()?;
        let mut model = LearningModel::new(Economy::calibrated(p)?);
        model.burn_in = burn_in;
        boxed(ModelKind::Learning(model), out)
    })
}

/// Full-information economy with nature's state only.
///
/// # Safety
/// As for [`sos_model_learning_new`].
#[no_mangle]
pub unsafe extern "C" fn sos_model_full_information_new(
    params: *const SosParams,
    out: *mut *mut SosModel,
) -> SosStatus {
    guard(|| {
        let p = deref(params, "params")?.to_core()?;
        let model = FiStateModel {
            model: FiModel::new(&p)?,
        };
        boxed(ModelKind::FullInformation(model), out)
    })
}

/// `s_t = phi s_{t-1} + sigma_state e_t`, `r_t = s_t + sigma_obs u_t`,
/// `s_0 ~ N(prior_mean, prior_sd^2)`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sos_model_linear_gaussian_new(
    phi: f64,
    sigma_state: f64,
    sigma_obs: f64,
    prior_mean: f64,
    prior_sd: f64,
    out: *mut *mut SosModel,
) -> SosStatus {
    guard(|| {
        let m = LinearGaussian::new(phi, sigma_state, sigma_obs, prior_mean, prior_sd)?;
        boxed(ModelKind::LinearGaussian(m), out)
    })
}

/// # Safety
/// `model` must come from a `sos_model_*_new` call and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sos_model_free(model: *mut SosModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Simulate `len` observations from the model into `out`.
///
/// # Safety
/// `model` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sos_model_simulate(
    model: *const SosModel,
    len: usize,
    seed: u64,
    out: *mut f64,
) -> SosStatus {
    guard(|| {
        let model = deref(model, "model")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if len == 0 {
            return Err(Error::InvalidArgument("length must be positive".into()).into());
        }
        let returns = match &model.kind {
            ModelKind::Learning(m) => simulate_path(&m.economy, len, seed, None)?.returns,
            ModelKind::FullInformation(m) => fi_simulate(&m.model, len, seed)?.1,
            ModelKind::LinearGaussian(m) => m.simulate(len, seed).1,
        };
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&returns);
        Ok(())
    })
}

/// Exact log-likelihood of `returns` under the full-information economy.
///
/// # Safety
/// `params` must be valid; `returns` must hold `len` doubles; `out` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sos_fi_loglik(
    params: *const SosParams,
    returns: *const f64,
    len: usize,
    out: *mut f64,
) -> SosStatus {
    guard(|| {
        let p = deref(params, "params")?.to_core()?;
        let r = slice(returns, len, "returns")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = fi_loglik(r, &FiModel::new(&p)?)?;
        Ok(())
    })
}

/// Start a filter with `particles` prior draws. The model is copied, so the
/// model handle may be freed afterwards. Uses the Gaussian kernel, the
/// adaptive bandwidth and residual-stratified resampling.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sos_filter_new(
    model: *const SosModel,
    particles: usize,
    seed: u64,
    out: *mut *mut SosFilter,
) -> SosStatus {
    guard(|| {
        let kind = deref(model, "model")?.kind.clone();
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let owned = Box::new(kind);
        let cfg = FilterConfig::new(particles, 1, seed);
        // SAFETY: the boxed model never moves and outlives the filter, which
        // is dropped first.
        let model_ref: &'static ModelKind = &*(owned.as_ref() as *const ModelKind);
        let filter = match model_ref {
            ModelKind::Learning(m) => FilterKind::Learning(CoreFilter::new(m, cfg)?),
            ModelKind::FullInformation(m) => FilterKind::FullInformation(CoreFilter::new(m, cfg)?),
            ModelKind::LinearGaussian(m) => FilterKind::LinearGaussian(CoreFilter::new(m, cfg)?),
        };
        *out = Box::into_raw(Box::new(SosFilter {
            filter,
            loglik: 0.0,
            _model: owned,
        }));
        Ok(())
    })
}

fn step_with<M: StateModel>(
    f: &mut CoreFilter<'static, M>,
    obs: f64,
    summary: MomentFn<'_, M::State>,
) -> sos_core::Result<SosStepRecord> {
    let rec = f.step(&[obs], &[summary])?;
    Ok(SosStepRecord {
        log_increment: rec.log_increment,
        bandwidth: rec.bandwidth,
        ess: rec.ess,
        state_mean: rec.moments[0],
    })
}

/// Assimilate one observation. `out` may be null.
///
/// # Safety
/// `filter` must be a live handle; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sos_filter_step(
    filter: *mut SosFilter,
    observation: f64,
    out: *mut SosStepRecord,
) -> SosStatus {
    guard(|| {
        let h = filter.as_mut().ok_or(Failure::Null("filter"))?;
        let rec = match &mut h.filter {
            FilterKind::Learning(f) => {
                let coeffs = f.model().economy.coefficients();
                let q =
                    move |s: &sos_core::economy::EconomyState| price_dividend(&s.belief, coeffs);
                step_with(f, observation, &q)?
            }
            FilterKind::FullInformation(f) => {
                let coeffs = f.model().model.economy().coefficients();
                let q = move |s: &usize| coeffs[*s];
                step_with(f, observation, &q)?
            }
            FilterKind::LinearGaussian(f) => step_with(f, observation, &|s: &f64| *s)?,
        };
        h.loglik += rec.log_increment;
        if !out.is_null() {
            *out = rec;
        }
        Ok(())
    })
}

/// Log-likelihood accumulated over all steps so far.
///
/// # Safety
/// `filter` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sos_filter_loglik(filter: *const SosFilter, out: *mut f64) -> SosStatus {
    guard(|| {
        let h = deref(filter, "filter")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = h.loglik;
        Ok(())
    })
}

/// Number of observations assimilated; 0 for a null handle.
///
/// # Safety
/// `filter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sos_filter_steps(filter: *const SosFilter) -> usize {
    match filter.as_ref().map(|h| &h.filter) {
        Some(FilterKind::Learning(f)) => f.steps_done(),
        Some(FilterKind::FullInformation(f)) => f.steps_done(),
        Some(FilterKind::LinearGaussian(f)) => f.steps_done(),
        None => 0,
    }
}

fn var_with<M: StateModel>(
    f: &CoreFilter<'static, M>,
    horizon: usize,
    level: f64,
    paths: usize,
    seed: u64,
) -> sos_core::Result<f64> {
    let cloud: Vec<M::State> = f.particles().cloned().collect();
    let v = model_var(
        f.model(),
        &cloud,
        &f.history(),
        horizon,
        level,
        paths,
        seed,
        f.steps_done(),
    )?;
    Ok(v.value)
}

/// Value-at-risk of the `horizon`-period return at tail probability `level`,
/// from `paths_per_particle` simulated paths per particle. Reported as a
/// positive loss.
///
/// # Safety
/// `filter` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sos_filter_var(
    filter: *const SosFilter,
    horizon: usize,
    level: f64,
    paths_per_particle: usize,
    seed: u64,
    out: *mut f64,
) -> SosStatus {
    guard(|| {
        let h = deref(filter, "filter")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = match &h.filter {
            FilterKind::Learning(f) => var_with(f, horizon, level, paths_per_particle, seed)?,
            FilterKind::FullInformation(f) => {
                var_with(f, horizon, level, paths_per_particle, seed)?
            }
            FilterKind::LinearGaussian(f) => var_with(f, horizon, level, paths_per_particle, seed)?,
        };
        Ok(())
    })
}

/// # Safety
/// `filter` must come from [`sos_filter_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sos_filter_free(filter: *mut SosFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}
