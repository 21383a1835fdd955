use std::ffi::CStr;
use std::ptr;

use sos_core::economy::StructuralParams;
use sos_core::fi::{fi_loglik, fi_simulate, FiModel, FiStateModel};
use sos_core::filter::{run_filter, FilterConfig};
use sos_core::linear_gaussian::LinearGaussian;
use sos_ffi::*;

fn lg_handle() -> *mut SosModel {
    let mut m = ptr::null_mut();
    let status = unsafe { sos_model_linear_gaussian_new(0.9, 0.5, 1.0, 0.0, 1.0, &mut m) };
    assert_eq!(status, SosStatus::Ok);
    m
}

fn run(
    model: *const SosModel,
    obs: &[f64],
    particles: usize,
    seed: u64,
) -> (f64, Vec<SosStepRecord>) {
    let mut f = ptr::null_mut();
    unsafe {
        assert_eq!(
            sos_filter_new(model, particles, seed, &mut f),
            SosStatus::Ok
        );
        let mut records = Vec::new();
        for &r in obs {
            let mut rec = SosStepRecord::default();
            assert_eq!(sos_filter_step(f, r, &mut rec), SosStatus::Ok);
            records.push(rec);
        }
        assert_eq!(sos_filter_steps(f), obs.len());
        let mut ll = 0.0;
        assert_eq!(sos_filter_loglik(f, &mut ll), SosStatus::Ok);
        sos_filter_free(f);
        (ll, records)
    }
}

#[test]
fn linear_gaussian_filter_matches_library() {
    let m = lg_handle();
    let mut obs = vec![0.0; 40];
    assert_eq!(
        unsafe { sos_model_simulate(m, 40, 5, obs.as_mut_ptr()) },
        SosStatus::Ok
    );
    let core = LinearGaussian::new(0.9, 0.5, 1.0, 0.0, 1.0).unwrap();
    assert_eq!(obs, core.simulate(40, 5).1);

    let (ll, records) = run(m, &obs, 2_000, 11);
    let id = |s: &f64| *s;
    let lib = run_filter(&core, &obs, &FilterConfig::new(2_000, 1, 11), &[&id]).unwrap();
    assert_eq!(ll, lib.loglik);
    for (rec, step) in records.iter().zip(&lib.steps) {
        assert_eq!(rec.log_increment, step.log_increment);
        assert_eq!(rec.state_mean, step.moments[0]);
    }
    unsafe { sos_model_free(m) };
}

#[test]
fn full_information_model_round_trip() {
    let mut p = SosParams {
        m0: 0.0,
        gamma_kbar: 0.0,
        b: 0.0,
        sigma_delta: 0.0,
        kbar: 0,
        g_c: 0.0,
        g_d: 0.0,
        r_f: 0.0,
        sigma_c: 0.0,
        sigma_d_bar: 0.0,
        rho_cd: 0.0,
        q_bar: 0.0,
    };
    assert_eq!(
        unsafe { sos_params_daily_calibration(2, &mut p) },
        SosStatus::Ok
    );
    let core = StructuralParams::daily_calibration(2);
    assert_eq!(p.m0, core.m0);
    assert_eq!(p.kbar, 2);

    let fi = FiModel::new(&core).unwrap();
    let (_, returns) = fi_simulate(&fi, 300, 3).unwrap();
    let mut ll = 0.0;
    assert_eq!(
        unsafe { sos_fi_loglik(&p, returns.as_ptr(), returns.len(), &mut ll) },
        SosStatus::Ok
    );
    assert_eq!(ll, fi_loglik(&returns, &fi).unwrap());

    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { sos_model_full_information_new(&p, &mut m) },
        SosStatus::Ok
    );
    let mut sim = vec![0.0; 300];
    assert_eq!(
        unsafe { sos_model_simulate(m, 300, 3, sim.as_mut_ptr()) },
        SosStatus::Ok
    );
    assert_eq!(sim, returns);

    let mut f = ptr::null_mut();
    assert_eq!(
        unsafe { sos_filter_new(m, 1_000, 8, &mut f) },
        SosStatus::Ok
    );
    // The filter owns a copy of the model.
    unsafe { sos_model_free(m) };
    for &r in &returns {
        assert_eq!(
            unsafe { sos_filter_step(f, r, ptr::null_mut()) },
            SosStatus::Ok
        );
    }
    let mut sos_ll = 0.0;
    assert_eq!(unsafe { sos_filter_loglik(f, &mut sos_ll) }, SosStatus::Ok);
    let state = FiStateModel { model: fi };
    let lib = run_filter(&state, &returns, &FilterConfig::new(1_000, 1, 8), &[]).unwrap();
    assert_eq!(sos_ll, lib.loglik);

    let mut var1 = 0.0;
    let mut var5 = 0.0;
    unsafe {
        assert_eq!(sos_filter_var(f, 1, 0.05, 10, 4, &mut var1), SosStatus::Ok);
        assert_eq!(sos_filter_var(f, 5, 0.05, 10, 4, &mut var5), SosStatus::Ok);
    }
    assert!(var1 > 0.0 && var5 > var1, "{var1} {var5}");
    unsafe { sos_filter_free(f) };
}

#[test]
fn learning_model_steps() {
    let mut p = unsafe { std::mem::zeroed::<SosParams>() };
    assert_eq!(
        unsafe { sos_params_daily_calibration(2, &mut p) },
        SosStatus::Ok
    );
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { sos_model_learning_new(&p, 50, &mut m) },
        SosStatus::Ok
    );
    let mut obs = vec![0.0; 20];
    assert_eq!(
        unsafe { sos_model_simulate(m, 20, 1, obs.as_mut_ptr()) },
        SosStatus::Ok
    );
    let (ll, records) = run(m, &obs, 500, 2);
    assert!(ll.is_finite());
    assert!(records
        .iter()
        .all(|r| r.state_mean > 0.0 && r.ess > 0.0 && r.bandwidth > 0.0));
    unsafe { sos_model_free(m) };
}

#[test]
fn errors_carry_status_and_message() {
    let m = lg_handle();
    let mut f = ptr::null_mut();
    unsafe {
        assert_eq!(sos_filter_new(m, 0, 1, &mut f), SosStatus::Config);
        assert!(f.is_null());
        let msg = CStr::from_ptr(sos_last_error())
            .to_str()
            .unwrap()
            .to_owned();
        assert!(!msg.is_empty());

        assert_eq!(sos_filter_new(m, 100, 1, &mut f), SosStatus::Ok);
        assert!(CStr::from_ptr(sos_last_error()).to_bytes().is_empty());
        let mut v = 0.0;
        assert_eq!(sos_filter_var(f, 1, 1.5, 10, 1, &mut v), SosStatus::Config);
        assert_eq!(
            sos_filter_step(ptr::null_mut(), 0.0, ptr::null_mut()),
            SosStatus::NullPointer
        );
        assert_eq!(
            sos_fi_loglik(ptr::null(), ptr::null(), 0, &mut v),
            SosStatus::NullPointer
        );
        assert_eq!(sos_filter_steps(ptr::null()), 0);
        sos_filter_free(f);
        sos_filter_free(ptr::null_mut());
        sos_model_free(m);
        sos_model_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sos_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
