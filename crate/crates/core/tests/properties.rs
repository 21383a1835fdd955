mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use sos_core::economy::{
    compute_return, price_dividend, simulate_path_detailed, transition_matrix, transition_nature,
    update_belief, Economy, StructuralParams,
};
use sos_core::fi::{fi_density, fi_filter, FiModel};
use sos_core::filter::{compute_weights, resample_indices, ResamplingScheme};
use sos_core::ii::{newey_west, AuxKind};
use sos_core::io::{read_returns, write_returns, ReturnSeries};
use sos_core::kernels::{BandwidthPolicy, Kernel};
use sos_core::linear_gaussian::LinearGaussian;
use sos_core::risk::{failure_rate, model_var, var_from_sample, VarForecast};
use sos_core::rng::{Domain, Stream};

use common::{enumerate_paths, hamilton_permuted};

const SCHEMES: [ResamplingScheme; 4] = [
    ResamplingScheme::Multinomial,
    ResamplingScheme::Stratified,
    ResamplingScheme::Residual,
    ResamplingScheme::ResidualStratified,
];

/// `∫ f` over the real line by Simpson's rule after `u = tan θ`.
fn integrate_line(f: impl Fn(f64) -> f64) -> f64 {
    let n = 20_000;
    let (a, b) = (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
    let step = (b - a) / n as f64;
    let g = |k: usize| {
        let th = a + k as f64 * step;
        if k == 0 || k == n {
            return 0.0;
        }
        let c = th.cos();
        f(th.tan()) / (c * c)
    };
    let mut s = g(0) + g(n);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * g(k);
    }
    s * step / 3.0
}

fn weights_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..60)
        .prop_filter("positive mass", |w| w.iter().sum::<f64>() > 1e-3)
}

fn params_strategy() -> impl Strategy<Value = StructuralParams> {
    (
        1usize..=4,
        1.05f64..1.9,
        0.01f64..0.9,
        1.1f64..6.0,
        0.05f64..5.0,
    )
        .prop_map(|(kbar, m0, g, b, sd)| {
            let mut p = StructuralParams::daily_calibration(kbar);
            p.m0 = m0;
            p.gamma_kbar = g;
            p.b = b;
            p.sigma_delta = sd;
            p
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scaled_kernel_has_unit_mass(h in 0.05f64..20.0, cauchy in any::<bool>()) {
        let k = if cauchy { Kernel::quasi_cauchy(1) } else { Kernel::gaussian(1) };
        let mass = integrate_line(|r| k.eval_scaled(h, &[r]).unwrap());
        prop_assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    }

    #[test]
    fn kernels_are_symmetric(u in -50.0f64..50.0) {
        for k in [Kernel::gaussian(1), Kernel::quasi_cauchy(1)] {
            prop_assert_eq!(k.eval(&[u]), k.eval(&[-u]));
        }
        let k2 = Kernel::gaussian(2);
        prop_assert_eq!(k2.eval(&[u, 0.5 * u]), k2.eval(&[-u, -0.5 * u]));
    }

    #[test]
    fn power_law_bandwidth_rates(h1 in 0.01f64..10.0, e in -0.99f64..-0.01) {
        let policy = BandwidthPolicy::power_law_with_exponent(h1, e, 1).unwrap();
        let mut prev_h = f64::INFINITY;
        let mut prev_nh = 0.0;
        for k in 1..=9 {
            let n = 10usize.pow(k);
            let h = policy.bandwidth(n, None).unwrap();
            prop_assert!(h < prev_h);
            prop_assert!(n as f64 * h > prev_nh);
            prev_h = h;
            prev_nh = n as f64 * h;
        }
    }

    #[test]
    fn weights_normalized(
        pseudo in prop::collection::vec(-5.0f64..5.0, 1..200),
        obs in -5.0f64..5.0,
        h in 0.05f64..3.0,
    ) {
        let w = compute_weights(&pseudo, &[obs], &Kernel::gaussian(1), h, 1).unwrap();
        prop_assert!((w.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.probs.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn stratified_schemes_bound_counts(w in weights_strategy(), seed in any::<u64>()) {
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / total).collect();
        let n = p.len();
        {
            let idx = resample_indices(&p, ResamplingScheme::ResidualStratified, &mut Stream::new(seed, Domain::Test, 0, 0)).unwrap();
            prop_assert_eq!(idx.len(), n);
            let mut counts = vec![0usize; n];
            idx.iter().for_each(|&i| counts[i] += 1);
            for (c, pi) in counts.iter().zip(&p) {
                let floor = (n as f64 * pi).floor() as usize;
                prop_assert!(*c >= floor && *c <= floor + 2, "count {c}, floor {floor}");
            }
        }
        let idx = resample_indices(&p, ResamplingScheme::Stratified, &mut Stream::new(seed, Domain::Test, 0, 1)).unwrap();
        let mut counts = vec![0usize; n];
        idx.iter().for_each(|&i| counts[i] += 1);
        for (c, pi) in counts.iter().zip(&p) {
            let np = n as f64 * pi;
            prop_assert!(*c as f64 >= np.floor() - 1.0 && *c as f64 <= np.ceil() + 1.0);
        }
    }

    #[test]
    fn transition_matrix_stochastic_and_symmetric(p in params_strategy()) {
        let a = transition_matrix(&p);
        for i in 0..a.nrows() {
            prop_assert!((a.row(i).sum() - 1.0).abs() < 1e-12);
            for j in 0..a.ncols() {
                prop_assert!((a[(i, j)] - a[(j, i)]).abs() < 1e-15);
                prop_assert!(a[(i, j)] >= 0.0);
            }
        }
    }

    #[test]
    fn belief_stays_on_simplex(p in params_strategy(), seed in any::<u64>()) {
        let econ = Economy::calibrated(p).unwrap();
        let path = simulate_path_detailed(&econ, 50, seed, None).unwrap();
        for b in &path.beliefs {
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(b.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn return_round_trips_dividend_growth(
        x1 in -0.1f64..0.1,
        raw in prop::collection::vec(0.0f64..1.0, 16),
        raw_prev in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let econ = Economy::calibrated(StructuralParams::daily_calibration(3)).unwrap();
        let norm = |v: &[f64]| {
            let s: f64 = v[..8].iter().sum::<f64>() + 1e-9;
            v[..8].iter().map(|x| (x + 1e-9 / 8.0) / s).collect::<Vec<_>>()
        };
        let (b, bp) = (norm(&raw), norm(&raw_prev));
        let c = econ.coefficients();
        let r = compute_return(x1, &b, &bp, c, econ.params());
        let q = price_dividend(&b, c);
        let qp = price_dividend(&bp, c);
        let back = r - ((1.0 + q) / qp).ln() + econ.params().r_f;
        prop_assert!((back - x1).abs() < 1e-12);
    }

    #[test]
    fn fi_probabilities_on_simplex(returns in prop::collection::vec(-0.08f64..0.08, 1..80), kbar in 1usize..=3) {
        let model = FiModel::new(&StructuralParams::daily_calibration(kbar)).unwrap();
        let out = fi_filter(&returns, &model).unwrap();
        for t in 0..returns.len() {
            let p = out.probs_at(t);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn fi_loglik_invariant_to_state_order(
        returns in prop::collection::vec(-0.03f64..0.03, 1..30),
        perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let model = FiModel::new(&StructuralParams::daily_calibration(2)).unwrap();
        let a = transition_matrix(model.params());
        let dens = |i, j, r| fi_density(i, j, r, &model);
        let pi0 = [0.25; 4];
        let permuted = hamilton_permuted(&pi0, &a, &returns, dens, &perm);
        let identity = hamilton_permuted(&pi0, &a, &returns, dens, &[0, 1, 2, 3]);
        let lib = fi_filter(&returns, &model).unwrap().loglik;
        prop_assert!((permuted - identity).abs() < 1e-9 * identity.abs().max(1.0));
        prop_assert!((lib - identity).abs() < 1e-9 * identity.abs().max(1.0));
    }

    #[test]
    fn newey_west_symmetric_psd(
        cols in 1usize..4,
        raw in prop::collection::vec(-3.0f64..3.0, 120),
        tau in 0usize..12,
    ) {
        let t = raw.len() / cols;
        let psi = DMatrix::from_row_slice(t, cols, &raw[..t * cols]);
        let s = newey_west(&psi, tau).unwrap();
        prop_assert!((&s - s.transpose()).abs().max() < 1e-14);
        let min_eig = s.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-10, "min eigenvalue {min_eig}");
    }

    #[test]
    fn median_estimating_function_balances(sample in prop::collection::vec(-1.0f64..1.0, 1..300)) {
        let eta = AuxKind::Median.statistic(&sample);
        let total: f64 = sample.iter().map(|&r| AuxKind::Median.estimating_fn(r, eta)).sum();
        prop_assert!([-1.0, 0.0, 1.0].contains(&total), "sum {total}");
    }

    #[test]
    fn var_shifts_against_constant(c in -1.0f64..1.0, raw in prop::collection::vec(-0.1f64..0.1, 400)) {
        let shifted: Vec<f64> = raw.iter().map(|x| x + c).collect();
        let a = var_from_sample(&raw, 0.25).unwrap();
        let b = var_from_sample(&shifted, 0.25).unwrap();
        prop_assert!((b - (a - c)).abs() < 1e-12);
    }

    #[test]
    fn returns_csv_round_trip(values in prop::collection::vec(-1.0f64..1.0, 1..100)) {
        let series = ReturnSeries::with_business_days(sos_core::io::default_start_date(), values).unwrap();
        let mut buf = Vec::new();
        write_returns(&mut buf, &series).unwrap();
        let back = read_returns(buf.as_slice()).unwrap();
        prop_assert_eq!(&back.dates, &series.dates);
        for (x, y) in back.returns.iter().zip(&series.returns) {
            prop_assert!((x - y).abs() <= 1e-15);
        }
    }
}

#[test]
fn resampling_is_unbiased_for_every_scheme() {
    let raw = [0.013, 0.2, 0.07, 0.33, 0.001, 0.12, 0.09, 0.176];
    let total: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let n = p.len() as f64;
    let reps = 10_000;
    for scheme in SCHEMES {
        let mut sum = vec![0.0; p.len()];
        let mut sq = vec![0.0; p.len()];
        for r in 0..reps {
            let idx =
                resample_indices(&p, scheme, &mut Stream::new(17, Domain::Test, 1, r)).unwrap();
            let mut counts = vec![0.0; p.len()];
            idx.iter().for_each(|&i| counts[i] += 1.0);
            for k in 0..p.len() {
                sum[k] += counts[k];
                sq[k] += counts[k] * counts[k];
            }
        }
        for k in 0..p.len() {
            let m = sum[k] / reps as f64;
            let var = (sq[k] / reps as f64 - m * m).max(1e-12);
            let se = (var / reps as f64).sqrt();
            assert!(
                (m - n * p[k]).abs() <= 4.0 * se + 1e-12,
                "{scheme:?} particle {k}: mean {m}, target {}",
                n * p[k]
            );
        }
    }
}

#[test]
fn belief_simplex_over_a_million_updates() {
    let econ = Economy::calibrated(StructuralParams::daily_calibration(3)).unwrap();
    let path = simulate_path_detailed(&econ, 1_000_000, 5, None).unwrap();
    let mut worst: f64 = 0.0;
    for b in &path.beliefs {
        assert!(b.iter().all(|v| *v >= 0.0));
        worst = worst.max((b.iter().sum::<f64>() - 1.0).abs());
    }
    assert!(worst < 1e-12, "worst simplex error {worst}");
}

/// Posterior from dividend and consumption growth only.
fn two_signal_update(prev: &[f64], x: &[f64], p: &StructuralParams, a: &DMatrix<f64>) -> Vec<f64> {
    let d = prev.len();
    let mut post = vec![0.0; d];
    for j in 0..d {
        let pred: f64 = (0..d).map(|i| a[(i, j)] * prev[i]).sum();
        let s = p.sigma_d(j);
        let (v1, v2, cov) = (s * s, p.sigma_c * p.sigma_c, p.rho_cd * s * p.sigma_c);
        let det = v1 * v2 - cov * cov;
        let (e1, e2) = (x[0] - (p.g_d - 0.5 * s * s), x[1] - p.g_c);
        let quad = (v2 * e1 * e1 - 2.0 * cov * e1 * e2 + v1 * e2 * e2) / det;
        post[j] = pred * (-0.5 * quad).exp() / det.sqrt();
    }
    let total: f64 = post.iter().sum();
    post.iter().map(|v| v / total).collect()
}

/// Supremum belief gap between the full updater and the two-signal oracle.
fn noisy_reading_gap(sigma_delta: f64) -> f64 {
    let mut p = StructuralParams::daily_calibration(3);
    p.sigma_delta = sigma_delta;
    let econ = Economy::calibrated(p).unwrap();
    let a = transition_matrix(econ.params());
    let path = simulate_path_detailed(&econ, 2_000, 11, None).unwrap();
    let mut lib = econ.uniform_belief().to_vec();
    let mut oracle = lib.clone();
    let mut worst: f64 = 0.0;
    for x in &path.signals {
        lib = update_belief(&lib, x, &econ).unwrap().to_vec();
        oracle = two_signal_update(&oracle, x, econ.params(), &a);
        for (u, v) in lib.iter().zip(&oracle) {
            worst = worst.max((u - v).abs());
        }
    }
    worst
}

#[test]
fn very_noisy_readings_are_ignored() {
    let gaps: Vec<f64> = [1e3, 1e4, 1e5]
        .iter()
        .map(|&s| noisy_reading_gap(s))
        .collect();
    println!("supremum gaps {gaps:?}");
    assert!(gaps[2] < gaps[1] && gaps[1] < gaps[0]);
    assert!(gaps[1] < 1e-3, "gap at 1e4: {}", gaps[1]);
}

#[test]
fn nature_is_uniform_in_the_long_run() {
    let econ = Economy::calibrated(StructuralParams::daily_calibration(3)).unwrap();
    let d = econ.states();
    let (t, batch) = (1_000_000usize, 10_000usize);
    let mut rng = Stream::new(23, Domain::Test, 0, 0);
    let mut j = 0;
    let mut batch_freq = vec![vec![0.0; d]; t / batch];
    for step in 0..t {
        j = transition_nature(j, &econ, &mut rng);
        batch_freq[step / batch][j] += 1.0 / batch as f64;
    }
    let nb = batch_freq.len() as f64;
    for s in 0..d {
        let xs: Vec<f64> = batch_freq.iter().map(|b| b[s]).collect();
        let m = xs.iter().sum::<f64>() / nb;
        let se = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nb - 1.0) / nb).sqrt();
        assert!(
            (m - 1.0 / d as f64).abs() < 4.0 * se,
            "state {s}: frequency {m} (s.e. {se})"
        );
    }
}

#[test]
fn hamilton_filter_matches_enumeration_on_four_states() {
    let model = FiModel::new(&StructuralParams::daily_calibration(2)).unwrap();
    let a = transition_matrix(model.params());
    let r = [0.01, -0.02, 0.004, 0.0];
    let brute = enumerate_paths(&[0.25; 4], &a, &r, |i, j, x| fi_density(i, j, x, &model));
    assert!((fi_filter(&r, &model).unwrap().loglik - brute).abs() < 1e-10);
}

#[test]
fn true_model_var_has_nominal_coverage() {
    let model = LinearGaussian::new(0.0, 0.01, 0.005, 0.0, 0.01).unwrap();
    let n = 10_000;
    let (_, realized) = model.simulate(n, 99);
    let particles = vec![0.0; 200];
    let p = 0.05;
    let hist: Vec<f64> = Vec::new();
    let history = sos_core::filter::History::new(&hist, 1);
    let forecasts: Vec<VarForecast> = (0..n)
        .map(|t| model_var(&model, &particles, &history, 1, p, 10, 3, t).unwrap())
        .collect();
    let report = failure_rate(&realized, &forecasts).unwrap();
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!(
        (report.all.failure_rate - p).abs() < 4.0 * se,
        "failure rate {}",
        report.all.failure_rate
    );
}
