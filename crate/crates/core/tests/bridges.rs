mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdeinfer::bridge::{
    lc_propose, mb_euler_propose_point, mb_milstein_calibrate, mb_milstein_unnorm_logdensity, propose_segment,
    EulerBridge, MilsteinBridge,
};
use sdeinfer::mcmc::{choose_update_blocks, path_update, stream_rng, Stream};
use sdeinfer::quadrature::adaptive_gauss_legendre;
use sdeinfer::{
    run_chain, AugmentedPath, BridgeConfig, Cir, CirParams, DiffusionModel, Gbm, GbmParams, McmcConfig, MethodCombo,
    Observation, PriorSpec, Scheme,
};
use statrs::distribution::{ContinuousCDF, Normal};

use common::{bridge_ks, ks_from_cdf, ks_two_sample};

const MB_MIL_MIL: MethodCombo = MethodCombo::ALL[7];
const MB_EUL_EUL: MethodCombo = MethodCombo::ALL[4];

fn gbm(alpha: f64, sigma2: f64) -> GbmParams {
    GbmParams { alpha, sigma: sigma2.sqrt() }
}

#[test]
fn gbm_feasible_set_matches_factor_supports() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let p = gbm(rng.random_range(-1.0..2.0), rng.random_range(0.1..4.0));
        let xl: f64 = rng.random_range(20.0..200.0);
        let xr: f64 = rng.random_range(20.0..200.0);
        let dk: f64 = rng.random_range(0.005..0.6);
        let dp: f64 = rng.random_range(0.005..0.6);
        let c = p.alpha - 0.5 * p.sigma * p.sigma;
        let set = Gbm.bridge_feasible_set(&p, xl, xr, dk, dp);
        for i in 0..400 {
            let y = 0.01 + 600.0 * i as f64 / 400.0;
            // y ≥ x_l·κ(Δt_k) for the first factor, x_r ≥ y·κ(Δ₊) for the second
            let a = y - xl * (0.5 + c * dk);
            let b = xr - y * (0.5 + c * dp);
            if a.abs() < 1e-9 * y || b.abs() < 1e-9 * y {
                continue;
            }
            let inside = a > 0.0 && b > 0.0;
            assert_eq!(set.contains(y), inside, "{p:?} {xl} {xr} {dk} {dp} y={y}");
            let lf = mb_milstein_unnorm_logdensity(&Gbm, &p, y, xl, xr, dk, dp);
            assert_eq!(lf.is_finite(), inside, "y={y} lf={lf}");
        }
    }
}

#[test]
fn cir_feasible_set_matches_factor_supports() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let p = CirParams {
            alpha: rng.random_range(0.2..3.0),
            beta: rng.random_range(0.2..3.0),
            sigma: rng.random_range(0.1..1.5),
        };
        let m = Cir::full();
        let xl: f64 = rng.random_range(0.05..5.0);
        let xr: f64 = rng.random_range(0.05..5.0);
        let dk: f64 = rng.random_range(0.005..0.6);
        let dp: f64 = rng.random_range(0.005..0.6);
        let s2 = p.sigma * p.sigma;
        let set = m.bridge_feasible_set(&p, xl, xr, dk, dp);
        for i in 0..400 {
            let y = 1e-3 + 8.0 * i as f64 / 400.0;
            // each step lands at or above (α(β − from) − σ²/4)·Δ
            let a = y - (p.alpha * (p.beta - xl) - 0.25 * s2) * dk;
            let b = xr - (p.alpha * (p.beta - y) - 0.25 * s2) * dp;
            if a.abs() < 1e-9 || b.abs() < 1e-9 {
                continue;
            }
            let inside = a > 0.0 && b > 0.0;
            assert_eq!(set.contains(y), inside, "{p:?} {xl} {xr} {dk} {dp} y={y}");
            assert_eq!(mb_milstein_unnorm_logdensity(&m, &p, y, xl, xr, dk, dp).is_finite(), inside);
        }
    }
}

#[test]
fn euler_bridge_moments() {
    let p = gbm(1.0, 2.0);
    let dt = 0.02;
    let b = EulerBridge::new(&Gbm, &p, 100.0, 120.0, 0.0, dt, 2.0 * dt);
    assert!((b.mean - 110.0).abs() < 1e-12);
    let var = 0.5 * 2.0 * 100.0f64.powi(2) * dt;
    assert!((b.var - var).abs() < 1e-9 * var);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut n = 0u64;
    let draws: Vec<f64> = (0..1_000_000).map(|_| b.sample(&Gbm, 100, &mut n, &mut rng).unwrap()).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let v = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    assert!((mean / 110.0 - 1.0).abs() < 0.005, "{mean}");
    assert!((v / var - 1.0).abs() < 0.005, "{v}");
}

#[test]
fn euler_bridge_collapses_at_the_right_end() {
    let p = gbm(1.0, 2.0);
    let b = EulerBridge::new(&Gbm, &p, 100.0, 120.0, 0.0, 0.1, 0.1);
    assert_eq!(b.var, 0.0);
    assert_eq!(b.mean, 120.0);
    let mut n = 0;
    assert_eq!(b.sample(&Gbm, 10, &mut n, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), 120.0);
}

#[test]
fn lc_euler_point_law() {
    let p = gbm(1.0, 2.0);
    let dt = 0.01f64;
    let times = [0.0, dt, 2.0 * dt];
    let cfg = BridgeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut draws: Vec<f64> = (0..1_000_000)
        .map(|_| lc_propose(&Gbm, Scheme::Euler, &p, &times, 100.0, &[100.0], &cfg, &mut rng).unwrap().proposed_values[0])
        .collect();
    draws.sort_by(f64::total_cmp);
    let law = Normal::new(100.0 * (1.0 + dt), 100.0 * 2f64.sqrt() * dt.sqrt()).unwrap();
    let cdf: Vec<f64> = draws.iter().map(|&y| law.cdf(y)).collect();
    assert!(ks_from_cdf(&cdf) < 0.005);
}

#[test]
fn single_point_segment_matches_point_operation() {
    let p = gbm(1.0, 2.0);
    let obs = [Observation { time: 0.0, value: 100.0 }, Observation { time: 0.04, value: 104.0 }];
    let path = AugmentedPath::from_observations(&obs, 2).unwrap();
    let cfg = BridgeConfig::default();
    let seg = propose_segment(MB_EUL_EUL, &Gbm, &p, &path, 0, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut n = 0;
    let (y, lq) = mb_euler_propose_point(&Gbm, &p, 100.0, 104.0, 0.0, 0.02, 0.04, &cfg, &mut n, &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    assert_eq!(seg.proposed_values, vec![y]);
    assert_eq!(seg.log_q_forward, lq);
}

struct Setting {
    name: &'static str,
    x_left: f64,
    x_right: f64,
    dt_k: f64,
    dt_plus: f64,
}

fn gbm_settings() -> Vec<(GbmParams, Setting)> {
    let d = 1.0 / 49.0;
    vec![
        (gbm(1.0, 2.0), Setting { name: "gbm m=2", x_left: 100.0, x_right: 112.0, dt_k: d / 2.0, dt_plus: d / 2.0 }),
        (gbm(1.0, 2.0), Setting { name: "gbm m=5 start", x_left: 100.0, x_right: 90.0, dt_k: d / 5.0, dt_plus: 4.0 * d / 5.0 }),
        (gbm(1.0, 2.0), Setting { name: "gbm m=5 end", x_left: 100.0, x_right: 103.0, dt_k: d / 5.0, dt_plus: d / 5.0 }),
        (gbm(1.0, 2.0), Setting { name: "gbm coarse", x_left: 100.0, x_right: 60.0, dt_k: 0.5, dt_plus: 0.5 }),
        (gbm(0.5, 3.0), Setting { name: "gbm half-line", x_left: 50.0, x_right: 80.0, dt_k: 0.1, dt_plus: 0.6 }),
    ]
}

fn check_calibration<M: DiffusionModel>(model: &M, p: &M::Params, s: &Setting) -> MilsteinBridge {
    let cfg = BridgeConfig::default();
    let cal = mb_milstein_calibrate(model, p, s.x_left, s.x_right, s.dt_k, s.dt_plus, true, &cfg)
        .unwrap_or_else(|e| panic!("{}: {e:?}", s.name));
    // truncation ends carry at most 1e-19 of the maximum unless they are domain ends
    let (dom_lo, dom_hi) = cal.frame.domain(&cal.feasible);
    let cut = cal.log_d_max + (1e-19f64).ln();
    if cal.v_lo > dom_lo {
        assert!(cal.frame_logdensity(model, p, cal.v_lo) <= cut, "{}", s.name);
    }
    if cal.v_hi < dom_hi {
        assert!(cal.frame_logdensity(model, p, cal.v_hi) <= cut, "{}", s.name);
    }
    // refinement oracle: the normalised density integrates to 1 at much finer tolerance
    let f = |v: f64| {
        let l = cal.frame_logdensity(model, p, v);
        if l.is_finite() {
            (l - cal.log_norm_const).exp()
        } else {
            0.0
        }
    };
    let v_star = cal.frame.from_y(cal.argmax).clamp(cal.v_lo, cal.v_hi);
    let mass = adaptive_gauss_legendre(f, cal.v_lo, v_star, 1e-13, 45) + adaptive_gauss_legendre(f, v_star, cal.v_hi, 1e-13, 45);
    assert!((mass - 1.0).abs() < 1e-4, "{}: mass {mass}", s.name);
    let fine = BridgeConfig { quad_tolerance: 1e-13, ..cfg };
    let cal_fine = mb_milstein_calibrate(model, p, s.x_left, s.x_right, s.dt_k, s.dt_plus, true, &fine).unwrap();
    assert!((cal_fine.log_norm_const - cal.log_norm_const).abs() < 1e-4, "{}", s.name);
    cal
}

fn check_sampler<M: DiffusionModel>(model: &M, p: &M::Params, s: &Setting, cal: &MilsteinBridge, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (lo, hi) = cal.interval();
    let mut tries = 0usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let (y, lq, t) = cal.sample(model, p, 1_000_000, &mut rng).unwrap();
        assert!(y >= lo && y <= hi, "{}: {y} outside [{lo}, {hi}]", s.name);
        assert!((lq - cal.log_q(model, p, y)).abs() < 1e-12);
        tries += t;
        samples.push(y);
    }
    let ks = bridge_ks(cal, model, p, &samples);
    assert!(ks < 0.005, "{}: KS {ks}", s.name);
    let rate = n as f64 / tries as f64;
    let expected = cal.expected_acceptance();
    assert!((rate / expected - 1.0).abs() < 0.02, "{}: rate {rate} expected {expected}", s.name);
}

#[test]
fn milstein_bridge_calibration_and_sampler_gbm() {
    for (p, s) in gbm_settings() {
        let cal = check_calibration(&Gbm, &p, &s);
        check_sampler(&Gbm, &p, &s, &cal, 1_000_000);
    }
}

#[test]
fn milstein_bridge_calibration_and_sampler_cir() {
    let m = Cir::with_known_alpha(1.0);
    let p = CirParams { alpha: 1.0, beta: 1.0, sigma: 0.5 };
    let d = 1.0 / 49.0;
    let settings = [
        Setting { name: "cir m=2", x_left: 3.0, x_right: 2.9, dt_k: d / 2.0, dt_plus: d / 2.0 },
        Setting { name: "cir m=5", x_left: 1.2, x_right: 1.0, dt_k: d / 5.0, dt_plus: 3.0 * d / 5.0 },
        Setting { name: "cir near zero", x_left: 0.02, x_right: 0.05, dt_k: 0.05, dt_plus: 0.05 },
    ];
    for s in settings {
        let cal = check_calibration(&m, &p, &s);
        check_sampler(&m, &p, &s, &cal, 1_000_000);
    }
}

fn gbm_study_path(m: usize, seed: u64) -> AugmentedPath {
    let p = gbm(1.0, 2.0);
    let mut rng = stream_rng(seed, Stream::Data);
    let obs = sdeinfer::scheme::generate_observations(&Gbm, &p, 100.0, 50, 1.0, sdeinfer::scheme::DataGeneration::Exact, &mut rng)
        .unwrap();
    AugmentedPath::from_observations(&obs, m).unwrap()
}

#[test]
fn matching_bridge_is_exact_for_one_imputed_point() {
    let cfg = BridgeConfig::default();
    let mut path = gbm_study_path(2, 42);
    let mut block_rng = ChaCha8Rng::seed_from_u64(1);
    let mut prop_rng = ChaCha8Rng::seed_from_u64(2);
    let mut acc_rng = ChaCha8Rng::seed_from_u64(3);
    let (mut accepted, mut proposed) = (0, 0);
    for it in 0..300 {
        let p = gbm(0.5 + 0.005 * it as f64, 1.0 + 0.01 * it as f64);
        let blocks = choose_update_blocks(path.len() - 1, 5.0, &mut block_rng);
        let s = path_update(MB_MIL_MIL, &Gbm, &p, &mut path, &blocks, &cfg, &mut prop_rng, &mut acc_rng);
        assert!(s.max_abs_log_ratio < 1e-9, "{}", s.max_abs_log_ratio);
        assert_eq!(s.counters.fallbacks, 0);
        accepted += s.accepted;
        proposed += s.proposed;
    }
    assert_eq!(accepted, proposed);
}

#[test]
fn observations_never_move() {
    let cfg = BridgeConfig::default();
    let p = gbm(1.0, 2.0);
    for combo in MethodCombo::ALL {
        let mut path = gbm_study_path(3, 7);
        let obs = path.observations();
        let mut block_rng = ChaCha8Rng::seed_from_u64(1);
        let mut prop_rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc_rng = ChaCha8Rng::seed_from_u64(3);
        let mut accepted = 0;
        for _ in 0..50 {
            let blocks = choose_update_blocks(path.len() - 1, 5.0, &mut block_rng);
            accepted += path_update(combo, &Gbm, &p, &mut path, &blocks, &cfg, &mut prop_rng, &mut acc_rng).accepted;
        }
        assert!(accepted > 0, "{combo}");
        assert_eq!(path.observations(), obs, "{combo}");
        assert!(path.is_valid(&Gbm));
    }
}

#[test]
fn forced_normalisation_leaves_m2_chain_unchanged() {
    let p = gbm(1.0, 2.0);
    let mut rng = stream_rng(42, Stream::Data);
    let obs = sdeinfer::scheme::generate_observations(&Gbm, &p, 100.0, 50, 1.0, sdeinfer::scheme::DataGeneration::Exact, &mut rng)
        .unwrap();
    let base = McmcConfig { iterations: 2000, m: 2, seed: 3, ..McmcConfig::default() };
    let mut forced = base.clone();
    forced.bridge.always_normalize = true;
    let a = run_chain(MB_MIL_MIL, &Gbm, &PriorSpec::gbm_study(), &obs, &base).unwrap();
    let b = run_chain(MB_MIL_MIL, &Gbm, &PriorSpec::gbm_study(), &obs, &forced).unwrap();
    let (ca, cb) = (a.column(0, 0.1), b.column(0, 0.1));
    let d = ks_two_sample(&ca, &cb);
    let n = ca.len() as f64;
    let lambda = d * (n * n / (2.0 * n)).sqrt();
    let p_value: f64 = (1..100).map(|k| 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp()).sum();
    assert!(d == 0.0 || p_value > 0.05, "D {d} p {p_value}");
    assert_eq!(b.path_accept_rate(), Some(1.0));
}
