use assc_transport::config::Config;
use assc_transport::controller::*;
use assc_transport::dynamics::{default_c0, ErrorState};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn params() -> AsscParams {
    AsscParams { k: 10.0, u_p: 20.0, u_n: 0.0, phi_p: 4.0, phi_0: 1.0, anti_windup: None }
}

/// Composite Simpson rule.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn storage_matches_quadrature() {
    let p = params();
    for &ur in &[0.0, 3.0, 12.5, 20.0] {
        for &phi in &[-3.0, -0.5, 0.0, 0.7, 2.0, 3.99, 4.0, 6.5] {
            let v = storage_value(&[phi], &[ur], &p, 2).unwrap();
            // Split at the kinks so Simpson is exact on each linear piece.
            let (lo, hi) = (phi.min(0.0), phi.max(0.0));
            let mut knots = vec![lo, hi];
            knots.extend([0.0, p.phi_p].into_iter().filter(|&k| k > lo && k < hi));
            knots.sort_by(f64::total_cmp);
            let integral: f64 = knots.windows(2).map(|w| simpson(|s| switching(s, &p) - ur, w[0], w[1], 64)).sum();
            let want = phi.signum() * integral / (2.0 * p.k);
            assert!((v - want).abs() < 1e-12 * want.abs().max(1.0), "phi {phi} ur {ur}: {v} vs {want}");
        }
    }
}

#[test]
fn storage_is_minimal_at_the_stationary_point() {
    let p = params();
    for &phi_star in &[0.5, 1.0, 2.0, 3.5] {
        let ur = switching(phi_star, &p);
        let v_star = storage_value(&[phi_star], &[ur], &p, 2).unwrap();
        for i in 0..=400 {
            let phi = -4.0 + i as f64 * 0.03;
            let v = storage_value(&[phi], &[ur], &p, 2).unwrap();
            assert!(v - v_star >= -1e-12, "phi {phi}, phi* {phi_star}: {v} < {v_star}");
        }
    }
}

#[test]
fn storage_rejects_out_of_range_stationary_input() {
    assert!(storage_value(&[1.0], &[-0.1], &params(), 2).is_err());
    assert!(storage_value(&[1.0, 2.0], &[1.0], &params(), 2).is_err());
}

#[test]
fn estimator_tracks_a_rate_ramp() {
    for &(cutoff, dt) in &[(20.0, 0.005), (20.0, 0.001), (5.0, 0.005)] {
        let slope = [1.5, -0.3, 9.81, 0.02];
        let mut e = AccelEstimator::new(cutoff);
        let tau = 1.0 / (2.0 * std::f64::consts::PI * cutoff);
        let steps = (5.0 * tau / dt).ceil() as usize;
        let mut est = [0.0; 4];
        for k in 0..=steps + 1 {
            let t = k as f64 * dt;
            est = e.estimate(slope.map(|a| a * t), dt).unwrap();
        }
        for c in 0..4 {
            assert!((est[c] - slope[c]).abs() <= 0.02 * slope[c].abs(), "cutoff {cutoff} dt {dt}: {} vs {}", est[c], slope[c]);
        }
        // Continuous one-pole step response sampled at the same instants.
        let want = slope[2] * (1.0 - (-((steps + 1) as f64) * dt / tau).exp());
        assert!((est[2] - want).abs() < 1e-9, "{} vs {want}", est[2]);
    }
}

#[test]
fn estimator_settles_on_constant_rates() {
    let mut e = AccelEstimator::new(20.0);
    for k in 0..100 {
        let t = k as f64 * 0.005;
        e.estimate([t, 2.0 * t, 0.0, 0.0], 0.005).unwrap();
    }
    let mut last = [1.0; 4];
    for _ in 0..200 {
        last = e.estimate([0.5, 1.0, 0.0, 0.0], 0.005).unwrap();
    }
    assert!(last.iter().all(|a| a.abs() < 1e-12));
    assert!(e.estimate([0.0; 4], 0.0).is_err());
}

#[test]
fn assc_update_examples() {
    assert_eq!(assc_update(1.3, 0.0, 10.0, 0.005), 1.3);
    assert!((assc_update(1.0, 0.2, 10.0, 0.005) - 0.99).abs() < 1e-15);
    assert!(assc_update(1.0, 0.1, 10.0, 0.005) < 1.0);
}

#[test]
fn eta_reduces_to_weighted_state_without_acceleration_term() {
    let cfg = ControllerConfig {
        f: DMatrix::zeros(4, 12),
        g: DMatrix::identity(4, 4),
        c0: default_c0(),
        d0: DMatrix::zeros(4, 4),
        d0_hat: DMatrix::zeros(4, 4),
        feedback_enabled: false,
        dt_c: 0.005,
        accel_cutoff_hz: 20.0,
    };
    assert_eq!(compute_eta(&ErrorState::zeros(), &[0.0; 4], &[0.0; 4], &cfg), [0.0; 4]);
    let xi = ErrorState::from_fn(|i, _| i as f64 * 0.1 - 0.4);
    let eta = compute_eta(&xi, &[3.0, 1.0, -2.0, 0.5], &[0.0; 4], &cfg);
    let want = default_c0() * nalgebra::DVector::from_column_slice(xi.as_slice());
    for q in 0..4 {
        assert!((eta[q] - want[q]).abs() < 1e-15);
    }
}

#[test]
fn robot_command_without_feedback_uses_switching_only() {
    let cfg = Config::builtin("prototype-decentralized").unwrap();
    let layout = cfg.layout().unwrap();
    let ccfg = cfg.controller_config(None, false).unwrap();
    let mut p = cfg.assc_params();
    p.phi_0 = -1.0;
    let mut st = RobotControllerState::new(0, &p, &ccfg);
    let cmd = robot_command(&ErrorState::zeros(), [0.0; 4], &mut st, &ccfg, &p, layout.u_max).unwrap();
    assert_eq!(cmd.thrust, 0.0);
    assert_eq!(cmd.u_f, 0.0);

    let p = cfg.assc_params();
    let mut st = RobotControllerState::new(2, &p, &ccfg);
    let cmd = robot_command(&ErrorState::zeros(), [0.0; 4], &mut st, &ccfg, &p, layout.u_max).unwrap();
    assert_eq!(cmd.thrust, switching(p.phi_0, &p));
    assert_eq!(st.phi, p.phi_0);
}

#[test]
fn thrust_is_clamped_to_rotor_limit() {
    let cfg = Config::builtin("prototype-decentralized").unwrap();
    let ccfg = cfg.controller_config(None, false).unwrap();
    let mut p = cfg.assc_params();
    p.phi_0 = 2.0 * p.phi_p;
    let mut st = RobotControllerState::new(1, &p, &ccfg);
    let cmd = robot_command(&ErrorState::zeros(), [0.0; 4], &mut st, &ccfg, &p, 10.0).unwrap();
    assert_eq!(cmd.u_s, p.u_p);
    assert_eq!(cmd.thrust, 10.0);
}

#[test]
fn anti_windup_clamps_phi() {
    let cfg = Config::builtin("prototype-decentralized").unwrap();
    let ccfg = cfg.controller_config(None, false).unwrap();
    let mut p = cfg.assc_params();
    p.anti_windup = Some((0.0, 4.0));
    let mut st = RobotControllerState::new(0, &p, &ccfg);
    let mut xi = ErrorState::zeros();
    xi[8] = 100.0;
    for _ in 0..100 {
        robot_command(&xi, [0.0; 4], &mut st, &ccfg, &p, 14.2).unwrap();
    }
    assert_eq!(st.phi, 0.0);
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(AsscParams { k: 0.0, ..params() }.validate().is_err());
    assert!(AsscParams { u_n: 30.0, ..params() }.validate().is_err());
    assert!(AsscParams { phi_p: -1.0, ..params() }.validate().is_err());
    assert!(AsscParams { anti_windup: Some((2.0, 1.0)), ..params() }.validate().is_err());
    assert!(params().validate().is_ok());
}

proptest! {
    #[test]
    fn switching_is_monotone_and_bounded(a in -20.0..20.0f64, b in -20.0..20.0f64, u_p in 1.0..30.0f64, phi_p in 0.1..10.0f64) {
        let p = AsscParams { u_p, phi_p, ..params() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(switching(lo, &p) <= switching(hi, &p));
        for x in [a, b] {
            let d = switching(x, &p);
            prop_assert!(d >= p.u_n && d <= p.u_p);
        }
    }

    #[test]
    fn storage_is_additive_over_robots(phis in prop::collection::vec(-5.0..8.0f64, 8), ur in 0.0..20.0f64) {
        let p = params();
        let total = storage_value(&phis, &[ur; 8], &p, 2).unwrap();
        let parts: f64 = phis.iter().map(|&x| storage_value(&[x], &[ur], &p, 2).unwrap()).sum();
        prop_assert!((total - parts).abs() <= 1e-12 * parts.abs().max(1.0));
    }
}
