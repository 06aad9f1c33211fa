use nalgebra::Matrix4;
use optochaos_core::ansatz::{ansatz_orbit_deviation, solve_ansatz, AnsatzSpec};
use optochaos_core::chaos::{classify_attractor, max_lyapunov, AttractorKind, ClassifySpec, LyapunovSpec};
use optochaos_core::sc::{fixed_points, integrate_sc_with, sc_rhs_real, Sampling, TWO_PI};
use optochaos_core::spectrum::{detect_subharmonic_order, power_spectrum, SpectrumSpec, SubharmonicOrder, DEFAULT_PEAK_THRESHOLD};
use optochaos_core::{ModelParams, ScState};

fn fd_jacobian(y: [f64; 4], params: &ModelParams) -> Matrix4<f64> {
    let h = 1e-6;
    let mut j = Matrix4::zeros();
    for c in 0..4 {
        let (mut up, mut dn) = (y, y);
        up[c] += h;
        dn[c] -= h;
        let (mut fu, mut fd) = ([0.0; 4], [0.0; 4]);
        sc_rhs_real(&up, params, &mut fu);
        sc_rhs_real(&dn, params, &mut fd);
        for r in 0..4 {
            j[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    j
}

#[test]
fn lyapunov_at_stable_fixed_point_matches_jacobian_spectrum() {
    let params = ModelParams::new(-0.3, 0.05);
    let fp = fixed_points(&params)
        .unwrap()
        .into_iter()
        .find(|f| f.stable)
        .expect("stable fixed point");
    let oracle = fd_jacobian(fp.state.to_real(), &params)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((oracle - fp.max_growth).abs() < 1e-7, "{oracle} vs {}", fp.max_growth);
    let l = max_lyapunov(&params, fp.state, &LyapunovSpec::default()).unwrap();
    assert!((l.lambda_max - oracle).abs() < 5e-5, "{} vs {oracle}", l.lambda_max);
}

#[test]
fn spectral_order_matches_attractor_period() {
    let spec = SpectrumSpec::default();
    for (delta, n) in [(-0.4, 1), (-0.5, 2), (-0.575, 4)] {
        let params = ModelParams::new(delta, 1.5);
        let class = classify_attractor(&params, ScState::ORIGIN, &ClassifySpec::default()).unwrap();
        assert_eq!(class.class.kind, AttractorKind::Periodic(n), "delta {delta}");
        let transient = 200.0 * TWO_PI;
        let traj = integrate_sc_with(
            ScState::ORIGIN,
            &params,
            (0.0, transient + spec.n_periods as f64 * TWO_PI),
            Sampling::per_period(64),
            Default::default(),
            transient,
        )
        .unwrap();
        let order = detect_subharmonic_order(&power_spectrum(&traj, &spec).unwrap(), DEFAULT_PEAK_THRESHOLD);
        assert_eq!(order, SubharmonicOrder::Order(n), "delta {delta}");
    }
}

#[test]
fn outer_ansatz_branches_persist_and_middle_branch_drifts() {
    let params = ModelParams::new(-0.3, 1.3);
    let mut sols: Vec<_> = solve_ansatz(&params, &AnsatzSpec::default(), &[])
        .unwrap()
        .into_iter()
        .filter(|s| s.amplitude > 0.0)
        .collect();
    sols.sort_by(|a, b| a.amplitude.total_cmp(&b.amplitude));
    assert_eq!(sols.len(), 3);
    let dev: Vec<f64> = sols.iter().map(|s| ansatz_orbit_deviation(&params, s, 50).unwrap()).collect();
    assert!(dev[0] < 0.1 && dev[2] < 0.15, "{dev:?}");
    assert!(dev[1] > 0.5, "{dev:?}");
}

#[test]
fn warm_and_cold_starts_agree_on_a_unique_attractor() {
    let params = ModelParams::new(-0.4, 1.5);
    let spec = ClassifySpec::default();
    let cold = classify_attractor(&params, ScState::ORIGIN, &spec).unwrap();
    let warm = classify_attractor(&params, cold.final_state, &spec).unwrap();
    assert_eq!(cold.class.kind, warm.class.kind);
    assert!((cold.x_max - warm.x_max).abs() < 1e-6);
}
