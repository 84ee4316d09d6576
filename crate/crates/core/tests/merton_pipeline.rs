use approx::assert_relative_eq;
use delaylab::bsdde::RegressionBasis;
use delaylab::delay::DelayBuffer;
use delaylab::hjb::{
    compatibility_pde_check, compatibility_tolerance, default_probes, hjb_residual_check, x2_independence_check,
};
use delaylab::merton::{
    build_model, build_policy, closed_form_adjoint, delta_coefficient, q_closed_form, q_ode_oracle,
    resolve_constraints, FreeParams, MertonParams, MertonValue,
};
use delaylab::optimize::ControlGrid;
use delaylab::pmp::{adjoints_from_value, check_p3_zero, maximum_condition_check, AdjointPath};
use delaylab::sdde::simulate_forward;
use delaylab::verify::{closed_form_cost_check, compare_controls, relations_report, RelationTolerances, ScaledPolicy};
use delaylab::{FeedbackPolicy, SimConfig, StructuredModel};

fn p0() -> MertonParams {
    resolve_constraints(&FreeParams::benchmark()).unwrap()
}

fn setup(p: &MertonParams) -> (delaylab::merton::MertonModel, MertonValue, delaylab::merton::MertonPolicy) {
    let model = build_model(p);
    let value = MertonValue::new(*p).unwrap();
    let policy = build_policy(p, value.q);
    (model, value, policy)
}

#[test]
fn q_matches_rk4_on_benchmark_and_negative_gamma() {
    for gamma in [0.5, -1.0] {
        let p = resolve_constraints(&FreeParams { gamma, ..FreeParams::benchmark() }).unwrap();
        let d = delta_coefficient(&p).unwrap();
        let q = q_closed_form(&p, d);
        let rk4 = q_ode_oracle(&p, d, 10_000).unwrap();
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let exact = q.q(t).unwrap();
            assert!((rk4.interpolate(t) - exact).abs() / exact.abs() < 1e-8, "gamma {gamma}, t {t}");
        }
        assert_relative_eq!(q.q(1.0).unwrap(), 1.0, epsilon = 1e-15);
    }
}

#[test]
fn hjb_and_compatibility_hold_for_constrained_model() {
    let p = p0();
    let (model, value, policy) = setup(&p);
    let grid = ControlGrid::with_default_nodes(model.control_set()).unwrap();
    let probes = default_probes(&[0.0, 0.5]);
    let hjb = hjb_residual_check(&model, &value, &probes, Some(&policy), &grid, 1e-6).unwrap();
    assert!(hjb.pass, "{hjb:?}");
    let x2s: Vec<f64> = (0..=10).map(|i| -10.0 + 2.0 * i as f64).collect();
    let spread = x2_independence_check(&model, &value, &probes[..9], &x2s, Some(&policy), &grid, 1e-8).unwrap();
    assert!(spread.report.pass, "{:?}", spread.report);
    let compat = compatibility_pde_check(&model, &value, &probes, Some(&policy), &grid, compatibility_tolerance()).unwrap();
    assert!(compat.pass(), "{compat:?}");
}

#[test]
fn broken_mu1_is_detected() {
    let mut p = p0();
    p.mu1 += 0.01;
    let (model, value, policy) = setup(&p);
    let grid = ControlGrid::with_default_nodes(model.control_set()).unwrap();
    let probes = default_probes(&[0.0]);
    let compat = compatibility_pde_check(&model, &value, &probes, Some(&policy), &grid, compatibility_tolerance()).unwrap();
    assert!(compat.b_hat.max_residual > 1e-3, "{compat:?}");
    let hjb = hjb_residual_check(&model, &value, &probes, Some(&policy), &grid, 1e-6).unwrap();
    assert!(!hjb.pass);
}

#[test]
fn adjoint_suite_along_optimal_paths() {
    let p = p0();
    let (model, value, policy) = setup(&p);
    let init = DelayBuffer::constant(p.delta, 1.0 / 64.0, 1.0).unwrap();
    let cfg = SimConfig::new(64, 16, 11);
    let e = simulate_forward(&model, &policy, &init, &cfg).unwrap();
    let adj = adjoints_from_value(&value, &model, &e);

    for a in &adj.adjoints {
        for (k, q) in a.q.iter().enumerate() {
            assert_relative_eq!(*q, (-p.beta * e.paths[0].times[k]).exp(), max_relative = 1e-13);
        }
    }
    let p3 = check_p3_zero(&model, &e, &adj, 1e-10).unwrap();
    assert!(p3.pass(), "{p3:?}");

    let grid = ControlGrid::new(model.control_set(), 16).unwrap();
    let mc = maximum_condition_check(&model, &e, &adj, &grid, 1e-6, 1e-3).unwrap();
    assert!(mc.pass(), "{mc:?}");
    assert!(mc.interior_nodes > 0);

    let closed: Vec<AdjointPath> = e.paths.iter().map(|fp| closed_form_adjoint(&value, fp).unwrap()).collect();
    let rel = relations_report(
        &value,
        &model,
        &e,
        &adj,
        &[("value", &adj.adjoints), ("closed_form", &closed)],
        &grid,
        &RelationTolerances::default(),
    )
    .unwrap();
    assert!(rel.pass(), "{rel:?}");
}

#[test]
fn halved_investment_breaks_the_time_derivative_relation() {
    let p = p0();
    let (model, value, policy) = setup(&p);
    let half = ScaledPolicy { inner: &policy, factors: smallvec::smallvec![0.5, 1.0] };
    let init = DelayBuffer::constant(p.delta, 1.0 / 32.0, 1.0).unwrap();
    let e = simulate_forward(&model, &half, &init, &SimConfig::new(32, 4, 3)).unwrap();
    let adj = adjoints_from_value(&value, &model, &e);
    let grid = ControlGrid::new(model.control_set(), 16).unwrap();
    let rel = relations_report(&value, &model, &e, &adj, &[], &grid, &RelationTolerances::default()).unwrap();
    assert!(!rel.time_derivative.pass);
    assert!(!rel.maximality.pass);
    assert!(rel.hjb_sup.pass, "{:?}", rel.hjb_sup);
}

#[test]
fn lsmc_cost_matches_closed_form_value() {
    let p = p0();
    let (model, value, policy) = setup(&p);
    let h = 1.0 / 64.0;
    let init = DelayBuffer::constant(p.delta, h, 1.0).unwrap();
    let basis = RegressionBasis::default_for(&model);
    let r = closed_form_cost_check(&model, &value, &policy, &init, &SimConfig::new(64, 2000, 5), &basis, 3.0, 0.5).unwrap();
    assert!(r.report.pass, "{r:?}");
}

#[test]
fn deterministic_limit_matches_to_first_order() {
    // μ₀ = r: the optimal investment is zero and wealth is deterministic.
    let p = resolve_constraints(&FreeParams { mu0: 0.03, ..FreeParams::benchmark() }).unwrap();
    let (model, value, policy) = setup(&p);
    let basis = RegressionBasis::default_for(&model);
    let mut errs = Vec::new();
    for n in [64, 128] {
        let h = 1.0 / n as f64;
        let init = DelayBuffer::constant(p.delta, h, 1.0).unwrap();
        let r = closed_form_cost_check(&model, &value, &policy, &init, &SimConfig::new(n, 8, 1), &basis, 3.0, 0.5).unwrap();
        assert!(r.stderr < 1e-12, "{}", r.stderr);
        assert!(r.report.pass, "{r:?}");
        errs.push(r.report.max_residual);
    }
    assert!(errs[1] < 0.6 * errs[0], "{errs:?}");
}

#[test]
fn no_delay_value_is_classical_discounted_merton() {
    let p = resolve_constraints(&FreeParams { mu2: 0.0, ..FreeParams::benchmark() }).unwrap();
    assert_eq!((p.theta, p.mu1), (0.0, 0.0));
    let value = MertonValue::new(p).unwrap();
    let g = p.gamma;
    // Classical Merton: V = −(1/γ)g(t)^{1−γ}x^γ, g = 1/a + (1 − 1/a)e^{−a(T−t)}.
    let nu = (g * p.r + g * (p.mu0 - p.r).powi(2) / (2.0 * (1.0 - g) * p.sigma * p.sigma) - p.beta) / (1.0 - g);
    let a = -nu;
    for t in [0.0, 0.3, 0.9] {
        let gt = 1.0 / a + (1.0 - 1.0 / a) * (-a * (1.0 - t)).exp();
        for x in [0.5f64, 1.0, 3.0] {
            let classical = -gt.powf(1.0 - g) * x.powf(g) / g;
            assert_relative_eq!(value.value(t, x, 2.0).unwrap(), classical, max_relative = 1e-12);
        }
    }
    let policy = build_policy(&p, value.q);
    assert_relative_eq!(policy.evaluate(0.2, 1.7, 0.4)[0], 2.5, max_relative = 1e-15);
}

#[test]
fn undiscounted_no_delay_benchmark_is_outside_the_closed_form_region() {
    let r = resolve_constraints(&FreeParams { mu2: 0.0, beta: 0.0, ..FreeParams::benchmark() });
    assert!(matches!(r, Err(delaylab::LabError::ConstraintViolation(_))), "{r:?}");
}

#[test]
fn self_comparison_is_exactly_zero_and_zero_investment_is_worse() {
    let p = p0();
    let (model, value, policy) = setup(&p);
    let init = DelayBuffer::constant(p.delta, 1.0 / 32.0, 1.0).unwrap();
    let zero = delaylab::verify::OverridePolicy { inner: &policy, coordinate: 0, value: 0.0 };
    let cfg = SimConfig::new(32, 2000, 9);
    let v0 = value.value(0.0, 1.0, (1.0 - (-p.lambda * p.delta).exp()) / p.lambda).unwrap();
    let base: &dyn FeedbackPolicy = &policy;
    let r = compare_controls(
        &model,
        base,
        &[("self", base), ("u_zero", &zero)],
        &init,
        &cfg,
        &RegressionBasis::default_for(&model),
        Some(v0),
        3.0,
    )
    .unwrap();
    assert_eq!(r.perturbations[0].paired_diff_mean, 0.0);
    assert_eq!(r.perturbations[0].paired_diff_stderr, 0.0);
    assert!(r.perturbations[1].significant, "{r:?}");
    assert!(r.pass());
}
