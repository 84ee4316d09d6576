//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and fails
//! if any criterion fails. Tolerances and runtime budgets are fixed here.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use delaylab::bsdde::RegressionBasis;
use delaylab::delay::{x1_of_buffer, DelayBuffer};
use delaylab::hjb::{
    compatibility_pde_check, default_probes, hjb_residual_check, x2_independence_check, CompatibilityReport,
};
use delaylab::merton::{
    build_model, build_policy, closed_form_adjoint, delta_coefficient, q_closed_form, q_ode_oracle,
    resolve_constraints, FreeParams, MertonModel, MertonParams, MertonPolicy, MertonValue,
};
use delaylab::model::ClosureModel;
use delaylab::optimize::ControlGrid;
use delaylab::pmp::{adjoints_from_value, check_p3_zero, maximum_condition_check, AdjointPath};
use delaylab::sdde::{delayed_ito_check, simulate_forward, ItoTestFunction};
use delaylab::verify::{
    closed_form_cost_check, compare_controls, relations_report, OverridePolicy, RelationTolerances, ScaledPolicy,
};
use delaylab::{ControlBox, FeedbackPolicy, ModelParams, SimConfig, StructuredModel};

const SEED: u64 = 20_240_601;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Runs `f`, failing it if it errors or exceeds `budget`.
fn timed(budget: Duration, f: impl FnOnce() -> Result<Verdict, String>) -> Verdict {
    let start = Instant::now();
    let v = f().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    Verdict::new(
        v.pass && in_time,
        format!(
            "{}; runtime {:.2}s (budget {:.0}s{})",
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs_f64(),
            if in_time { "" } else { ", EXCEEDED" }
        ),
    )
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Bench {
    params: MertonParams,
    model: MertonModel,
    value: MertonValue,
    policy: MertonPolicy,
}

fn bench(free: &FreeParams) -> Result<Bench, String> {
    let params = resolve_constraints(free).map_err(err)?;
    let value = MertonValue::new(params).map_err(err)?;
    Ok(Bench { params, model: build_model(&params), policy: build_policy(&params, value.q), value })
}

// ---------------------------------------------------------------------------

fn criterion_1(free: &FreeParams) -> Verdict {
    timed(Duration::from_secs(1), || {
        let mut worst = 0.0f64;
        for gamma in [free.gamma, -1.0] {
            let p = resolve_constraints(&FreeParams { gamma, ..*free }).map_err(err)?;
            let d = delta_coefficient(&p).map_err(err)?;
            let q = q_closed_form(&p, d);
            let rk4 = q_ode_oracle(&p, d, 10_000).map_err(err)?;
            for i in 0..1000 {
                let t = p.start_s + (p.horizon_t - p.start_s) * (i as f64 + 0.5) / 1000.0;
                let exact = q.q(t).map_err(err)?;
                worst = worst.max((rk4.interpolate(t) - exact).abs() / exact.abs());
            }
        }
        Ok(Verdict::new(worst < 1e-8, format!("max rel |Q - RK4| = {worst:.3e} (< 1e-8), gamma in {{{}, -1}}", free.gamma)))
    })
}

fn criterion_2(free: &FreeParams) -> Verdict {
    timed(Duration::from_secs(5), || {
        let b = bench(free)?;
        let grid = ControlGrid::with_default_nodes(b.model.control_set()).map_err(err)?;
        let probes = default_probes(&[0.0, 0.25, 0.5, 0.75, 0.95]);
        let hjb = hjb_residual_check(&b.model, &b.value, &probes, Some(&b.policy), &grid, 1e-6).map_err(err)?;
        let x2s: Vec<f64> = (0..=20).map(|i| -10.0 + i as f64).collect();
        let x2 = x2_independence_check(&b.model, &b.value, &probes, &x2s, Some(&b.policy), &grid, 1e-8).map_err(err)?;
        Ok(Verdict::new(
            hjb.pass && x2.report.pass,
            format!(
                "max |HJB residual| = {:.3e} (< 1e-6) over {} probes; x2 spread = {:.3e} (< 1e-8)",
                hjb.max_residual, hjb.probes, x2.report.max_residual
            ),
        ))
    })
}

fn compat(p: &MertonParams) -> Result<CompatibilityReport, String> {
    let model = build_model(p);
    let value = MertonValue::new(*p).map_err(err)?;
    let policy = build_policy(p, value.q);
    let grid = ControlGrid::with_default_nodes(model.control_set()).map_err(err)?;
    let probes = default_probes(&[0.0, 0.25, 0.5, 0.75, 0.95]);
    compatibility_pde_check(&model, &value, &probes, Some(&policy), &grid, 1e-6).map_err(err)
}

fn criterion_3(free: &FreeParams) -> Verdict {
    timed(Duration::from_secs(5), || {
        let p = resolve_constraints(free).map_err(err)?;
        let ok = compat(&p)?;
        let four = [&ok.b_hat, &ok.sigma, &ok.f1, &ok.phi];
        let fields_pass = four.iter().all(|r| r.pass);
        let mut broken_theta = p;
        broken_theta.theta += 1e-2;
        let mut broken_mu1 = p;
        broken_mu1.mu1 += 1e-2;
        let bt = compat(&broken_theta)?.max_residual();
        let bm = compat(&broken_mu1)?.max_residual();
        Ok(Verdict::new(
            fields_pass && bt > 1e-3 && bm > 1e-3,
            format!(
                "fields b_hat/sigma/f1/phi = {:.1e}/{:.1e}/{:.1e}/{:.1e} (< 1e-6); broken theta {bt:.3e}, broken mu1 {bm:.3e} (> 1e-3)",
                ok.b_hat.max_residual, ok.sigma.max_residual, ok.f1.max_residual, ok.phi.max_residual
            ),
        ))
    })
}

fn criterion_4(free: &FreeParams) -> Verdict {
    timed(Duration::from_secs(10), || {
        let b = bench(free)?;
        let h = 1.0 / 256.0;
        let init = DelayBuffer::constant(b.params.delta, h, 1.0).map_err(err)?;
        let e = simulate_forward(&b.model, &b.policy, &init, &SimConfig::new(256, 64, SEED)).map_err(err)?;
        let adj = adjoints_from_value(&b.value, &b.model, &e);
        let p3 = check_p3_zero(&b.model, &e, &adj, 1e-10).map_err(err)?;
        let grid = ControlGrid::with_default_nodes(b.model.control_set()).map_err(err)?;
        let mc = maximum_condition_check(&b.model, &e, &adj, &grid, 1e-6, 1e-3).map_err(err)?;
        let nodes: usize = e.paths.iter().map(|p| p.times.len()).sum();
        let mut q_err = 0.0f64;
        for (fp, a) in e.paths.iter().zip(&adj.adjoints) {
            for (t, q) in fp.times.iter().zip(&a.q) {
                let exact = (-b.params.beta * t).exp();
                q_err = q_err.max((q - exact).abs() / exact);
            }
        }
        let grads_pass = mc.gradient.iter().all(|r| r.pass);
        Ok(Verdict::new(
            p3.pointwise.pass && grads_pass && mc.interior_nodes == nodes && q_err <= 1e-12,
            format!(
                "p3 metric = {:.3e} (< 1e-10); |H_u| = {:.3e}, |H_c| = {:.3e} (< 1e-6) at {}/{} interior nodes; max rel |q - e^(-beta t)| = {:.1e} (<= 1e-12)",
                p3.pointwise.max_residual,
                mc.gradient[0].max_residual,
                mc.gradient[1].max_residual,
                mc.interior_nodes,
                nodes,
                q_err
            ),
        ))
    })
}

fn criterion_5(free: &FreeParams) -> Verdict {
    timed(Duration::from_secs(10), || {
        let b = bench(free)?;
        let h = 1.0 / 256.0;
        let init = DelayBuffer::constant(b.params.delta, h, 1.0).map_err(err)?;
        let e = simulate_forward(&b.model, &b.policy, &init, &SimConfig::new(256, 64, SEED)).map_err(err)?;
        let adj = adjoints_from_value(&b.value, &b.model, &e);
        let closed: Vec<AdjointPath> =
            e.paths.iter().map(|fp| closed_form_adjoint(&b.value, fp)).collect::<Result<_, _>>().map_err(err)?;
        let grid = ControlGrid::with_default_nodes(b.model.control_set()).map_err(err)?;
        let rel = relations_report(
            &b.value,
            &b.model,
            &e,
            &adj,
            &[("value", &adj.adjoints), ("closed_form", &closed)],
            &grid,
            &RelationTolerances { a: 1e-4, b: 1e-4, c: 1e-4 },
        )
        .map_err(err)?;
        let adj_pass = rel.adjoint.iter().all(|r| r.pass);
        let worst = rel.adjoint.iter().fold(0.0f64, |m, r| m.max(r.max_residual));
        Ok(Verdict::new(
            adj_pass,
            format!(
                "max rel error of p1/p2/k1/k2 relations = {worst:.3e} (< 1e-4); |V_t - G(u*)| = {:.1e}, maximality gap = {:.1e}",
                rel.time_derivative.max_residual, rel.maximality.max_residual
            ),
        ))
    })
}

fn criterion_6(free: &FreeParams) -> Verdict {
    timed(Duration::from_secs(60), || {
        let b = bench(free)?;
        let h = 1.0 / 128.0;
        let init = DelayBuffer::constant(b.params.delta, h, 1.0).map_err(err)?;
        let basis = RegressionBasis::default_for(&b.model);
        let r = closed_form_cost_check(
            &b.model,
            &b.value,
            &b.policy,
            &init,
            &SimConfig::new(128, 10_000, SEED),
            &basis,
            3.0,
            0.5,
        )
        .map_err(err)?;
        Ok(Verdict::new(
            r.report.pass,
            format!(
                "Y(s) = {:.6}, -V = {:.6}, |diff| = {:.3e} <= 3*{:.3e} + 0.5h = {:.3e}",
                r.y_at_s, r.closed_form_y, r.report.max_residual, r.stderr, r.report.tolerance
            ),
        ))
    })
}

fn criterion_7(free: &FreeParams) -> Verdict {
    timed(Duration::from_secs(120), || {
        let b = bench(free)?;
        let h = 1.0 / 128.0;
        let init = DelayBuffer::constant(b.params.delta, h, 1.0).map_err(err)?;
        let base: &dyn FeedbackPolicy = &b.policy;
        let scaled = |f: [f64; 2]| ScaledPolicy { inner: base, factors: f.into_iter().collect() };
        let (u075, u125, c075, c125) = (scaled([0.75, 1.0]), scaled([1.25, 1.0]), scaled([1.0, 0.75]), scaled([1.0, 1.25]));
        let zero = OverridePolicy { inner: base, coordinate: 0, value: 0.0 };
        let suite: [(&str, &dyn FeedbackPolicy); 5] =
            [("u*0.75", &u075), ("u*1.25", &u125), ("c*0.75", &c075), ("c*1.25", &c125), ("u=0", &zero)];
        let x1 = x1_of_buffer(&init, b.params.lambda).map_err(err)?;
        let v0 = b.value.value(0.0, 1.0, x1).map_err(err)?;
        let r = compare_controls(
            &b.model,
            base,
            &suite,
            &init,
            &SimConfig::new(128, 10_000, SEED),
            &RegressionBasis::default_for(&b.model),
            Some(v0),
            3.0,
        )
        .map_err(err)?;
        let parts: Vec<String> = r
            .perturbations
            .iter()
            .map(|p| {
                format!(
                    "{} {:+.2}se{}",
                    p.name,
                    p.paired_diff_mean / p.paired_diff_stderr,
                    if p.pass { "" } else { " FAILED" }
                )
            })
            .collect();
        let above = r.perturbations.iter().all(|p| p.above_value.unwrap_or(false));
        Ok(Verdict::new(
            r.pass() && above,
            format!("paired J(pert) - J(u*,c*): {}; V <= J for all: {above}", parts.join(", ")),
        ))
    })
}

fn criteria_1_to_7(free: &FreeParams) -> Vec<(usize, Verdict)> {
    vec![
        (1, criterion_1(free)),
        (2, criterion_2(free)),
        (3, criterion_3(free)),
        (4, criterion_4(free)),
        (5, criterion_5(free)),
        (6, criterion_6(free)),
        (7, criterion_7(free)),
    ]
}

fn criterion_8(results: &[(usize, Verdict)]) -> Verdict {
    let free = FreeParams { mu2: 0.0, ..FreeParams::benchmark() };
    let b = match bench(&free) {
        Ok(b) => b,
        Err(e) => return Verdict::new(false, e),
    };
    let mut worst = 0.0f64;
    for (x, x1) in [(1.0, 0.95), (0.5, 2.0), (3.0, 0.1)] {
        for t in [0.0, 0.5, 0.99] {
            worst = worst.max((b.policy.evaluate(t, x, x1)[0] - 2.5).abs() / 2.5);
        }
    }
    let failing: Vec<String> = results.iter().filter(|(_, v)| !v.pass).map(|(i, _)| i.to_string()).collect();
    Verdict::new(
        worst <= 1e-15 && failing.is_empty() && b.params.theta == 0.0 && b.params.mu1 == 0.0,
        format!(
            "theta = mu1 = 0; max rel |u* - 2.5| = {worst:.1e} (<= 1e-15); criteria 1-7 with mu2 = 0: {}",
            if failing.is_empty() { "all pass".to_string() } else { format!("failing {}", failing.join(",")) }
        ),
    )
}

struct Square;

impl ItoTestFunction for Square {
    fn g(&self, _t: f64, x: f64, _x1: f64) -> f64 {
        x * x
    }
    fn g_t(&self, _t: f64, _x: f64, _x1: f64) -> f64 {
        0.0
    }
    fn g_x(&self, _t: f64, x: f64, _x1: f64) -> f64 {
        2.0 * x
    }
    fn g_xx(&self, _t: f64, _x: f64, _x1: f64) -> f64 {
        2.0
    }
    fn g_x1(&self, _t: f64, _x: f64, _x1: f64) -> f64 {
        0.0
    }
}

fn criterion_9() -> Verdict {
    timed(Duration::from_secs(10), || {
        let params = ModelParams::new(0.1, 1.0, 1.0, 0.0).map_err(err)?;
        let bounds = ControlBox::new(vec![0.0], vec![1.0]).map_err(err)?;
        let model = ClosureModel::new(params, bounds).sigma(|_, _, _, _| 0.3);
        let policy = delaylab::model::ConstantPolicy(delaylab::Control::from_elem(0.0, 1));
        let mut rows = Vec::new();
        for n in [64, 128] {
            let init = DelayBuffer::constant(1.0, 1.0 / n as f64, 1.0).map_err(err)?;
            let e = simulate_forward(&model, &policy, &init, &SimConfig::new(n, 10_000, SEED)).map_err(err)?;
            rows.push(delayed_ito_check(&Square, &e, &model));
        }
        let (a, b) = (rows[0], rows[1]);
        Ok(Verdict::new(
            a.consistent_with_zero(3.0) && b.consistent_with_zero(3.0) && b.rms < a.rms,
            format!(
                "h=1/64: mean {:.2e} +/- {:.2e}, rms {:.3e}; h=1/128: mean {:.2e} +/- {:.2e}, rms {:.3e}",
                a.mean, a.stderr, a.rms, b.mean, b.stderr, b.rms
            ),
        ))
    })
}

const SUITE_CONFIG: &str = r#"{ "model": { "kind": "merton" },
  "sim": { "n_steps": 64, "n_paths": 32, "master_seed": 20240601, "basis_degree": 2 },
  "checks": { "probe_times": [0.0, 0.5], "grid_nodes": 24 } }"#;

const SUBCOMMANDS: [&str; 6] =
    ["simulate", "solve-merton", "check-hjb", "check-pmp", "check-relations", "compare-controls"];

fn run_suite(cfg: &Path, out: &Path) -> Result<Vec<Vec<u8>>, String> {
    let mut reports = Vec::new();
    for cmd in SUBCOMMANDS {
        let dir = out.join(cmd);
        let o = Command::new(env!("CARGO_BIN_EXE_delaylab"))
            .args([cmd, "--quiet", "--config"])
            .arg(cfg)
            .arg("--out")
            .arg(&dir)
            .env_remove("DELAYLAB_SEED")
            .output()
            .map_err(err)?;
        if o.status.code() != Some(0) {
            return Err(format!("{cmd} exited with {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
        }
        reports.push(std::fs::read(dir.join("report.json")).map_err(err)?);
    }
    Ok(reports)
}

fn criterion_10() -> Verdict {
    let go = || -> Result<Verdict, String> {
        let tmp = tempfile::tempdir().map_err(err)?;
        let cfg = tmp.path().join("suite.json");
        std::fs::write(&cfg, SUITE_CONFIG).map_err(err)?;
        let a = run_suite(&cfg, &tmp.path().join("a"))?;
        let b = run_suite(&cfg, &tmp.path().join("b"))?;
        let differing: Vec<&str> =
            SUBCOMMANDS.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(c, _)| *c).collect();
        Ok(Verdict::new(
            differing.is_empty(),
            if differing.is_empty() {
                format!("report.json byte-identical across two runs of {} subcommands", SUBCOMMANDS.len())
            } else {
                format!("report.json differs for {}", differing.join(", "))
            },
        ))
    };
    go().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")))
}

#[test]
fn acceptance_criteria() {
    let mut lines = Vec::new();
    let benchmark = criteria_1_to_7(&FreeParams::benchmark());
    let degenerate = criteria_1_to_7(&FreeParams { mu2: 0.0, ..FreeParams::benchmark() });
    for (i, v) in &degenerate {
        println!("  [mu2 = 0] criterion {i}: {} {}", if v.pass { "pass" } else { "fail" }, v.detail);
    }
    let c8 = criterion_8(&degenerate);
    let mut all: Vec<(usize, Verdict)> = benchmark;
    all.push((8, c8));
    all.push((9, criterion_9()));
    all.push((10, criterion_10()));
    for (i, v) in &all {
        let line = format!("{} criterion {i}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        println!("{line}");
        lines.push(line);
    }
    let failed: Vec<String> = all.iter().filter(|(_, v)| !v.pass).map(|(i, _)| i.to_string()).collect();
    assert!(failed.is_empty(), "failing criteria: {}", failed.join(", "));
}
