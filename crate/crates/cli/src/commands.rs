//! One function per subcommand; each returns an [`Outcome`] and leaves the
//! writing to the caller.

use delaylab::bsdde::{solve_backward, write_backward_csv};
use delaylab::delay::x1_of_buffer;
use delaylab::hjb::{
    compatibility_pde_check, default_probes, hjb_residual_check, terminal_residual, x2_independence_check,
    CheckReport,
};
use delaylab::merton::{closed_form_adjoint, delta_coefficient_printed, q_closed_form_printed, q_ode_oracle};
use delaylab::optimize::ControlGrid;
use delaylab::pmp::{
    adjoints_from_value, check_p3_zero, convexity_spot_check, maximum_condition_check, p1_drift_residual,
    write_adjoint_csv, AdjointPath,
};
use delaylab::sdde::{simulate_forward, write_forward_csv, ForwardEnsemble};
use delaylab::verify::{
    closed_form_cost_check, compare_controls, relations_report, OverridePolicy, RelationTolerances, ScaledPolicy,
};
use delaylab::{fmt_float, Control, FeedbackPolicy, SimConfig};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::models::{MertonSetup, Setup};
use crate::{CliError, Command, Outcome};

pub fn dispatch(cmd: Command, cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Outcome, CliError> {
    match cmd {
        Command::Simulate => simulate(cfg, setup, seed),
        Command::SolveMerton => match setup {
            Setup::Merton(m) => solve_merton(cfg, m),
            Setup::Generic(_) => Err(CliError::Config("solve-merton needs model.kind = \"merton\"".into())),
        },
        Command::CheckHjb => check_hjb(cfg, setup),
        Command::CheckPmp => check_pmp(cfg, setup, seed),
        Command::CheckRelations => check_relations(cfg, setup, seed),
        Command::CompareControls => compare(cfg, setup, seed),
    }
}

fn sim_config(cfg: &ExperimentConfig, seed: u64) -> SimConfig {
    SimConfig::new(cfg.sim.n_steps, cfg.sim.n_paths, seed).with_x1_method(cfg.sim.x1_method)
}

fn ensemble(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<ForwardEnsemble, CliError> {
    let model = setup.model();
    let sc = sim_config(cfg, seed);
    sc.validate(model.params())?;
    let init = setup.initial_buffer(sc.step(model.params()))?;
    Ok(simulate_forward(model, setup.policy()?, &init, &sc)?)
}

fn grid(cfg: &ExperimentConfig, setup: &Setup) -> Result<ControlGrid, CliError> {
    Ok(ControlGrid::new(setup.model().control_set(), cfg.checks.grid_nodes)?)
}

fn csv(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

/// Maximum that propagates NaN.
fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn push(out: &mut Outcome, cfg: &ExperimentConfig, report: CheckReport) {
    if cfg.wants(&report.check) {
        out.checks.push(report);
    }
}

/// `(x, x₁)` at the start of the simulation for the configured history.
fn start_state(setup: &Setup, h: f64) -> Result<(f64, f64), CliError> {
    let init = setup.initial_buffer(h)?;
    Ok((init.newest()?, x1_of_buffer(&init, setup.model().params().lambda)?))
}

// ============================================================================
// simulate
// ============================================================================

fn simulate(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Outcome, CliError> {
    let model = setup.model();
    let e = ensemble(cfg, setup, seed)?;
    let basis = setup.basis(cfg.sim.basis_degree);
    let sol = solve_backward(model, &e, &basis)?;
    let two = model.control_set().dim() == 2;

    let mut out = Outcome::default();
    out.csv.push(("forward.csv", csv(|w| write_forward_csv(&e, two, w))));
    out.csv.push(("backward.csv", csv(|w| write_backward_csv(&e, &sol, w))));
    if let Ok(value) = setup.value() {
        let adj = adjoints_from_value(value, model, &e);
        out.csv.push(("adjoint.csv", csv(|w| write_adjoint_csv(&e, &adj.adjoints, w))));
    }
    out.detail("step_h", e.step_h);
    out.detail("basis", basis.descriptor());
    out.detail("y_at_s", sol.y_at_s);
    out.detail("j", -sol.y_at_s);
    out.detail("stderr", sol.stderr);
    out.detail("degraded_steps", sol.degraded_steps);
    out.detail("warning", &sol.warning);
    out.summary.push(format!("J = {} (stderr {})", fmt_float(-sol.y_at_s), fmt_float(sol.stderr)));
    if let Some(w) = &sol.warning {
        eprintln!("warning: {w}");
    }
    if let Setup::Merton(m) = setup {
        let p0 = &e.paths[0];
        let v = m.value.value(p0.times[0], p0.x[0], p0.x1[0])?;
        out.detail("closed_form_j", v);
        out.summary.push(format!("V(s, x, x1) = {}", fmt_float(v)));
    }
    Ok(out)
}

// ============================================================================
// solve-merton
// ============================================================================

#[derive(Serialize)]
struct QRow {
    t: f64,
    q: f64,
    q_rk4: f64,
    q_printed: f64,
}

#[derive(Serialize)]
struct StrategySample {
    t: f64,
    x: f64,
    x1: f64,
    u: f64,
    c: f64,
    v: f64,
}

fn solve_merton(cfg: &ExperimentConfig, m: &MertonSetup) -> Result<Outcome, CliError> {
    let p = m.value.params;
    let d = m.value.q.delta_coeff;
    let d_printed = delta_coefficient_printed(&p);
    let printed = q_closed_form_printed(&p, d_printed);
    let rk4 = q_ode_oracle(&p, d, 10_000)?;
    let tol = &cfg.checks.tolerances;
    let (s, t_end) = (p.start_s, p.horizon_t);
    let mut out = Outcome::default();

    let rows = cfg.checks.q_table_rows;
    let table: Vec<QRow> = (0..rows)
        .map(|i| {
            let t = if i + 1 == rows { t_end } else { s + (t_end - s) * i as f64 / (rows - 1) as f64 };
            Ok(QRow { t, q: m.value.q.q(t)?, q_rk4: rk4.interpolate(t), q_printed: printed.q(t).unwrap_or(f64::NAN) })
        })
        .collect::<Result<_, delaylab::LabError>>()?;

    let mut worst = 0.0f64;
    for i in 0..=1000 {
        let t = s + (t_end - s) * i as f64 / 1000.0;
        let exact = m.value.q.q(t)?;
        worst = nan_max(worst, (rk4.interpolate(t) - exact).abs() / exact.abs());
    }
    push(&mut out, cfg, CheckReport::new("q_ode", 1001, worst, tol.q_ode));
    let terminal = (m.value.q.q(t_end)? - 1.0).abs();
    push(&mut out, cfg, CheckReport::new("q_terminal", 1, terminal, tol.terminal));

    let h = (t_end - s) / cfg.sim.n_steps as f64;
    let setup_x1 = {
        let init = delaylab::delay::DelayBuffer::constant(p.delta, h, m.initial_value)?;
        x1_of_buffer(&init, p.lambda)?
    };
    let mut samples = Vec::new();
    for t in [s, 0.5 * (s + t_end)] {
        for (x, x1) in [(m.initial_value, setup_x1), (0.5, 1.0), (2.0, 0.5)] {
            samples.push(StrategySample {
                t,
                x,
                x1,
                u: m.value.optimal_u(t, x, x1)?,
                c: m.value.optimal_c(t, x, x1)?,
                v: m.value.value(t, x, x1)?,
            });
        }
    }

    let (d_theta, d_mu1) = p.constraint_defects();
    out.detail("theta", p.theta);
    out.detail("mu1", p.mu1);
    out.detail("delta_coefficient", d);
    out.detail("delta_coefficient_printed", d_printed);
    out.detail("constraint_defects", [d_theta, d_mu1]);
    out.detail("merton_fraction", p.merton_fraction());
    out.detail("q_table", &table);
    out.detail("strategy_samples", &samples);

    out.summary.push(format!("theta = {}", fmt_float(p.theta)));
    out.summary.push(format!("mu1   = {}", fmt_float(p.mu1)));
    out.summary.push(format!("Delta = {} (printed form {})", fmt_float(d), fmt_float(d_printed)));
    out.summary.push(format!("{:>24} {:>24} {:>24} {:>24}", "t", "Q", "Q_rk4", "Q_printed"));
    for r in &table {
        out.summary.push(format!(
            "{:>24} {:>24} {:>24} {:>24}",
            fmt_float(r.t),
            fmt_float(r.q),
            fmt_float(r.q_rk4),
            fmt_float(r.q_printed)
        ));
    }
    out.summary.push(format!("{:>24} {:>24} {:>24} {:>24} {:>24}", "t", "x", "x1", "u*", "c*"));
    for r in &samples {
        out.summary.push(format!(
            "{:>24} {:>24} {:>24} {:>24} {:>24}",
            fmt_float(r.t),
            fmt_float(r.x),
            fmt_float(r.x1),
            fmt_float(r.u),
            fmt_float(r.c)
        ));
    }
    Ok(out)
}

// ============================================================================
// check-hjb
// ============================================================================

fn check_hjb(cfg: &ExperimentConfig, setup: &Setup) -> Result<Outcome, CliError> {
    let model = setup.model();
    let value = setup.value()?;
    let maximizer = setup.maximizer();
    let g = grid(cfg, setup)?;
    let tol = &cfg.checks.tolerances;
    let probes = default_probes(&cfg.checks.probe_times);
    let mut out = Outcome::default();

    if cfg.wants("hjb_residual") {
        out.checks.push(hjb_residual_check(model, value, &probes, maximizer, &g, tol.hjb_residual)?);
    }
    if cfg.wants("x2_independence") {
        let r = x2_independence_check(model, value, &probes, &cfg.checks.x2_values, maximizer, &g, tol.x2_independence)?;
        out.checks.push(r.report);
    }
    let compat = compatibility_pde_check(model, value, &probes, maximizer, &g, tol.compatibility_pde)?;
    for r in compat.records() {
        push(&mut out, cfg, r.clone());
    }
    let mut worst = 0.0f64;
    let t_probes = default_probes(&[model.params().horizon_t]);
    for p in &t_probes {
        worst = nan_max(worst, terminal_residual(model, value, p.x, p.x1).abs());
    }
    push(&mut out, cfg, CheckReport::new("terminal_condition", t_probes.len(), worst, tol.terminal));
    Ok(out)
}

// ============================================================================
// check-pmp
// ============================================================================

fn check_pmp(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Outcome, CliError> {
    let model = setup.model();
    let value = setup.value()?;
    let e = ensemble(cfg, setup, seed)?;
    let adj = adjoints_from_value(value, model, &e);
    let tol = &cfg.checks.tolerances;
    let g = grid(cfg, setup)?;
    let mut out = Outcome::default();

    let p3 = check_p3_zero(model, &e, &adj, tol.p3_zero)?;
    push(&mut out, cfg, p3.pointwise);
    push(&mut out, cfg, p3.back_integrated);

    let mc = maximum_condition_check(model, &e, &adj, &g, tol.maximum_condition, tol.interior_margin)?;
    push(&mut out, cfg, mc.variational);
    for r in mc.gradient {
        push(&mut out, cfg, r);
    }
    out.detail("interior_nodes", mc.interior_nodes);

    // Convexity at the start, middle and end of the first path.
    let path = &e.paths[0];
    let n = path.n_steps();
    let mut worst = CheckReport::new("convexity_spot_check", 0, 0.0, tol.convexity);
    let mut min_eig = f64::INFINITY;
    for k in [0, n / 2, n - 1] {
        let yz = &adj.backward[0];
        let mut probe = vec![path.x[k], path.x1[k], path.x2[k], yz.y[k], yz.z[k]];
        probe.extend(path.controls[k].iter());
        let r = convexity_spot_check(model, path.times[k], &adj.adjoints[0].slice(k), &[probe], tol.convexity)?;
        worst.probes += 1;
        worst.max_residual = nan_max(worst.max_residual, r.report.max_residual);
        min_eig = min_eig.min(r.min_eigenvalue);
    }
    worst.pass = worst.max_residual < worst.tolerance;
    push(&mut out, cfg, worst);
    out.detail("convexity_min_eigenvalue", min_eig);

    if let Setup::Merton(m) = setup {
        let p = &m.value.params;
        let mut w = 0.0f64;
        for (fp, a) in e.paths.iter().zip(&adj.adjoints) {
            for (t, q) in fp.times.iter().zip(&a.q) {
                let exact = (-p.beta * (t - p.start_s)).exp();
                w = nan_max(w, (q - exact).abs() / exact);
            }
        }
        let nodes = e.paths.iter().map(|p| p.times.len()).sum();
        push(&mut out, cfg, CheckReport::new("q_closed_form", nodes, w, tol.q_closed_form));
    }

    let drift = p1_drift_residual(model, &e, &adj)?;
    out.detail("p1_drift_residual", drift);
    out.csv.push(("adjoint.csv", csv(|w| write_adjoint_csv(&e, &adj.adjoints, w))));
    Ok(out)
}

// ============================================================================
// check-relations
// ============================================================================

fn check_relations(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Outcome, CliError> {
    let model = setup.model();
    let value = setup.value()?;
    let e = ensemble(cfg, setup, seed)?;
    let adj = adjoints_from_value(value, model, &e);
    let g = grid(cfg, setup)?;
    let tol = &cfg.checks.tolerances;
    let closed: Option<Vec<AdjointPath>> = match setup {
        Setup::Merton(m) => Some(
            e.paths.iter().map(|fp| closed_form_adjoint(&m.value, fp)).collect::<Result<_, _>>()?,
        ),
        Setup::Generic(_) => None,
    };
    let mut families: Vec<(&str, &[AdjointPath])> = vec![("value", &adj.adjoints)];
    if let Some(c) = &closed {
        families.push(("closed_form", c));
    }
    let rt = RelationTolerances {
        a: tol.relation_time_derivative,
        b: tol.relation_maximality,
        c: tol.relation_adjoint,
    };
    let rel = relations_report(value, model, &e, &adj, &families, &g, &rt)?;
    let mut out = Outcome::default();
    for r in rel.records() {
        push(&mut out, cfg, r.clone());
    }
    out.csv.push(("adjoint.csv", csv(|w| write_adjoint_csv(&e, &adj.adjoints, w))));
    Ok(out)
}

// ============================================================================
// compare-controls
// ============================================================================

fn compare(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Outcome, CliError> {
    let model = setup.model();
    let base = setup.policy()?;
    let tol = &cfg.checks.tolerances;
    let sc = sim_config(cfg, seed);
    sc.validate(model.params())?;
    let h = sc.step(model.params());
    let init = setup.initial_buffer(h)?;
    let basis = setup.basis(cfg.sim.basis_degree);
    let names = ["u", "c"];

    let dim = model.control_set().dim();
    let mut scaled = Vec::new();
    for (d, name) in names.iter().enumerate().take(dim) {
        for f in [0.75, 1.25] {
            let mut factors = Control::from_elem(1.0, dim);
            factors[d] = f;
            scaled.push((format!("{name}*{f}"), ScaledPolicy { inner: base, factors }));
        }
    }
    let zero = OverridePolicy { inner: base, coordinate: 0, value: 0.0 };
    let mut perturbations: Vec<(&str, &dyn FeedbackPolicy)> =
        scaled.iter().map(|(n, p)| (n.as_str(), p as &dyn FeedbackPolicy)).collect();
    perturbations.push(("u=0", &zero));

    let (x0, x1_0) = start_state(setup, h)?;
    let s = model.params().start_s;
    let v0 = setup.value().ok().map(|v| v.v(s, x0, x1_0));
    let report = compare_controls(model, base, &perturbations, &init, &sc, &basis, v0, tol.mc_z)?;

    let mut out = Outcome::default();
    for p in &report.perturbations {
        let r = CheckReport {
            check: format!("compare_{}", p.name),
            probes: cfg.sim.n_paths,
            max_residual: -p.paired_diff_mean,
            tolerance: tol.mc_z * p.paired_diff_stderr,
            pass: p.pass,
        };
        push(&mut out, cfg, r);
        if let Some(v) = v0 {
            let r = CheckReport {
                check: format!("value_lower_bound_{}", p.name),
                probes: cfg.sim.n_paths,
                max_residual: v - p.perturbed_j,
                tolerance: tol.mc_z * p.perturbed_stderr,
                pass: p.above_value.unwrap_or(true),
            };
            push(&mut out, cfg, r);
        }
    }
    if let Setup::Merton(m) = setup {
        let c = closed_form_cost_check(&m.model, &m.value, &m.policy, &init, &sc, &basis, tol.mc_z, tol.cost_bias)?;
        push(&mut out, cfg, c.report.clone());
        out.detail("closed_form_cost", &c);
    }
    out.summary.push(format!("J(base) = {} (stderr {})", fmt_float(report.base_j), fmt_float(report.base_stderr)));
    for p in &report.perturbations {
        out.summary.push(format!(
            "{:<8} J = {}  paired diff = {} +- {}",
            p.name,
            fmt_float(p.perturbed_j),
            fmt_float(p.paired_diff_mean),
            fmt_float(p.paired_diff_stderr)
        ));
    }
    out.detail("comparison", &report);
    Ok(out)
}
