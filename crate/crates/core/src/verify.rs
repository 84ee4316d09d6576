//! Cross-checks tying the dynamic-programming and maximum-principle sides
//! together: value/adjoint relations along paths, paired Monte Carlo policy
//! comparisons and LSMC-versus-closed-form cost agreement.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsdde::{recursive_cost, solve_backward, CostEstimate, RegressionBasis};
use crate::delay::DelayBuffer;
use crate::error::{LabError, Result};
use crate::hjb::{generalized_hamiltonian, nan_max, CheckReport, GArgs, ValueCandidate};
use crate::merton::{MertonModel, MertonValue};
use crate::model::{Control, FeedbackPolicy, SimConfig, StructuredModel};
use crate::optimize::ControlGrid;
use crate::pmp::{AdjointEnsemble, AdjointPath};
use crate::sdde::{simulate_forward, ForwardEnsemble};
use crate::stats::mean_and_stderr;

// ============================================================================
// Value / adjoint relations
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelationTolerances {
    /// `|V_t − G(u_path)|`.
    pub a: f64,
    /// `max_u G(u) − G(u_path)`.
    pub b: f64,
    /// Relative error of each adjoint relation.
    pub c: f64,
}

impl Default for RelationTolerances {
    fn default() -> Self {
        Self { a: 1e-4, b: 1e-4, c: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationsReport {
    /// (a) `V_t = G` at the path control.
    pub time_derivative: CheckReport,
    /// (b) the path control maximises `G` over the box.
    pub maximality: CheckReport,
    /// `|−V_t + sup_u G|` at the path points, whatever the path control.
    pub hjb_sup: CheckReport,
    /// (c) `p₁ = V_x q`, `p₂ = V_x1 q`, `k₁ = [V_xxσ + V_x f_z]q`,
    /// `k₂ = [V_xx1σ + V_x1 f_z]q`, once per supplied adjoint family.
    pub adjoint: Vec<CheckReport>,
}

impl RelationsReport {
    pub fn records(&self) -> Vec<&CheckReport> {
        let mut out = vec![&self.time_derivative, &self.maximality, &self.hjb_sup];
        out.extend(self.adjoint.iter());
        out
    }

    pub fn pass(&self) -> bool {
        self.records().iter().all(|r| r.pass)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Evaluates the relation families at every node of every path.
///
/// `value_adjoints` carries the value-derived `(Y*, Z*)` and `q`; each entry
/// of `families` is a named adjoint ensemble to hold against the formulas
/// (typically the value-derived one and, when available, closed forms).
pub fn relations_report<C, M>(
    cand: &C,
    model: &M,
    ensemble: &ForwardEnsemble,
    value_adjoints: &AdjointEnsemble,
    families: &[(&str, &[AdjointPath])],
    grid: &ControlGrid,
    tol: &RelationTolerances,
) -> Result<RelationsReport>
where
    C: ValueCandidate + ?Sized,
    M: StructuredModel + ?Sized,
{
    let m = ensemble.n_paths();
    if value_adjoints.backward.len() != m || families.iter().any(|(_, f)| f.len() != m) {
        return Err(LabError::InvalidState("adjoint families do not match the ensemble".into()));
    }
    // (a), (b) and the sup residual; the sup is the refined grid maximum with
    // the path control as an extra candidate, so (b) holds off-grid too.
    let per_path: Vec<Result<[f64; 3]>> = ensemble
        .paths
        .par_iter()
        .map(|path| {
            let mut worst = [0.0f64; 3];
            for k in 0..path.times.len() {
                let (t, x, x1, x2) = (path.times[k], path.x[k], path.x1[k], path.x2[k]);
                let args = GArgs::from_value(cand, t, x, x1);
                let objective = |u: &[f64]| generalized_hamiltonian(model, t, x, x1, x2, u, &args);
                let g_path = objective(&path.controls[k]);
                let (_, sup) = grid.maximize(objective, std::slice::from_ref(&path.controls[k]))?;
                let vt = cand.v_s(t, x, x1);
                worst[0] = nan_max(worst[0], (vt - g_path).abs());
                worst[1] = nan_max(worst[1], (sup - g_path).max(0.0));
                worst[2] = nan_max(worst[2], (vt - sup).abs());
            }
            Ok(worst)
        })
        .collect();
    let per_path = per_path.into_iter().collect::<Result<Vec<_>>>()?;
    let nodes: usize = ensemble.paths.iter().map(|p| p.times.len()).sum();
    let fold = |i: usize| per_path.iter().fold(0.0, |a, w| nan_max(a, w[i]));

    let mut adjoint = Vec::with_capacity(families.len());
    for (name, fam) in families {
        let worst = ensemble
            .paths
            .par_iter()
            .zip(fam.par_iter().zip(value_adjoints.adjoints.par_iter().zip(value_adjoints.backward.par_iter())))
            .map(|(path, (a, (va, yz)))| {
                let mut w = 0.0f64;
                for k in 0..path.times.len() {
                    let (t, x, x1, x2) = (path.times[k], path.x[k], path.x1[k], path.x2[k]);
                    let u = &path.controls[k];
                    let q = va.q[k];
                    let sig = model.sigma(t, x, x1, u);
                    let fz = model.df_dz(t, x, x1, x2, yz.y[k], yz.z[k], u);
                    let (vx, vx1) = (cand.v_x(t, x, x1), cand.v_x1(t, x, x1));
                    let errs = [
                        rel_err(a.p1[k], vx * q),
                        rel_err(a.p2[k], vx1 * q),
                        rel_err(a.k1[k], (cand.v_xx(t, x, x1) * sig + vx * fz) * q),
                        rel_err(a.k2[k], (cand.v_xx1(t, x, x1) * sig + vx1 * fz) * q),
                        rel_err(a.q[k], q),
                    ];
                    w = errs.iter().fold(w, |acc, e| nan_max(acc, *e));
                }
                w
            })
            .reduce(|| 0.0, nan_max);
        adjoint.push(CheckReport::new(format!("adjoint_relations_{name}"), nodes, worst, tol.c));
    }

    Ok(RelationsReport {
        time_derivative: CheckReport::new("relation_time_derivative", nodes, fold(0), tol.a),
        maximality: CheckReport::new("relation_maximality", nodes, fold(1), tol.b),
        hjb_sup: CheckReport::new("relation_hjb_sup", nodes, fold(2), tol.a),
        adjoint,
    })
}

// ============================================================================
// Policy comparisons
// ============================================================================

/// Multiplies control coordinates by fixed factors.
pub struct ScaledPolicy<'a> {
    pub inner: &'a dyn FeedbackPolicy,
    pub factors: Control,
}

impl FeedbackPolicy for ScaledPolicy<'_> {
    fn evaluate(&self, t: f64, x: f64, x1: f64) -> Control {
        let mut u = self.inner.evaluate(t, x, x1);
        for (v, f) in u.iter_mut().zip(&self.factors) {
            *v *= f;
        }
        u
    }
}

/// Replaces one control coordinate by a constant.
pub struct OverridePolicy<'a> {
    pub inner: &'a dyn FeedbackPolicy,
    pub coordinate: usize,
    pub value: f64,
}

impl FeedbackPolicy for OverridePolicy<'_> {
    fn evaluate(&self, t: f64, x: f64, x1: f64) -> Control {
        let mut u = self.inner.evaluate(t, x, x1);
        if let Some(v) = u.get_mut(self.coordinate) {
            *v = self.value;
        }
        u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationResult {
    pub name: String,
    pub perturbed_j: f64,
    pub perturbed_stderr: f64,
    /// Mean of per-path `J_pert − J_base` on common Brownian increments.
    pub paired_diff_mean: f64,
    pub paired_diff_stderr: f64,
    /// `paired_diff_mean ≥ −z·paired_diff_stderr`.
    pub pass: bool,
    /// `paired_diff_mean > z·paired_diff_stderr`.
    pub significant: bool,
    /// The perturbed cost is no lower than `V(s)`: `J_pert ≥ V − z·stderr`.
    pub above_value: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub z: f64,
    pub base_j: f64,
    pub base_stderr: f64,
    pub perturbations: Vec<PerturbationResult>,
}

impl ComparisonReport {
    pub fn pass(&self) -> bool {
        self.perturbations.iter().all(|p| p.pass)
    }
}

/// Costs of `base` and each perturbation on identical Brownian draws (same
/// seed and path indices), judged at `z` standard errors. `value_at_s`, when
/// given, is checked as a lower bound for every perturbed cost.
#[allow(clippy::too_many_arguments)]
pub fn compare_controls<M>(
    model: &M,
    base: &dyn FeedbackPolicy,
    perturbations: &[(&str, &dyn FeedbackPolicy)],
    initial: &DelayBuffer,
    config: &SimConfig,
    basis: &RegressionBasis,
    value_at_s: Option<f64>,
    z: f64,
) -> Result<ComparisonReport>
where
    M: StructuredModel + ?Sized,
{
    let base_cost = recursive_cost(model, base, initial, config, basis)?;
    let mut results = Vec::with_capacity(perturbations.len());
    for (name, policy) in perturbations {
        let c = recursive_cost(model, *policy, initial, config, basis)?;
        let diffs: Vec<f64> = c.pathwise.iter().zip(&base_cost.pathwise).map(|(a, b)| a - b).collect();
        let (mean, se) = mean_and_stderr(&diffs);
        results.push(PerturbationResult {
            name: (*name).to_string(),
            perturbed_j: c.j,
            perturbed_stderr: c.stderr,
            paired_diff_mean: mean,
            paired_diff_stderr: se,
            pass: mean >= -z * se,
            significant: mean > z * se,
            above_value: value_at_s.map(|v| c.j >= v - z * c.stderr),
        });
    }
    Ok(ComparisonReport { z, base_j: base_cost.j, base_stderr: base_cost.stderr, perturbations: results })
}

// ============================================================================
// LSMC cost against the closed form
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCheckReport {
    pub report: CheckReport,
    pub y_at_s: f64,
    pub stderr: f64,
    /// `−V(s, x, x₁)` at the simulated initial state.
    pub closed_form_y: f64,
    pub bias_allowance: f64,
    pub cost: CostEstimate,
}

/// `|Y(s) − (−V(s, x, x₁))| ≤ z·stderr + bias_coeff·h` under `policy`
/// (normally the closed-form optimum), with `(x, x₁)` read off the initial buffer.
pub fn closed_form_cost_check(
    model: &MertonModel,
    value: &MertonValue,
    policy: &dyn FeedbackPolicy,
    initial: &DelayBuffer,
    config: &SimConfig,
    basis: &RegressionBasis,
    z: f64,
    bias_coeff: f64,
) -> Result<CostCheckReport> {
    let ensemble = simulate_forward(model, policy, initial, config)?;
    let sol = solve_backward(model, &ensemble, basis)?;
    let p0 = &ensemble.paths[0];
    let target = -value.value(p0.times[0], p0.x[0], p0.x1[0])?;
    let bias = bias_coeff * ensemble.step_h;
    let tolerance = z * sol.stderr + bias;
    let diff = (sol.y_at_s - target).abs();
    Ok(CostCheckReport {
        report: CheckReport {
            check: "closed_form_cost".into(),
            probes: ensemble.n_paths(),
            max_residual: diff,
            tolerance,
            pass: diff <= tolerance,
        },
        y_at_s: sol.y_at_s,
        stderr: sol.stderr,
        closed_form_y: target,
        bias_allowance: bias,
        cost: CostEstimate::from_solution(&sol),
    })
}
