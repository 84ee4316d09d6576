//! Maximum-principle side: the Hamiltonian `H`, adjoint processes built from
//! a value function, and the conditions of the sufficient maximum principle.

use std::io::{self, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::bsdde::BackwardPath;
use crate::error::{LabError, Result};
use crate::fmt_float;
use crate::hjb::{nan_max, CheckReport, ValueCandidate};
use crate::model::{fd_step, StructuredModel};
use crate::optimize::ControlGrid;
use crate::sdde::{ForwardEnsemble, ForwardPath};
use crate::stats::mean_and_stderr;

/// Relative central-difference step for first derivatives of `H`.
pub const H_FD_STEP: f64 = 1e-6;
/// Relative step for the numerical Hessian of `H`.
pub const HESSIAN_FD_STEP: f64 = 1e-4;

/// `(p₁, p₂, p₃, q, k₁, k₂)` on the forward grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub p3: Vec<f64>,
    pub q: Vec<f64>,
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
}

impl AdjointPath {
    pub fn zeros(n: usize) -> Self {
        Self {
            p1: vec![0.0; n],
            p2: vec![0.0; n],
            p3: vec![0.0; n],
            q: vec![0.0; n],
            k1: vec![0.0; n],
            k2: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p1.is_empty()
    }

    pub fn slice(&self, k: usize) -> AdjointSlice {
        AdjointSlice { p1: self.p1[k], p2: self.p2[k], q: self.q[k], k1: self.k1[k] }
    }
}

/// Adjoint values entering `H` at one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdjointSlice {
    pub p1: f64,
    pub p2: f64,
    pub q: f64,
    pub k1: f64,
}

/// Linear terminal payoff `φ(x, x₁) = Mx + Nx₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearTerminal {
    pub m: f64,
    pub n: f64,
}

impl LinearTerminal {
    pub fn value(&self, x: f64, x1: f64) -> f64 {
        self.m * x + self.n * x1
    }

    /// Terminal adjoints `(p₁(T), p₂(T)) = (−M q(T), −N q(T))`.
    pub fn terminal_adjoints(&self, q_terminal: f64) -> (f64, f64) {
        (-self.m * q_terminal, -self.n * q_terminal)
    }
}

/// `H = p₁b + p₂(x − λx₁ − e^{−λδ}x₂) + k₁σ − q·f`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian<M: StructuredModel + ?Sized>(
    model: &M,
    t: f64,
    x: f64,
    x1: f64,
    x2: f64,
    y: f64,
    z: f64,
    u: &[f64],
    a: &AdjointSlice,
) -> f64 {
    a.p1 * model.drift(t, x, x1, x2, u) + a.p2 * model.params().transport(x, x1, x2) + a.k1 * model.sigma(t, x, x1, u)
        - a.q * model.generator(t, x, x1, x2, y, z, u)
}

/// `dq = q f_y dt + q f_z dW`, `q(s) = 1`, stepped as
/// `q_{k+1} = q_k exp((f_y − ½f_z²)h + f_z ΔW_k)`: exact for constant
/// `f_y`, `f_z` and positive by construction.
pub fn simulate_q<M: StructuredModel + ?Sized>(model: &M, path: &ForwardPath, yz: &BackwardPath) -> Vec<f64> {
    let n = path.n_steps();
    let mut q = Vec::with_capacity(n + 1);
    q.push(1.0);
    for k in 0..n {
        let (t, x, x1, x2) = (path.times[k], path.x[k], path.x1[k], path.x2[k]);
        let u = &path.controls[k];
        let h = path.times[k + 1] - t;
        let fy = model.df_dy(t, x, x1, x2, yz.y[k], yz.z[k], u);
        let fz = model.df_dz(t, x, x1, x2, yz.y[k], yz.z[k], u);
        q.push(q[k] * ((fy - 0.5 * fz * fz) * h + fz * path.dw[k]).exp());
    }
    q
}

/// `Y* = −V`, `Z* = −V_x σ*` along the path.
pub fn backward_from_value<C, M>(cand: &C, model: &M, path: &ForwardPath) -> BackwardPath
where
    C: ValueCandidate + ?Sized,
    M: StructuredModel + ?Sized,
{
    let n = path.times.len();
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for k in 0..n {
        let (t, x, x1) = (path.times[k], path.x[k], path.x1[k]);
        y.push(-cand.v(t, x, x1));
        z.push(-cand.v_x(t, x, x1) * model.sigma(t, x, x1, &path.controls[k]));
    }
    BackwardPath { y, z }
}

/// `p₁ = V_x q`, `p₂ = V_x1 q`, `k₁ = [V_xx σ + V_x f_z]q`,
/// `k₂ = [V_xx1 σ + V_x1 f_z]q`, `p₃ = 0`.
pub fn adjoint_from_value<C, M>(cand: &C, model: &M, path: &ForwardPath, yz: &BackwardPath, q: &[f64]) -> AdjointPath
where
    C: ValueCandidate + ?Sized,
    M: StructuredModel + ?Sized,
{
    let n = path.times.len();
    let mut a = AdjointPath::zeros(n);
    #[allow(clippy::needless_range_loop)]
    for k in 0..n {
        let (t, x, x1, x2) = (path.times[k], path.x[k], path.x1[k], path.x2[k]);
        let u = &path.controls[k];
        let sig = model.sigma(t, x, x1, u);
        let fz = model.df_dz(t, x, x1, x2, yz.y[k], yz.z[k], u);
        let (vx, vx1) = (cand.v_x(t, x, x1), cand.v_x1(t, x, x1));
        a.p1[k] = vx * q[k];
        a.p2[k] = vx1 * q[k];
        a.q[k] = q[k];
        a.k1[k] = (cand.v_xx(t, x, x1) * sig + vx * fz) * q[k];
        a.k2[k] = (cand.v_xx1(t, x, x1) * sig + vx1 * fz) * q[k];
    }
    a
}

/// Value-derived `(Y*, Z*)` and adjoints for every path of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointEnsemble {
    pub backward: Vec<BackwardPath>,
    pub adjoints: Vec<AdjointPath>,
}

pub fn adjoints_from_value<C, M>(cand: &C, model: &M, ensemble: &ForwardEnsemble) -> AdjointEnsemble
where
    C: ValueCandidate + ?Sized,
    M: StructuredModel + ?Sized,
{
    let (backward, adjoints): (Vec<_>, Vec<_>) = ensemble
        .paths
        .par_iter()
        .map(|path| {
            let yz = backward_from_value(cand, model, path);
            let q = simulate_q(model, path, &yz);
            let adj = adjoint_from_value(cand, model, path, &yz, &q);
            (yz, adj)
        })
        .unzip();
    AdjointEnsemble { backward, adjoints }
}

/// Writes `path,t,p1,p2,p3,q,k1,k2`.
pub fn write_adjoint_csv<W: Write>(ensemble: &ForwardEnsemble, adj: &[AdjointPath], out: &mut W) -> io::Result<()> {
    writeln!(out, "path,t,p1,p2,p3,q,k1,k2")?;
    for (fp, a) in ensemble.paths.iter().zip(adj) {
        for k in 0..fp.times.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                fp.index,
                fmt_float(fp.times[k]),
                fmt_float(a.p1[k]),
                fmt_float(a.p2[k]),
                fmt_float(a.p3[k]),
                fmt_float(a.q[k]),
                fmt_float(a.k1[k]),
                fmt_float(a.k2[k])
            )?;
        }
    }
    Ok(())
}

fn check_shapes(ensemble: &ForwardEnsemble, adj: &AdjointEnsemble) -> Result<()> {
    if adj.adjoints.len() != ensemble.n_paths() || adj.backward.len() != ensemble.n_paths() {
        return Err(LabError::InvalidState("adjoint ensemble does not match the forward ensemble".into()));
    }
    Ok(())
}

// ============================================================================
// p₃ ≡ 0
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct P3Report {
    /// `max |b₂p₁ − e^{−λδ}p₂ − q f₂| / max |p₁|`, worst path.
    pub pointwise: CheckReport,
    /// `sup |p₃| / max |p₁|` for `p₃` back-integrated from `p₃(T) = 0`.
    pub back_integrated: CheckReport,
}

impl P3Report {
    pub fn pass(&self) -> bool {
        self.pointwise.pass && self.back_integrated.pass
    }
}

/// `∂H/∂x₂ = b₂p₁ − e^{−λδ}p₂ − q f₂`; `p₃` vanishes iff this does.
pub fn check_p3_zero<M: StructuredModel + ?Sized>(
    model: &M,
    ensemble: &ForwardEnsemble,
    adj: &AdjointEnsemble,
    tolerance: f64,
) -> Result<P3Report> {
    check_shapes(ensemble, adj)?;
    let decay = model.params().decay();
    let per_path: Vec<(f64, f64)> = ensemble
        .paths
        .par_iter()
        .zip(adj.adjoints.par_iter().zip(adj.backward.par_iter()))
        .map(|(path, (a, yz))| {
            let n = path.times.len();
            let hx2: Vec<f64> = (0..n)
                .map(|k| {
                    let (t, x, x1) = (path.times[k], path.x[k], path.x1[k]);
                    let u = &path.controls[k];
                    model.b2(t, x, x1, u) * a.p1[k] - decay * a.p2[k] - a.q[k] * model.f2(t, x, x1, yz.y[k], yz.z[k], u)
                })
                .collect();
            let scale = a.p1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let pointwise = hx2.iter().fold(0.0, |m, v| nan_max(m, v.abs()));
            // −dp₃ = H_x2 dt backward from p₃(T) = 0.
            let mut p3 = 0.0f64;
            let mut sup = 0.0f64;
            for k in (0..n - 1).rev() {
                p3 += hx2[k] * (path.times[k + 1] - path.times[k]);
                sup = nan_max(sup, p3.abs());
            }
            (pointwise / scale, sup / scale)
        })
        .collect();
    let worst_point = per_path.iter().fold(0.0, |m, v| nan_max(m, v.0));
    let worst_sup = per_path.iter().fold(0.0, |m, v| nan_max(m, v.1));
    let n = ensemble.n_paths();
    Ok(P3Report {
        pointwise: CheckReport::new("p3_zero", n, worst_point, tolerance),
        back_integrated: CheckReport::new("p3_back_integration", n, worst_sup, tolerance),
    })
}

// ============================================================================
// Maximum condition
// ============================================================================

fn h_gradient_u<M: StructuredModel + ?Sized>(
    model: &M,
    path: &ForwardPath,
    yz: &BackwardPath,
    a: &AdjointSlice,
    k: usize,
) -> Vec<f64> {
    let (t, x, x1, x2) = (path.times[k], path.x[k], path.x1[k], path.x2[k]);
    let u0 = &path.controls[k];
    let mut grad = Vec::with_capacity(u0.len());
    let mut u = u0.clone();
    for d in 0..u0.len() {
        let h = fd_step(u0[d], H_FD_STEP);
        u[d] = u0[d] + h;
        let hp = hamiltonian(model, t, x, x1, x2, yz.y[k], yz.z[k], &u, a);
        u[d] = u0[d] - h;
        let hm = hamiltonian(model, t, x, x1, x2, yz.y[k], yz.z[k], &u, a);
        u[d] = u0[d];
        grad.push((hp - hm) / (2.0 * h));
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaximumConditionReport {
    /// `max ∇_u H(u*)·(u* − u)` over nodes and grid controls.
    pub variational: CheckReport,
    /// `max |∂H/∂u_d(u*)|` over nodes where `u*` is interior, per coordinate.
    pub gradient: Vec<CheckReport>,
    pub interior_nodes: usize,
}

impl MaximumConditionReport {
    pub fn pass(&self) -> bool {
        self.variational.pass && self.gradient.iter().all(|r| r.pass)
    }
}

/// Checks `∂H/∂u(u*)·(u* − u) ≤ tol` for every grid `u`, and
/// `|∂H/∂u(u*)| < tol` at nodes where `u*` is at least `margin` inside the box.
pub fn maximum_condition_check<M: StructuredModel + ?Sized>(
    model: &M,
    ensemble: &ForwardEnsemble,
    adj: &AdjointEnsemble,
    grid: &ControlGrid,
    tolerance: f64,
    margin: f64,
) -> Result<MaximumConditionReport> {
    check_shapes(ensemble, adj)?;
    let dim = model.control_set().dim();
    let mut points = Vec::with_capacity(grid.len());
    grid.for_each_point(|u| points.push(u.to_vec()));
    let per_path: Vec<(f64, Vec<f64>, usize)> = ensemble
        .paths
        .par_iter()
        .zip(adj.adjoints.par_iter().zip(adj.backward.par_iter()))
        .map(|(path, (a, yz))| {
            let mut var = 0.0f64;
            let mut grad_worst = vec![0.0f64; dim];
            let mut interior = 0usize;
            for k in 0..path.times.len() {
                let g = h_gradient_u(model, path, yz, &a.slice(k), k);
                let us = &path.controls[k];
                for u in &points {
                    let dot: f64 = g.iter().zip(us.iter().zip(u)).map(|(gd, (a, b))| gd * (a - b)).sum();
                    var = nan_max(var, dot);
                }
                if model.control_set().is_interior(us, margin) {
                    interior += 1;
                    for d in 0..dim {
                        grad_worst[d] = nan_max(grad_worst[d], g[d].abs());
                    }
                }
            }
            (var, grad_worst, interior)
        })
        .collect();
    let nodes = ensemble.paths.iter().map(|p| p.times.len()).sum();
    let var = per_path.iter().fold(0.0, |m, v| nan_max(m, v.0));
    let interior = per_path.iter().map(|v| v.2).sum();
    let gradient = (0..dim)
        .map(|d| {
            let worst = per_path.iter().fold(0.0, |m, v| nan_max(m, v.1[d]));
            CheckReport::new(format!("maximum_condition_gradient_u{d}"), interior, worst, tolerance)
        })
        .collect();
    Ok(MaximumConditionReport {
        variational: CheckReport::new("maximum_condition_variational", nodes, var, tolerance),
        gradient,
        interior_nodes: interior,
    })
}

// ============================================================================
// Convexity
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    /// Worst `max(0, −λ_min)/(1 + |λ_max|)` over probes; a sampling
    /// heuristic, not a certificate.
    pub report: CheckReport,
    pub min_eigenvalue: f64,
}

/// Numerical Hessian of `H` in `(x, x₁, x₂, y, z, u…)` at each probe, with
/// the adjoint slice held fixed. Passes iff every probe has
/// `λ_min > −tolerance·(1 + |λ_max|)`.
pub fn convexity_spot_check<M: StructuredModel + ?Sized>(
    model: &M,
    t: f64,
    slice: &AdjointSlice,
    probes: &[Vec<f64>],
    tolerance: f64,
) -> Result<ConvexityReport> {
    let dim = 5 + model.control_set().dim();
    if let Some(bad) = probes.iter().find(|p| p.len() != dim) {
        return Err(LabError::Configuration(format!("convexity probe has {} coordinates, expected {dim}", bad.len())));
    }
    let eval = |v: &[f64]| hamiltonian(model, t, v[0], v[1], v[2], v[3], v[4], &v[5..], slice);
    let mut worst = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for probe in probes {
        let steps: Vec<f64> = probe.iter().map(|v| fd_step(*v, HESSIAN_FD_STEP)).collect();
        let f0 = eval(probe);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut v = probe.clone();
        for i in 0..dim {
            let hi = steps[i];
            v[i] = probe[i] + hi;
            let fp = eval(&v);
            v[i] = probe[i] - hi;
            let fm = eval(&v);
            v[i] = probe[i];
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
            for j in 0..i {
                let hj = steps[j];
                let mut corner = |si: f64, sj: f64| {
                    v[i] = probe[i] + si * hi;
                    v[j] = probe[j] + sj * hj;
                    let r = eval(&v);
                    v[i] = probe[i];
                    v[j] = probe[j];
                    r
                };
                let hij = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * hi * hj);
                hess[(i, j)] = hij;
                hess[(j, i)] = hij;
            }
        }
        if hess.iter().any(|e| !e.is_finite()) {
            worst = f64::NAN;
            continue;
        }
        let eig = SymmetricEigen::new(hess).eigenvalues;
        let lo = eig.min();
        let hi = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        min_eig = min_eig.min(lo);
        worst = nan_max(worst, (-lo).max(0.0) / (1.0 + hi));
    }
    Ok(ConvexityReport { report: CheckReport::new("convexity_spot_check", probes.len(), worst, tolerance), min_eigenvalue: min_eig })
}

// ============================================================================
// Adjoint dynamics
// ============================================================================

/// Ensemble statistics of the summed Euler residual of
/// `−dp₁ = ∂H/∂x dt − k₁ dW`: `Σ_k p₁_{k+1} − p₁_k + H_x h − k₁ΔW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftResidual {
    pub mean: f64,
    pub stderr: f64,
    pub scale: f64,
}

pub fn p1_drift_residual<M: StructuredModel + ?Sized>(
    model: &M,
    ensemble: &ForwardEnsemble,
    adj: &AdjointEnsemble,
) -> Result<DriftResidual> {
    check_shapes(ensemble, adj)?;
    let sums: Vec<f64> = ensemble
        .paths
        .par_iter()
        .zip(adj.adjoints.par_iter().zip(adj.backward.par_iter()))
        .map(|(path, (a, yz))| {
            let mut acc = 0.0;
            for k in 0..path.n_steps() {
                let (t, x, x1, x2) = (path.times[k], path.x[k], path.x1[k], path.x2[k]);
                let u = &path.controls[k];
                let s = a.slice(k);
                let hx = fd_step(x, H_FD_STEP);
                let h_x = (hamiltonian(model, t, x + hx, x1, x2, yz.y[k], yz.z[k], u, &s)
                    - hamiltonian(model, t, x - hx, x1, x2, yz.y[k], yz.z[k], u, &s))
                    / (2.0 * hx);
                let h = path.times[k + 1] - t;
                acc += a.p1[k + 1] - a.p1[k] + h_x * h - a.k1[k] * path.dw[k];
            }
            acc
        })
        .collect();
    let (mean, stderr) = mean_and_stderr(&sums);
    let scale = adj.adjoints.iter().map(|a| a.p1[0].abs()).fold(0.0, f64::max);
    Ok(DriftResidual { mean, stderr, scale })
}
