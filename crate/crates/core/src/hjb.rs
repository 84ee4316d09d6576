//! Dynamic-programming side: the generalized Hamiltonian `G`, HJB residuals
//! of candidate value functions, and the first-order compatibility system
//! that makes the value function independent of the pointwise delay.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{fd_step, Control, FeedbackPolicy, StructuredModel};
use crate::optimize::ControlGrid;
use crate::seed::path_rng;

/// Relative central-difference step for coefficient partials.
pub const FD_REL_STEP: f64 = 1e-5;

/// Candidate value function `V(s, x, x₁)` with its partials.
pub trait ValueCandidate: Send + Sync {
    fn v(&self, s: f64, x: f64, x1: f64) -> f64;
    fn v_s(&self, s: f64, x: f64, x1: f64) -> f64;
    fn v_x(&self, s: f64, x: f64, x1: f64) -> f64;
    fn v_xx(&self, s: f64, x: f64, x1: f64) -> f64;
    fn v_x1(&self, s: f64, x: f64, x1: f64) -> f64;

    /// Mixed partial `∂²V/∂x∂x₁`; central difference of `v_x1` in `x` unless overridden.
    fn v_xx1(&self, s: f64, x: f64, x1: f64) -> f64 {
        let h = fd_step(x, FD_REL_STEP);
        (self.v_x1(s, x + h, x1) - self.v_x1(s, x - h, x1)) / (2.0 * h)
    }
}

/// The four adjoint slots `(k, p, R, q)` of `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GArgs {
    pub k: f64,
    pub p: f64,
    pub r: f64,
    pub q: f64,
}

impl GArgs {
    /// `(−V, −V_x, −V_xx, −V_x1)` at `(s, x, x₁)`.
    pub fn from_value<C: ValueCandidate + ?Sized>(cand: &C, s: f64, x: f64, x1: f64) -> Self {
        Self { k: -cand.v(s, x, x1), p: -cand.v_x(s, x, x1), r: -cand.v_xx(s, x, x1), q: -cand.v_x1(s, x, x1) }
    }
}

/// `G = b·p + ½σ²R + (x − λx₁ − e^{−λδ}x₂)q + f(s, x, x₁, x₂, k, σp, u)`.
#[allow(clippy::too_many_arguments)]
pub fn generalized_hamiltonian<M: StructuredModel + ?Sized>(
    model: &M,
    s: f64,
    x: f64,
    x1: f64,
    x2: f64,
    u: &[f64],
    args: &GArgs,
) -> f64 {
    let sig = model.sigma(s, x, x1, u);
    model.drift(s, x, x1, x2, u) * args.p
        + 0.5 * sig * sig * args.r
        + model.params().transport(x, x1, x2) * args.q
        + model.generator(s, x, x1, x2, args.k, sig * args.p, u)
}

/// One evaluation of `−V_s + sup_u G(…, −V, −V_x, −V_xx, −V_x1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbPoint {
    pub residual: f64,
    pub argmax: Control,
    pub sup_g: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn hjb_residual<M, C>(
    model: &M,
    cand: &C,
    s: f64,
    x: f64,
    x1: f64,
    x2: f64,
    maximizer: Option<&dyn FeedbackPolicy>,
    grid: &ControlGrid,
) -> Result<HjbPoint>
where
    M: StructuredModel + ?Sized,
    C: ValueCandidate + ?Sized,
{
    let args = GArgs::from_value(cand, s, x, x1);
    let extra: Vec<Control> = maximizer.map(|m| vec![m.evaluate(s, x, x1)]).unwrap_or_default();
    let (argmax, sup_g) = grid.maximize(|u| generalized_hamiltonian(model, s, x, x1, x2, u, &args), &extra)?;
    Ok(HjbPoint { residual: -cand.v_s(s, x, x1) + sup_g, argmax, sup_g })
}

/// `V(T, x, x₁) + φ(x, x₁)`, zero for a value function meeting the terminal condition.
pub fn terminal_residual<M, C>(model: &M, cand: &C, x: f64, x1: f64) -> f64
where
    M: StructuredModel + ?Sized,
    C: ValueCandidate + ?Sized,
{
    cand.v(model.params().horizon_t, x, x1) + model.phi(x, x1)
}

/// Verdict record shared by every check: `{check, probes, max_residual, tolerance, pass}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub probes: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    /// Passes iff `max_residual < tolerance`; a NaN residual fails.
    pub fn new(check: impl Into<String>, probes: usize, max_residual: f64, tolerance: f64) -> Self {
        Self { check: check.into(), probes, max_residual, tolerance, pass: max_residual < tolerance }
    }

    /// Record for a check whose defect must exceed `threshold` (negative controls).
    pub fn exceeding(check: impl Into<String>, probes: usize, max_residual: f64, threshold: f64) -> Self {
        Self { check: check.into(), probes, max_residual, tolerance: threshold, pass: max_residual > threshold }
    }
}

/// Running maximum that lets NaN win, so a NaN anywhere fails the check.
pub(crate) fn nan_max(acc: f64, v: f64) -> f64 {
    if acc.is_nan() || v.is_nan() {
        f64::NAN
    } else {
        acc.max(v)
    }
}

/// A probe location `(s, x, x₁)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Probe {
    pub s: f64,
    pub x: f64,
    pub x1: f64,
}

/// Tensor grid `x ∈ [0.5, 5]`, `x₁ ∈ [0.25, 5]` (9 nodes each) at every `s`.
pub fn default_probes(s_values: &[f64]) -> Vec<Probe> {
    let lin = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / 8.0;
    let mut out = Vec::with_capacity(81 * s_values.len());
    for &s in s_values {
        for i in 0..9 {
            for j in 0..9 {
                out.push(Probe { s, x: lin(0.5, 5.0, i), x1: lin(0.25, 5.0, j) });
            }
        }
    }
    out
}

/// `max |−V_s + sup G|` over the probes, with `x₂ = x`.
pub fn hjb_residual_check<M, C>(
    model: &M,
    cand: &C,
    probes: &[Probe],
    maximizer: Option<&dyn FeedbackPolicy>,
    grid: &ControlGrid,
    tolerance: f64,
) -> Result<CheckReport>
where
    M: StructuredModel + ?Sized,
    C: ValueCandidate + ?Sized,
{
    let mut worst = 0.0f64;
    for p in probes {
        let r = hjb_residual(model, cand, p.s, p.x, p.x1, p.x, maximizer, grid)?;
        worst = nan_max(worst, r.residual.abs());
    }
    Ok(CheckReport::new("hjb_residual", probes.len(), worst, tolerance))
}

/// Per-probe spread `max − min` of the HJB residual over the `x₂` grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct X2Report {
    pub report: CheckReport,
    pub spreads: Vec<f64>,
}

pub fn x2_independence_check<M, C>(
    model: &M,
    cand: &C,
    probes: &[Probe],
    x2_values: &[f64],
    maximizer: Option<&dyn FeedbackPolicy>,
    grid: &ControlGrid,
    tolerance: f64,
) -> Result<X2Report>
where
    M: StructuredModel + ?Sized,
    C: ValueCandidate + ?Sized,
{
    let mut spreads = Vec::with_capacity(probes.len());
    for p in probes {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut bad = false;
        for &x2 in x2_values {
            let r = hjb_residual(model, cand, p.s, p.x, p.x1, x2, maximizer, grid)?.residual;
            bad |= r.is_nan();
            lo = lo.min(r);
            hi = hi.max(r);
        }
        spreads.push(if bad { f64::NAN } else { (hi - lo).max(0.0) });
    }
    let worst = spreads.iter().fold(0.0, |a, b| nan_max(a, *b));
    Ok(X2Report { report: CheckReport::new("x2_independence", probes.len(), worst, tolerance), spreads })
}

/// `max(1e-6, 1e-3·h_fd)` for the relative step `h_fd`.
pub fn compatibility_tolerance() -> f64 {
    1e-6f64.max(1e-3 * FD_REL_STEP)
}

/// The four residual fields of the compatibility system, plus the `f₁`
/// equation re-checked on a free `(y, z)` grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompatibilityReport {
    pub b_hat: CheckReport,
    pub sigma: CheckReport,
    pub f1: CheckReport,
    pub phi: CheckReport,
    pub f1_free_yz: CheckReport,
}

impl CompatibilityReport {
    pub fn records(&self) -> [&CheckReport; 5] {
        [&self.b_hat, &self.sigma, &self.f1, &self.phi, &self.f1_free_yz]
    }

    pub fn pass(&self) -> bool {
        self.records().iter().all(|r| r.pass)
    }

    /// Largest residual among the four primary fields.
    pub fn max_residual(&self) -> f64 {
        [&self.b_hat, &self.sigma, &self.f1, &self.phi].iter().fold(0.0, |a, r| nan_max(a, r.max_residual))
    }
}

/// Residuals `F_x₁ + e^{λδ}[f₂ − b₂F_x]` for `F ∈ {b̂, σ, f₁, φ}` with
/// `b̂ = b₁ + e^{λδ}(x − λx₁)b₂`.
///
/// The control is the maximiser `u*(s, x, x₁)` (the supplied policy, else the
/// grid argmax of `G` at `x₂ = x`), re-evaluated at the shifted points, so the
/// partials are total derivatives along the feedback. The `(y, z)` slots are
/// `y = −V`, `z = −σV_x` at the probe.
pub fn compatibility_pde_check<M, C>(
    model: &M,
    cand: &C,
    probes: &[Probe],
    maximizer: Option<&dyn FeedbackPolicy>,
    grid: &ControlGrid,
    tolerance: f64,
) -> Result<CompatibilityReport>
where
    M: StructuredModel + ?Sized,
    C: ValueCandidate + ?Sized,
{
    let growth = model.params().growth();
    let lambda = model.params().lambda;
    let ustar = |s: f64, x: f64, x1: f64| -> Result<Control> {
        match maximizer {
            Some(m) => {
                let mut u = m.evaluate(s, x, x1);
                grid.clamp(&mut u);
                Ok(u)
            }
            None => Ok(hjb_residual(model, cand, s, x, x1, x, None, grid)?.argmax),
        }
    };

    let mut worst = [0.0f64; 5];
    for p in probes {
        let (s, x, x1) = (p.s, p.x, p.x1);
        let hx = fd_step(x, FD_REL_STEP);
        let hx1 = fd_step(x1, FD_REL_STEP);
        let u0 = ustar(s, x, x1)?;
        let shifted = [
            ustar(s, x + hx, x1)?,
            ustar(s, x - hx, x1)?,
            ustar(s, x, x1 + hx1)?,
            ustar(s, x, x1 - hx1)?,
        ];
        let y0 = -cand.v(s, x, x1);
        let z0 = -model.sigma(s, x, x1, &u0) * cand.v_x(s, x, x1);
        let b2 = model.b2(s, x, x1, &u0);

        let pts = [(x + hx, x1), (x - hx, x1), (x, x1 + hx1), (x, x1 - hx1)];
        let partials = |f: &dyn Fn(f64, f64, &[f64]) -> f64| {
            let v: Vec<f64> = pts.iter().zip(&shifted).map(|((a, b), u)| f(*a, *b, u)).collect();
            ((v[0] - v[1]) / (2.0 * hx), (v[2] - v[3]) / (2.0 * hx1))
        };
        let residual = |f: &dyn Fn(f64, f64, &[f64]) -> f64, y: f64, z: f64| {
            let (fx, fx1) = partials(f);
            (fx1 + growth * (model.f2(s, x, x1, y, z, &u0) - b2 * fx)).abs()
        };

        let b_hat =
            |a: f64, b: f64, u: &[f64]| model.b1(s, a, b, u) + growth * (a - lambda * b) * model.b2(s, a, b, u);
        let sig = |a: f64, b: f64, u: &[f64]| model.sigma(s, a, b, u);
        let phi = |a: f64, b: f64, _u: &[f64]| model.phi(a, b);
        worst[0] = nan_max(worst[0], residual(&b_hat, y0, z0));
        worst[1] = nan_max(worst[1], residual(&sig, y0, z0));
        worst[2] = nan_max(worst[2], residual(&|a, b, u| model.f1(s, a, b, y0, z0, u), y0, z0));
        worst[3] = nan_max(worst[3], residual(&phi, y0, z0));

        let scale = y0.abs().max(1.0);
        for dy in [-1.0, 0.0, 1.0] {
            for dz in [-1.0, 0.0, 1.0] {
                let (y, z) = (y0 + dy * scale, z0 + dz * scale);
                worst[4] = nan_max(worst[4], residual(&|a, b, u| model.f1(s, a, b, y, z, u), y, z));
            }
        }
    }
    let n = probes.len();
    Ok(CompatibilityReport {
        b_hat: CheckReport::new("compatibility_pde_b_hat", n, worst[0], tolerance),
        sigma: CheckReport::new("compatibility_pde_sigma", n, worst[1], tolerance),
        f1: CheckReport::new("compatibility_pde_f1", n, worst[2], tolerance),
        phi: CheckReport::new("compatibility_pde_phi", n, worst[3], tolerance),
        f1_free_yz: CheckReport::new("compatibility_pde_f1_free_yz", n * 9, worst[4], tolerance),
    })
}

/// Supplied partials against central differences of `v` at `n_probes`
/// seeded random points of the probe box. Tolerance 1e-5 relative for
/// `v_s`, `v_x`, `v_x1` and 1e-4 for `v_xx`; the reported residual is the
/// worst error divided by its own tolerance, checked against 1.
pub fn partials_consistency<C: ValueCandidate + ?Sized>(
    cand: &C,
    s_range: (f64, f64),
    n_probes: usize,
    seed: u64,
) -> CheckReport {
    let mut rng = path_rng(seed, 0);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let s = rng.random_range(s_range.0..=s_range.1);
        let x = rng.random_range(0.5..=5.0);
        let x1 = rng.random_range(0.25..=5.0);
        let d = |f: &dyn Fn(f64) -> f64, at: f64| {
            let h = fd_step(at, FD_REL_STEP);
            (f(h) - f(-h)) / (2.0 * h)
        };
        let errs = [
            rel(cand.v_s(s, x, x1), d(&|e| cand.v(s + e, x, x1), s)) / 1e-5,
            rel(cand.v_x(s, x, x1), d(&|e| cand.v(s, x + e, x1), x)) / 1e-5,
            rel(cand.v_x1(s, x, x1), d(&|e| cand.v(s, x, x1 + e), x1)) / 1e-5,
            rel(cand.v_xx(s, x, x1), d(&|e| cand.v_x(s, x + e, x1), x)) / 1e-4,
        ];
        worst = errs.iter().fold(worst, |a, b| nan_max(a, *b));
    }
    CheckReport::new("value_partials_consistency", n_probes, worst, 1.0)
}
