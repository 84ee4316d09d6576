//! Least-squares Monte Carlo solver for the controlled backward equation and
//! the recursive cost `J = −Y(s)` it defines.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::delay::DelayBuffer;
use crate::error::{LabError, Result};
use crate::model::{FeedbackPolicy, SimConfig, StructuredModel};
use crate::sdde::{simulate_forward, ForwardEnsemble};
use crate::stats::mean_and_stderr;
use crate::fmt_float;

/// Ridge added to the diagonal of the standardised normal equations.
pub const RIDGE: f64 = 1e-10;
/// Standardised pivots below this are treated as collinear and dropped.
const PIVOT_FLOOR: f64 = 1e-9;

// ============================================================================
// Basis
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    Constant,
    /// All monomials `x^i x₁^j` with `i + j ≤ degree`.
    Polynomial { degree: usize },
    /// The polynomial block plus `(x + θx₁)^γ`.
    PolynomialWithPower { degree: usize, theta: f64, gamma: f64 },
}

/// Feature map `(x, x₁) ↦ φ(x, x₁)`; the first feature is always the constant 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
}

impl RegressionBasis {
    pub fn constant() -> Self {
        Self { kind: BasisKind::Constant }
    }

    pub fn polynomial(degree: usize) -> Self {
        Self { kind: BasisKind::Polynomial { degree } }
    }

    pub fn with_power(degree: usize, theta: f64, gamma: f64) -> Self {
        Self { kind: BasisKind::PolynomialWithPower { degree, theta, gamma } }
    }

    /// Degree-2 polynomials, plus the closed-form power feature for the
    /// consumption/portfolio model.
    pub fn default_for<M: StructuredModel + ?Sized>(model: &M) -> Self {
        match model.merton() {
            Some(p) => Self::with_power(2, p.theta, p.gamma),
            None => Self::polynomial(2),
        }
    }

    fn degree(&self) -> usize {
        match self.kind {
            BasisKind::Constant => 0,
            BasisKind::Polynomial { degree } | BasisKind::PolynomialWithPower { degree, .. } => degree,
        }
    }

    pub fn len(&self) -> usize {
        let d = self.degree();
        let poly = (d + 1) * (d + 2) / 2;
        match self.kind {
            BasisKind::PolynomialWithPower { .. } => poly + 1,
            _ => poly,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn descriptor(&self) -> String {
        match self.kind {
            BasisKind::Constant => "constant".into(),
            BasisKind::Polynomial { degree } => format!("poly{degree}"),
            BasisKind::PolynomialWithPower { degree, theta, gamma } => {
                format!("poly{degree}+(x+{theta}x1)^{gamma}")
            }
        }
    }

    /// Writes the features into `out[..self.len()]`. A power feature on a
    /// non-positive base is set to 0 so that features stay finite.
    pub fn features(&self, x: f64, x1: f64, out: &mut [f64]) {
        let d = self.degree();
        let mut idx = 0;
        for total in 0..=d {
            for j in 0..=total {
                out[idx] = x.powi((total - j) as i32) * x1.powi(j as i32);
                idx += 1;
            }
        }
        if let BasisKind::PolynomialWithPower { theta, gamma, .. } = self.kind {
            let w = x + theta * x1;
            out[idx] = if w > 0.0 { w.powf(gamma) } else { 0.0 };
        }
    }
}

// ============================================================================
// Regression
// ============================================================================

/// Least-squares fit of `targets` on the rows of `design` (row-major, the
/// first column constant). Returns the coefficients and the number of
/// non-constant columns kept.
///
/// Non-constant columns are centred and scaled to unit variance, so the
/// intercept stays exact and the fitted values average to the target mean.
pub fn least_squares(design: &[f64], p: usize, targets: &[f64]) -> (Vec<f64>, usize) {
    let n = targets.len();
    debug_assert_eq!(design.len(), n * p);
    let inv_n = 1.0 / n as f64;
    let y_mean = targets.iter().sum::<f64>() * inv_n;
    let mut coef = vec![0.0; p];
    if p == 1 {
        coef[0] = y_mean;
        return (coef, 0);
    }
    let q = p - 1;

    let mut mu = vec![0.0; q];
    for row in design.chunks_exact(p) {
        for j in 0..q {
            mu[j] += row[j + 1];
        }
    }
    mu.iter_mut().for_each(|m| *m *= inv_n);

    let mut cov = vec![0.0; q * q];
    let mut rhs = vec![0.0; q];
    let mut centred = vec![0.0; q];
    for (row, &y) in design.chunks_exact(p).zip(targets) {
        for j in 0..q {
            centred[j] = row[j + 1] - mu[j];
        }
        let dy = y - y_mean;
        for i in 0..q {
            let ci = centred[i];
            rhs[i] += ci * dy;
            for j in 0..=i {
                cov[i * q + j] += ci * centred[j];
            }
        }
    }

    let mut scale = vec![0.0; q];
    let mut active = vec![false; q];
    for j in 0..q {
        let var = cov[j * q + j] * inv_n;
        let sd = var.max(0.0).sqrt();
        scale[j] = sd;
        active[j] = sd > 0.0 && sd > 1e-10 * mu[j].abs() && sd.is_finite();
    }

    // Cholesky of the correlation matrix, dropping collinear columns.
    let mut l = vec![0.0; q * q];
    for j in 0..q {
        if !active[j] {
            continue;
        }
        let corr = |a: usize, b: usize| {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            cov[hi * q + lo] * inv_n / (scale[a] * scale[b])
        };
        let mut d = corr(j, j) + RIDGE;
        for k in 0..j {
            if active[k] {
                d -= l[j * q + k] * l[j * q + k];
            }
        }
        if d < PIVOT_FLOOR {
            active[j] = false;
            continue;
        }
        let ljj = d.sqrt();
        l[j * q + j] = ljj;
        for i in (j + 1)..q {
            if !active[i] {
                continue;
            }
            let mut s = corr(i, j);
            for k in 0..j {
                if active[k] {
                    s -= l[i * q + k] * l[j * q + k];
                }
            }
            l[i * q + j] = s / ljj;
        }
    }

    let b: Vec<f64> = (0..q).map(|j| if active[j] { rhs[j] * inv_n / scale[j] } else { 0.0 }).collect();
    let mut w = vec![0.0; q];
    for i in 0..q {
        if !active[i] {
            continue;
        }
        let mut s = b[i];
        for k in 0..i {
            if active[k] {
                s -= l[i * q + k] * w[k];
            }
        }
        w[i] = s / l[i * q + i];
    }
    for i in (0..q).rev() {
        if !active[i] {
            continue;
        }
        let mut s = w[i];
        for k in (i + 1)..q {
            if active[k] {
                s -= l[k * q + i] * w[k];
            }
        }
        w[i] = s / l[i * q + i];
    }

    let mut intercept = y_mean;
    for j in 0..q {
        if active[j] {
            let beta = w[j] / scale[j];
            coef[j + 1] = beta;
            intercept -= beta * mu[j];
        }
    }
    coef[0] = intercept;
    (coef, active.iter().filter(|a| **a).count())
}

fn fitted(design: &[f64], p: usize, coef: &[f64]) -> Vec<f64> {
    design.par_chunks_exact(p).map(|row| row.iter().zip(coef).map(|(a, b)| a * b).sum()).collect()
}

// ============================================================================
// Backward solver
// ============================================================================

/// `(Y, Z)` along one forward path. `y[N] = φ(X_N, X₁_N)`; `z[N]` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPath {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    pub paths: Vec<BackwardPath>,
    /// Ensemble mean of `Y_0`.
    pub y_at_s: f64,
    /// Monte Carlo standard error of `y_at_s`.
    pub stderr: f64,
    /// Per-path unrolled value `Y_N + h Σ_k f_k`; averages to `y_at_s`.
    pub pathwise: Vec<f64>,
    /// Steps whose regression kept only the constant feature.
    pub degraded_steps: usize,
    pub warning: Option<String>,
    pub basis: String,
}

/// Explicit backward Euler with regressed conditional expectations:
/// `Z_k = E[Y_{k+1}ΔW_k/h | X_k, X₁ₖ]`, `Y_k = E[Y_{k+1} + h f(·, Y_{k+1}, Z_k, u_k) | X_k, X₁ₖ]`.
pub fn solve_backward<M>(model: &M, ensemble: &ForwardEnsemble, basis: &RegressionBasis) -> Result<BackwardSolution>
where
    M: StructuredModel + ?Sized,
{
    let m = ensemble.n_paths();
    let n = ensemble.n_steps();
    let h = ensemble.step_h;
    let p = basis.len();
    if m == 0 {
        return Err(LabError::InvalidState("empty ensemble".into()));
    }
    if ensemble.paths.iter().any(|path| path.dw.len() != n) {
        return Err(LabError::InvalidState("ensemble paths do not carry one increment per step".into()));
    }

    let mut y_cols: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut z_cols: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let terminal: Vec<f64> = ensemble
        .paths
        .iter()
        .map(|path| {
            let (x, x1) = path.terminal();
            model.phi(x, x1)
        })
        .collect();
    if let Some(i) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(LabError::Domain(format!("terminal value is not finite on path {i}")));
    }
    let mut zeta = terminal.clone();
    y_cols[n] = terminal;
    z_cols[n] = vec![0.0; m];

    let mut design = vec![0.0; m * p];
    let mut degraded = 0usize;
    for k in (0..n).rev() {
        design.par_chunks_exact_mut(p).zip(ensemble.paths.par_iter()).for_each(|(row, path)| {
            basis.features(path.x[k], path.x1[k], row);
        });
        let y_next = &y_cols[k + 1];

        let z_target: Vec<f64> = ensemble.paths.iter().zip(y_next).map(|(path, y)| y * path.dw[k] / h).collect();
        let (z_coef, _) = least_squares(&design, p, &z_target);
        let z_k = fitted(&design, p, &z_coef);

        let f_k: Vec<f64> = ensemble
            .paths
            .par_iter()
            .enumerate()
            .map(|(i, path)| {
                model.generator(path.times[k], path.x[k], path.x1[k], path.x2[k], y_next[i], z_k[i], &path.controls[k])
            })
            .collect();
        if let Some(i) = f_k.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Domain(format!("generator is not finite on path {i} at step {k}")));
        }

        let y_target: Vec<f64> = y_next.iter().zip(&f_k).map(|(y, f)| y + h * f).collect();
        let (y_coef, kept) = least_squares(&design, p, &y_target);
        if kept == 0 && p > 1 {
            degraded += 1;
        }
        let y_k = fitted(&design, p, &y_coef);
        for (acc, f) in zeta.iter_mut().zip(&f_k) {
            *acc += h * f;
        }
        y_cols[k] = y_k;
        z_cols[k] = z_k;
    }

    let paths: Vec<BackwardPath> = (0..m)
        .map(|i| BackwardPath {
            y: y_cols.iter().map(|c| c[i]).collect(),
            z: z_cols.iter().map(|c| c[i]).collect(),
        })
        .collect();
    let y_at_s = y_cols[0].iter().sum::<f64>() / m as f64;
    let (_, stderr) = mean_and_stderr(&zeta);
    // Steps with a single distinct state (t = s in particular) always reduce
    // to the mean; only flag when that happens beyond the initial node.
    let warning = (degraded > 1 && p > 1).then(|| {
        format!("{degraded} of {n} regressions degraded to the ensemble mean (rank-deficient design)")
    });
    Ok(BackwardSolution {
        paths,
        y_at_s,
        stderr,
        pathwise: zeta,
        degraded_steps: degraded,
        warning,
        basis: basis.descriptor(),
    })
}

/// Recursive cost of a policy, `J = −Y(s)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub j: f64,
    pub stderr: f64,
    #[serde(skip)]
    pub pathwise: Vec<f64>,
    pub degraded_steps: usize,
    pub warning: Option<String>,
}

impl CostEstimate {
    pub fn from_solution(sol: &BackwardSolution) -> Self {
        Self {
            j: -sol.y_at_s,
            stderr: sol.stderr,
            pathwise: sol.pathwise.iter().map(|v| -v).collect(),
            degraded_steps: sol.degraded_steps,
            warning: sol.warning.clone(),
        }
    }
}

pub fn recursive_cost<M, P>(
    model: &M,
    policy: &P,
    initial: &DelayBuffer,
    config: &SimConfig,
    basis: &RegressionBasis,
) -> Result<CostEstimate>
where
    M: StructuredModel + ?Sized,
    P: FeedbackPolicy + ?Sized,
{
    let ensemble = simulate_forward(model, policy, initial, config)?;
    let sol = solve_backward(model, &ensemble, basis)?;
    Ok(CostEstimate::from_solution(&sol))
}

/// Writes `path,t,y,z` rows aligned with the forward export.
pub fn write_backward_csv<W: Write>(ensemble: &ForwardEnsemble, sol: &BackwardSolution, out: &mut W) -> io::Result<()> {
    writeln!(out, "path,t,y,z")?;
    for (fp, bp) in ensemble.paths.iter().zip(&sol.paths) {
        for k in 0..fp.times.len() {
            writeln!(out, "{},{},{},{}", fp.index, fmt_float(fp.times[k]), fmt_float(bp.y[k]), fmt_float(bp.z[k]))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClosureModel, ConstantPolicy, ControlBox, ModelParams};
    use approx::assert_relative_eq;
    use smallvec::smallvec;

    fn params() -> ModelParams {
        ModelParams::new(0.1, 0.5, 1.0, 0.0).unwrap()
    }

    fn unit_box() -> ControlBox {
        ControlBox::new(vec![-1.0], vec![1.0]).unwrap()
    }

    fn zero() -> ConstantPolicy {
        ConstantPolicy(smallvec![0.0])
    }

    fn cost(model: &ClosureModel, n: usize, paths: usize, x0: f64) -> (CostEstimate, BackwardSolution, ForwardEnsemble) {
        let cfg = SimConfig::new(n, paths, 3);
        let init = DelayBuffer::constant(model.params().delta, cfg.step(model.params()), x0).unwrap();
        let e = simulate_forward(model, &zero(), &init, &cfg).unwrap();
        let sol = solve_backward(model, &e, &RegressionBasis::polynomial(2)).unwrap();
        (CostEstimate::from_solution(&sol), sol, e)
    }

    #[test]
    fn basis_layout() {
        let b = RegressionBasis::with_power(2, 0.5, 0.5);
        assert_eq!(b.len(), 7);
        let mut f = [0.0; 7];
        b.features(2.0, 3.0, &mut f);
        assert_eq!(f, [1.0, 2.0, 3.0, 4.0, 6.0, 9.0, 3.5f64.sqrt()]);
        b.features(-5.0, 0.0, &mut f);
        assert_eq!(f[6], 0.0);
        assert_eq!(RegressionBasis::constant().len(), 1);
        assert_eq!(RegressionBasis::polynomial(3).len(), 10);
    }

    #[test]
    fn exact_fit_of_a_quadratic() {
        let b = RegressionBasis::polynomial(2);
        let pts: Vec<(f64, f64)> = (0..50).map(|i| (0.1 * i as f64, (0.37 * i as f64).sin())).collect();
        let mut design = vec![0.0; pts.len() * 6];
        for (row, (x, x1)) in design.chunks_exact_mut(6).zip(&pts) {
            b.features(*x, *x1, row);
        }
        let y: Vec<f64> = pts.iter().map(|(x, x1)| 1.0 - 2.0 * x + 0.5 * x1 + 0.25 * x * x1).collect();
        let (coef, kept) = least_squares(&design, 6, &y);
        assert_eq!(kept, 5);
        for (c, e) in coef.iter().zip([1.0, -2.0, 0.5, 0.0, 0.25, 0.0]) {
            assert!((c - e).abs() < 1e-6, "{coef:?}");
        }
    }

    #[test]
    fn collinear_columns_are_dropped_and_mean_preserved() {
        let design: Vec<f64> = (0..20).flat_map(|i| [1.0, 3.0, i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| (i * i) as f64).collect();
        let (coef, kept) = least_squares(&design, 4, &y);
        assert_eq!(kept, 1);
        assert_eq!(coef[1], 0.0);
        let fit = fitted(&design, 4, &coef);
        let mean_fit = fit.iter().sum::<f64>() / 20.0;
        assert_relative_eq!(mean_fit, y.iter().sum::<f64>() / 20.0, epsilon = 1e-10);
    }

    #[test]
    fn constant_terminal_without_driver() {
        let m = ClosureModel::new(params(), unit_box()).phi(|x, _| x);
        let (c, sol, _) = cost(&m, 8, 5, 1.25);
        assert_eq!(sol.y_at_s, 1.25);
        assert_eq!(c.j, -1.25);
        assert_eq!(sol.stderr, 0.0);
        assert!(sol.warning.is_some());
    }

    #[test]
    fn linear_driver_discounts_terminal() {
        let beta = 0.3;
        let m = ClosureModel::new(params(), unit_box())
            .sigma(|_, _, _, _| 0.2)
            .f1(move |_, _, _, y, _, _| -beta * y)
            .phi(|_, _| 2.0);
        let (_, sol, _) = cost(&m, 64, 200, 1.0);
        let oracle = 2.0 * (-beta).exp();
        // Exactly 2(1−βh)^N for the explicit scheme.
        assert_relative_eq!(sol.y_at_s, 2.0 * (1.0 - beta / 64.0f64).powi(64), epsilon = 1e-10);
        assert!((sol.y_at_s - oracle).abs() < 2.0 * beta * beta / 64.0);
    }

    #[test]
    fn terminal_condition_exact_on_every_path() {
        let m = ClosureModel::new(params(), unit_box())
            .b1(|_, x, _, _| 0.1 * x)
            .sigma(|_, x, _, _| 0.3 * x)
            .f1(|_, x, _, y, z, _| -0.1 * y + 0.05 * z + x.sqrt())
            .phi(|x, x1| x * x + x1);
        let (_, sol, e) = cost(&m, 16, 300, 1.0);
        for (fp, bp) in e.paths.iter().zip(&sol.paths) {
            let (x, x1) = fp.terminal();
            assert_eq!(bp.y[16] - (x * x + x1), 0.0);
            assert_eq!(bp.y.len(), 17);
        }
        let zeta_mean = sol.pathwise.iter().sum::<f64>() / 300.0;
        assert_relative_eq!(zeta_mean, sol.y_at_s, epsilon = 1e-9);
    }

    #[test]
    fn lowering_the_driver_lowers_y() {
        let build = |eps: f64| {
            ClosureModel::new(params(), unit_box())
                .b1(|_, x, _, _| 0.05 * x)
                .sigma(|_, x, _, _| 0.2 * x)
                .f1(move |_, x, _, _, _, _| x.abs().sqrt() - eps)
                .phi(|x, _| x)
        };
        let (_, a, _) = cost(&build(0.0), 32, 500, 1.0);
        let (_, b, _) = cost(&build(0.1), 32, 500, 1.0);
        assert!(b.y_at_s < a.y_at_s);
        assert_relative_eq!(a.y_at_s - b.y_at_s, 0.1, epsilon = 1e-9);
    }

    #[test]
    fn deterministic_twice() {
        let m = ClosureModel::new(params(), unit_box())
            .sigma(|_, x, _, _| 0.4 * x)
            .f1(|_, x, _, y, _, _| -0.2 * y + x)
            .phi(|x, x1| x + x1);
        let (a, _, _) = cost(&m, 32, 400, 1.0);
        let (b, _, _) = cost(&m, 32, 400, 1.0);
        assert_eq!(a.j.to_bits(), b.j.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }
}
