//! Euler–Maruyama simulation of the controlled delay equation under a
//! feedback policy, and a discrete check of the delayed Itô formula.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::delay::{x1_of_buffer, x2_of_buffer, DelayBuffer};
use crate::error::{LabError, Result};
use crate::model::{Control, FeedbackPolicy, SimConfig, StructuredModel, X1Method};
use crate::seed::path_rng;
use crate::stats::mean_and_stderr;
use crate::fmt_float;

/// Paths are aborted once `|X|` exceeds this bound.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// One simulated trajectory. All state arrays have `n_steps + 1` entries;
/// `dw[k]` is the increment over `[t_k, t_{k+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPath {
    pub index: usize,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub controls: Vec<Control>,
    pub dw: Vec<f64>,
}

impl ForwardPath {
    pub fn n_steps(&self) -> usize {
        self.dw.len()
    }

    pub fn terminal(&self) -> (f64, f64) {
        let n = self.n_steps();
        (self.x[n], self.x1[n])
    }
}

/// Ensemble of independently seeded paths; path `i` is reproducible from
/// `derive_path_seed(master_seed, i)` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardEnsemble {
    pub paths: Vec<ForwardPath>,
    pub config: SimConfig,
    pub step_h: f64,
}

impl ForwardEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn n_steps(&self) -> usize {
        self.config.n_steps
    }
}

/// `x₁ + h·(x − e^{−λδ}x₂ − λx₁)`, one Euler step of the `X₁` dynamics.
#[inline]
pub fn x1_step_ode(x1: f64, x: f64, x2: f64, lambda: f64, delta: f64, h: f64) -> f64 {
    x1 + h * (x - (-lambda * delta).exp() * x2 - lambda * x1)
}

fn check_initial(initial: &DelayBuffer, h: f64, delta: f64) -> Result<()> {
    if !initial.is_full() {
        return Err(LabError::InvalidState("initial buffer is not full".into()));
    }
    let tol = 1e-12 * h.max(delta).max(1.0);
    if (initial.step_h() - h).abs() > tol || (initial.delta() - delta).abs() > tol {
        return Err(LabError::Configuration(format!(
            "initial buffer grid (h = {}, delta = {}) does not match the simulation (h = {h}, delta = {delta})",
            initial.step_h(),
            initial.delta()
        )));
    }
    Ok(())
}

/// Simulates path `index` of the ensemble described by `config`.
pub fn simulate_path<M, P>(
    model: &M,
    policy: &P,
    initial: &DelayBuffer,
    config: &SimConfig,
    index: usize,
) -> Result<ForwardPath>
where
    M: StructuredModel + ?Sized,
    P: FeedbackPolicy + ?Sized,
{
    let params = *model.params();
    config.validate(&params)?;
    let h = config.step(&params);
    check_initial(initial, h, params.delta)?;

    let n = config.n_steps;
    let sqrt_h = h.sqrt();
    let bounds = model.control_set();
    let mut rng = path_rng(config.master_seed, index as u64);
    let mut buffer = initial.clone();

    let mut path = ForwardPath {
        index,
        times: (0..=n).map(|k| params.start_s + k as f64 * h).collect(),
        x: Vec::with_capacity(n + 1),
        x1: Vec::with_capacity(n + 1),
        x2: Vec::with_capacity(n + 1),
        controls: Vec::with_capacity(n + 1),
        dw: Vec::with_capacity(n),
    };

    let mut x = buffer.newest()?;
    let mut x1 = x1_of_buffer(&buffer, params.lambda)?;
    for k in 0..=n {
        let t = path.times[k];
        let x2 = x2_of_buffer(&buffer)?;
        let mut u = policy.evaluate(t, x, x1);
        bounds.clamp(&mut u);
        path.x.push(x);
        path.x1.push(x1);
        path.x2.push(x2);
        if k == n {
            path.controls.push(u);
            break;
        }

        let z: f64 = rng.sample(StandardNormal);
        let dw = sqrt_h * z;
        let x_next = x + model.drift(t, x, x1, x2, &u) * h + model.sigma(t, x, x1, &u) * dw;
        if !x_next.is_finite() || x_next.abs() > DIVERGENCE_BOUND {
            return Err(LabError::SimulationDiverged { path: index, step: k + 1, value: x_next.abs() });
        }
        path.controls.push(u);
        path.dw.push(dw);

        buffer.push(x_next);
        x1 = match config.x1_method {
            X1Method::OdeRecursion => x1_step_ode(x1, x, x2, params.lambda, params.delta, h),
            X1Method::Quadrature => x1_of_buffer(&buffer, params.lambda)?,
        };
        x = x_next;
    }
    Ok(path)
}

/// Simulates the whole ensemble; paths fan out across worker threads and
/// are collected in index order.
pub fn simulate_forward<M, P>(
    model: &M,
    policy: &P,
    initial: &DelayBuffer,
    config: &SimConfig,
) -> Result<ForwardEnsemble>
where
    M: StructuredModel + ?Sized,
    P: FeedbackPolicy + ?Sized,
{
    let params = *model.params();
    config.validate(&params)?;
    let results: Vec<Result<ForwardPath>> = (0..config.n_paths)
        .into_par_iter()
        .map(|i| simulate_path(model, policy, initial, config, i))
        .collect();
    let paths = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ForwardEnsemble { paths, config: *config, step_h: config.step(&params) })
}

/// Writes `path,t,x,x1,x2,u[,c],dw`. The `dw` field of the terminal row is empty.
pub fn write_forward_csv<W: Write>(ensemble: &ForwardEnsemble, two_controls: bool, out: &mut W) -> io::Result<()> {
    if two_controls {
        writeln!(out, "path,t,x,x1,x2,u,c,dw")?;
    } else {
        writeln!(out, "path,t,x,x1,x2,u,dw")?;
    }
    for p in &ensemble.paths {
        for k in 0..p.times.len() {
            let u = &p.controls[k];
            write!(
                out,
                "{},{},{},{},{},{}",
                p.index,
                fmt_float(p.times[k]),
                fmt_float(p.x[k]),
                fmt_float(p.x1[k]),
                fmt_float(p.x2[k]),
                fmt_float(u.first().copied().unwrap_or(0.0))
            )?;
            if two_controls {
                write!(out, ",{}", fmt_float(u.get(1).copied().unwrap_or(0.0)))?;
            }
            match p.dw.get(k) {
                Some(dw) => writeln!(out, ",{}", fmt_float(*dw))?,
                None => writeln!(out, ",")?,
            }
        }
    }
    Ok(())
}

// ============================================================================
// Delayed Itô formula
// ============================================================================

/// A `C^{1,2,1}` test function `g(t, x, x₁)` with analytic partials.
pub trait ItoTestFunction: Send + Sync {
    fn g(&self, t: f64, x: f64, x1: f64) -> f64;
    fn g_t(&self, t: f64, x: f64, x1: f64) -> f64;
    fn g_x(&self, t: f64, x: f64, x1: f64) -> f64;
    fn g_xx(&self, t: f64, x: f64, x1: f64) -> f64;
    fn g_x1(&self, t: f64, x: f64, x1: f64) -> f64;
}

/// Ensemble statistics of the summed per-path formula residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItoCheckReport {
    pub n_paths: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Root mean square of the per-path summed residual.
    pub rms: f64,
    pub max_abs: f64,
}

impl ItoCheckReport {
    /// `|mean| ≤ z·stderr` (with a roundoff floor for exact identities).
    pub fn consistent_with_zero(&self, z: f64) -> bool {
        self.mean.abs() <= z * self.stderr + 1e-12 * (1.0 + self.rms)
    }
}

/// Summed residual `Σ_k Δg − [g_t + g_x b + ½g_xx σ² + g_x1 (x − λx₁ − e^{−λδ}x₂)] h − g_x σ ΔW`
/// along one path, with every term evaluated at the left node.
pub fn ito_path_residual<M, G>(g: &G, path: &ForwardPath, model: &M) -> f64
where
    M: StructuredModel + ?Sized,
    G: ItoTestFunction + ?Sized,
{
    let params = model.params();
    let mut acc = 0.0;
    for k in 0..path.n_steps() {
        let (t, x, x1, x2) = (path.times[k], path.x[k], path.x1[k], path.x2[k]);
        let h = path.times[k + 1] - t;
        let u = &path.controls[k];
        let b = model.drift(t, x, x1, x2, u);
        let s = model.sigma(t, x, x1, u);
        let dg = g.g(path.times[k + 1], path.x[k + 1], path.x1[k + 1]) - g.g(t, x, x1);
        let drift = g.g_t(t, x, x1)
            + g.g_x(t, x, x1) * b
            + 0.5 * g.g_xx(t, x, x1) * s * s
            + g.g_x1(t, x, x1) * params.transport(x, x1, x2);
        acc += dg - drift * h - g.g_x(t, x, x1) * s * path.dw[k];
    }
    acc
}

pub fn delayed_ito_check<M, G>(g: &G, ensemble: &ForwardEnsemble, model: &M) -> ItoCheckReport
where
    M: StructuredModel + ?Sized,
    G: ItoTestFunction + ?Sized,
{
    let residuals: Vec<f64> = ensemble.paths.par_iter().map(|p| ito_path_residual(g, p, model)).collect();
    let (mean, stderr) = mean_and_stderr(&residuals);
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    let max_abs = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    ItoCheckReport { n_paths: residuals.len(), mean, stderr, rms, max_abs }
}
