//! Shared domain types: delay parameters, the structured coefficient bundle,
//! feedback policies and simulation configuration.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{LabError, Result};

/// A control vector. Every model in this crate has at most two coordinates
/// (portfolio fraction and consumption rate), so it stays on the stack.
pub type Control = SmallVec<[f64; 2]>;

/// Delay and horizon parameters of the controlled system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Averaging parameter of the distributed delay (1/time).
    pub lambda: f64,
    /// Delay length.
    pub delta: f64,
    pub horizon_t: f64,
    pub start_s: f64,
}

impl ModelParams {
    pub fn new(lambda: f64, delta: f64, horizon_t: f64, start_s: f64) -> Result<Self> {
        let p = Self { lambda, delta, horizon_t, start_s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.lambda, self.delta, self.horizon_t, self.start_s]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(LabError::InvalidParameters("model parameters must be finite".into()));
        }
        if self.delta < 0.0 {
            return Err(LabError::InvalidParameters(format!("delta = {} < 0", self.delta)));
        }
        if self.start_s < 0.0 || self.start_s >= self.horizon_t {
            return Err(LabError::InvalidParameters(format!(
                "need 0 <= s < T, got s = {}, T = {}",
                self.start_s, self.horizon_t
            )));
        }
        Ok(())
    }

    /// `e^{-λδ}`, the weight of the pointwise delay in the `X₁` dynamics.
    #[inline]
    pub fn decay(&self) -> f64 {
        (-self.lambda * self.delta).exp()
    }

    /// `e^{λδ}`.
    #[inline]
    pub fn growth(&self) -> f64 {
        (self.lambda * self.delta).exp()
    }

    /// Delay-transport term `x - λx₁ - e^{-λδ}x₂` shared by both Hamiltonians.
    #[inline]
    pub fn transport(&self, x: f64, x1: f64, x2: f64) -> f64 {
        x - self.lambda * x1 - self.decay() * x2
    }
}

/// Box-shaped admissible control set `𝕌`. Bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(LabError::InvalidParameters(
                "control box needs matching, non-empty bound vectors".into(),
            ));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(LabError::InvalidParameters(format!("empty control interval [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for (v, (lo, hi)) in u.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Whether every coordinate sits at least `margin` inside its bounds.
    pub fn is_interior(&self, u: &[f64], margin: f64) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v - *lo > margin && *hi - *v > margin)
    }
}

/// Central-difference step used for coefficient partials that a model does
/// not supply analytically.
pub(crate) fn fd_step(at: f64, rel: f64) -> f64 {
    rel * at.abs().max(1.0)
}

/// The reduced coefficient bundle:
/// `b = b₁ + b₂·x₂`, `σ = σ(t, x, x₁, u)`, `f = f₁ + f₂·x₂`, terminal `φ(x, x₁)`.
pub trait StructuredModel: Send + Sync {
    fn params(&self) -> &ModelParams;
    fn control_set(&self) -> &ControlBox;

    fn b1(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64;
    fn b2(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64;
    fn sigma(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64;
    fn f1(&self, t: f64, x: f64, x1: f64, y: f64, z: f64, u: &[f64]) -> f64;
    fn f2(&self, t: f64, x: f64, x1: f64, y: f64, z: f64, u: &[f64]) -> f64;
    fn phi(&self, x: f64, x1: f64) -> f64;

    /// Full drift `b₁ + b₂·x₂`.
    fn drift(&self, t: f64, x: f64, x1: f64, x2: f64, u: &[f64]) -> f64 {
        self.b1(t, x, x1, u) + self.b2(t, x, x1, u) * x2
    }

    /// Full generator `f₁ + f₂·x₂`.
    fn generator(&self, t: f64, x: f64, x1: f64, x2: f64, y: f64, z: f64, u: &[f64]) -> f64 {
        self.f1(t, x, x1, y, z, u) + self.f2(t, x, x1, y, z, u) * x2
    }

    /// `∂f/∂y`; central difference unless overridden.
    fn df_dy(&self, t: f64, x: f64, x1: f64, x2: f64, y: f64, z: f64, u: &[f64]) -> f64 {
        let h = fd_step(y, 1e-6);
        (self.generator(t, x, x1, x2, y + h, z, u) - self.generator(t, x, x1, x2, y - h, z, u)) / (2.0 * h)
    }

    /// `∂f/∂z`; central difference unless overridden.
    fn df_dz(&self, t: f64, x: f64, x1: f64, x2: f64, y: f64, z: f64, u: &[f64]) -> f64 {
        let h = fd_step(z, 1e-6);
        (self.generator(t, x, x1, x2, y, z + h, u) - self.generator(t, x, x1, x2, y, z - h, u)) / (2.0 * h)
    }

    /// Closed-form parameters when this is the consumption/portfolio model;
    /// used to pick the regression basis.
    fn merton(&self) -> Option<&crate::merton::MertonParams> {
        None
    }
}

/// Drift or diffusion evaluator `(t, x, x₁, u)`.
pub type CoefficientFn = Box<dyn Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
/// Generator evaluator `(t, x, x₁, y, z, u)`.
pub type GeneratorFn = Box<dyn Fn(f64, f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
/// Terminal evaluator `(x, x₁)`.
pub type TerminalFn = Box<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A structured model assembled from closures. Every coefficient starts at zero.
pub struct ClosureModel {
    params: ModelParams,
    control_set: ControlBox,
    b1: CoefficientFn,
    b2: CoefficientFn,
    sigma: CoefficientFn,
    f1: GeneratorFn,
    f2: GeneratorFn,
    phi: TerminalFn,
}

impl ClosureModel {
    pub fn new(params: ModelParams, control_set: ControlBox) -> Self {
        Self {
            params,
            control_set,
            b1: Box::new(|_, _, _, _| 0.0),
            b2: Box::new(|_, _, _, _| 0.0),
            sigma: Box::new(|_, _, _, _| 0.0),
            f1: Box::new(|_, _, _, _, _, _| 0.0),
            f2: Box::new(|_, _, _, _, _, _| 0.0),
            phi: Box::new(|_, _| 0.0),
        }
    }

    pub fn b1(mut self, f: impl Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.b1 = Box::new(f);
        self
    }

    pub fn b2(mut self, f: impl Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.b2 = Box::new(f);
        self
    }

    pub fn sigma(mut self, f: impl Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.sigma = Box::new(f);
        self
    }

    pub fn f1(mut self, f: impl Fn(f64, f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.f1 = Box::new(f);
        self
    }

    pub fn f2(mut self, f: impl Fn(f64, f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.f2 = Box::new(f);
        self
    }

    pub fn phi(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.phi = Box::new(f);
        self
    }
}

impl std::fmt::Debug for ClosureModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClosureModel")
            .field("params", &self.params)
            .field("control_set", &self.control_set)
            .finish_non_exhaustive()
    }
}

impl StructuredModel for ClosureModel {
    fn params(&self) -> &ModelParams {
        &self.params
    }
    fn control_set(&self) -> &ControlBox {
        &self.control_set
    }
    fn b1(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64 {
        (self.b1)(t, x, x1, u)
    }
    fn b2(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64 {
        (self.b2)(t, x, x1, u)
    }
    fn sigma(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64 {
        (self.sigma)(t, x, x1, u)
    }
    fn f1(&self, t: f64, x: f64, x1: f64, y: f64, z: f64, u: &[f64]) -> f64 {
        (self.f1)(t, x, x1, y, z, u)
    }
    fn f2(&self, t: f64, x: f64, x1: f64, y: f64, z: f64, u: &[f64]) -> f64 {
        (self.f2)(t, x, x1, y, z, u)
    }
    fn phi(&self, x: f64, x1: f64) -> f64 {
        (self.phi)(x, x1)
    }
}

/// Markov feedback control `(t, x, x₁) ↦ u ∈ 𝕌`.
pub trait FeedbackPolicy: Send + Sync {
    fn evaluate(&self, t: f64, x: f64, x1: f64) -> Control;
}

impl<F> FeedbackPolicy for F
where
    F: Fn(f64, f64, f64) -> Control + Send + Sync,
{
    fn evaluate(&self, t: f64, x: f64, x1: f64) -> Control {
        self(t, x, x1)
    }
}

/// Policy returning the same control everywhere.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Control);

impl FeedbackPolicy for ConstantPolicy {
    fn evaluate(&self, _t: f64, _x: f64, _x1: f64) -> Control {
        self.0.clone()
    }
}

/// How `X₁` is advanced along a simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum X1Method {
    /// Trapezoidal quadrature over the delay buffer at every node.
    Quadrature,
    /// Euler step of `dX₁ = (X − e^{−λδ}X₂ − λX₁) dt`.
    #[default]
    OdeRecursion,
}

/// Time grid, ensemble size and seeding of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub master_seed: u64,
    pub x1_method: X1Method,
}

impl SimConfig {
    pub fn new(n_steps: usize, n_paths: usize, master_seed: u64) -> Self {
        Self { n_steps, n_paths, master_seed, x1_method: X1Method::default() }
    }

    pub fn with_x1_method(mut self, method: X1Method) -> Self {
        self.x1_method = method;
        self
    }

    pub fn step(&self, params: &ModelParams) -> f64 {
        (params.horizon_t - params.start_s) / self.n_steps as f64
    }

    /// Checks the grid against the delay: `h` must divide `δ` so that `X₂`
    /// lands on a grid node. Returns the number of steps per delay window.
    pub fn validate(&self, params: &ModelParams) -> Result<usize> {
        if self.n_steps == 0 {
            return Err(LabError::Configuration("n_steps must be >= 1".into()));
        }
        if self.n_paths == 0 {
            return Err(LabError::Configuration("n_paths must be >= 1".into()));
        }
        params.validate()?;
        delay_steps(params.delta, self.step(params))
    }
}

/// `δ / h` as an integer, or an error when `h` does not divide `δ`.
pub fn delay_steps(delta: f64, h: f64) -> Result<usize> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(LabError::Configuration(format!("grid step must be positive, got {h}")));
    }
    let ratio = delta / h;
    let m = ratio.round();
    if (ratio - m).abs() > 1e-12 * ratio.abs().max(1.0) {
        return Err(LabError::Configuration(format!(
            "grid step {h} does not divide the delay {delta} (ratio {ratio})"
        )));
    }
    Ok(m as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use smallvec::smallvec;

    #[test]
    fn params_reject_bad_horizon() {
        assert!(ModelParams::new(0.1, 1.0, 1.0, 1.0).is_err());
        assert!(ModelParams::new(0.1, -1.0, 1.0, 0.0).is_err());
        assert!(ModelParams::new(f64::NAN, 1.0, 1.0, 0.0).is_err());
        assert!(ModelParams::new(0.1, 0.0, 1.0, 0.0).is_ok());
    }

    #[test]
    fn grid_alignment() {
        assert_eq!(delay_steps(1.0, 1.0 / 128.0).unwrap(), 128);
        assert_eq!(delay_steps(0.0, 0.1).unwrap(), 0);
        assert!(delay_steps(1.0, 0.3).is_err());
        let params = ModelParams::new(0.1, 0.5, 1.0, 0.0).unwrap();
        assert_eq!(SimConfig::new(64, 1, 0).validate(&params).unwrap(), 32);
        assert!(SimConfig::new(0, 1, 0).validate(&params).is_err());
        assert!(SimConfig::new(3, 1, 0).validate(&params).is_err());
    }

    #[test]
    fn control_box_clamp_and_interior() {
        let b = ControlBox::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let mut u: Control = smallvec![3.0, -1.0];
        b.clamp(&mut u);
        assert_eq!(u.as_slice(), &[1.0, 0.0]);
        assert!(b.contains(&u));
        assert!(!b.is_interior(&u, 1e-9));
        assert!(b.is_interior(&[0.0, 1.0], 1e-3));
        assert!(ControlBox::new(vec![1.0], vec![0.0]).is_err());
    }
}
