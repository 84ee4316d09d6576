//! Consumption/portfolio problem with recursive utility and wealth memory.
//!
//! Wealth follows
//! `dX = [((μ₀−r)u − c + r)X + μ₁X₁ + μ₂X₂]dt + σuX dW`, utility is the
//! backward equation with generator `−βy + (1/γ)(cX)^γ` and terminal value
//! `(1/γ)(X + θX₁)^γ`. Under `θ = μ₂e^{λδ}` and `μ₁ = θ(λ + r + θ)` the value
//! function is `V = −(1/γ)Q(s)(x + θx₁)^γ` with `Q` solving a Bernoulli ODE.

use serde::{Deserialize, Serialize};
use smallvec::smallvec;

use crate::error::{LabError, Result};
use crate::hjb::ValueCandidate;
use crate::model::{Control, ControlBox, FeedbackPolicy, ModelParams, StructuredModel};
use crate::pmp::AdjointPath;
use crate::sdde::ForwardPath;

// ============================================================================
// Parameters
// ============================================================================

fn default_start() -> f64 {
    0.0
}

/// Market and preference parameters before the delay constraints are imposed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeParams {
    pub mu0: f64,
    pub mu2: f64,
    pub sigma: f64,
    pub r: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub delta: f64,
    pub horizon_t: f64,
    #[serde(default = "default_start")]
    pub start_s: f64,
}

impl FreeParams {
    /// The benchmark market: r = 3%, μ₀ = 8%, σ = 20%, β = 0.1, γ = 1/2,
    /// λ = 0.1, δ = 1, μ₂ = 0.01, T = 1.
    pub fn benchmark() -> Self {
        Self {
            mu0: 0.08,
            mu2: 0.01,
            sigma: 0.2,
            r: 0.03,
            beta: 0.1,
            gamma: 0.5,
            lambda: 0.1,
            delta: 1.0,
            horizon_t: 1.0,
            start_s: 0.0,
        }
    }
}

/// Fully specified parameters. Fields are public so that constraint-breaking
/// variants can be built for negative controls; [`resolve_constraints`] is
/// the only constructor that guarantees the closed form applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MertonParams {
    pub mu0: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma: f64,
    pub r: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub delta: f64,
    pub horizon_t: f64,
    pub start_s: f64,
    pub theta: f64,
}

/// Imposes `θ = μ₂e^{λδ}` and `μ₁ = θ(λ + r + θ)`.
pub fn resolve_constraints(free: &FreeParams) -> Result<MertonParams> {
    let f = free;
    let finite = [f.mu0, f.mu2, f.sigma, f.r, f.beta, f.gamma, f.lambda, f.delta, f.horizon_t, f.start_s]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(LabError::InvalidParameters("parameters must be finite".into()));
    }
    if f.mu2 < 0.0 {
        return Err(LabError::InvalidParameters(format!("mu2 = {} < 0", f.mu2)));
    }
    if f.sigma <= 0.0 {
        return Err(LabError::InvalidParameters(format!("sigma = {} must be > 0", f.sigma)));
    }
    if f.gamma >= 1.0 || f.gamma == 0.0 {
        return Err(LabError::InvalidParameters(format!("gamma = {} must satisfy gamma < 1, gamma != 0", f.gamma)));
    }
    if f.beta < 0.0 {
        return Err(LabError::InvalidParameters(format!("beta = {} < 0", f.beta)));
    }
    ModelParams::new(f.lambda, f.delta, f.horizon_t, f.start_s)?;
    let theta = f.mu2 * (f.lambda * f.delta).exp();
    let p = MertonParams {
        mu0: f.mu0,
        mu1: theta * (f.lambda + f.r + theta),
        mu2: f.mu2,
        sigma: f.sigma,
        r: f.r,
        beta: f.beta,
        gamma: f.gamma,
        lambda: f.lambda,
        delta: f.delta,
        horizon_t: f.horizon_t,
        start_s: f.start_s,
        theta,
    };
    delta_coefficient(&p)?;
    Ok(p)
}

impl MertonParams {
    pub fn model_params(&self) -> ModelParams {
        ModelParams { lambda: self.lambda, delta: self.delta, horizon_t: self.horizon_t, start_s: self.start_s }
    }

    /// `(θ − μ₂e^{λδ}, μ₁ − θ(λ + r + θ))`; both 0 when the constraints hold.
    pub fn constraint_defects(&self) -> (f64, f64) {
        let growth = (self.lambda * self.delta).exp();
        (self.theta - self.mu2 * growth, self.mu1 - self.theta * (self.lambda + self.r + self.theta))
    }

    /// Coefficient of `x₂` in the reduced HJB equation, `μ₂ − e^{−λδ}θ`.
    pub fn x2_coefficient(&self) -> f64 {
        self.mu2 - (-self.lambda * self.delta).exp() * self.theta
    }

    /// Merton fraction `(μ₀ − r)/((1 − γ)σ²)`.
    pub fn merton_fraction(&self) -> f64 {
        (self.mu0 - self.r) / ((1.0 - self.gamma) * self.sigma * self.sigma)
    }
}

/// `Δ = β + γ(μ₀−r)²/(2σ²(γ−1)) − γ(r + μ₂e^{λδ})`; must be positive.
pub fn delta_coefficient(p: &MertonParams) -> Result<f64> {
    let d = p.beta + p.gamma * (p.mu0 - p.r).powi(2) / (2.0 * p.sigma * p.sigma * (p.gamma - 1.0))
        - p.gamma * (p.r + p.mu2 * (p.lambda * p.delta).exp());
    if !(d > 0.0) {
        return Err(LabError::ConstraintViolation(format!("Delta = {d} must be > 0")));
    }
    Ok(d)
}

/// The alternative reading with `μ₁` in place of `μ₀` in the risk-premium
/// term. Kept only so tests can show it is not the ODE's coefficient.
pub fn delta_coefficient_printed(p: &MertonParams) -> f64 {
    p.beta + (p.mu1 - p.r).powi(2) * p.gamma / (2.0 * p.sigma * p.sigma * (p.gamma - 1.0))
        - p.gamma * (p.r + p.mu2 * (p.lambda * p.delta).exp())
}

// ============================================================================
// The Q profile
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QForm {
    /// Solution of `Q' = (γ−1)Q^{γ/(γ−1)} + ΔQ`, `Q(T) = 1`.
    Corrected,
    /// Same expression with the sign of the exponent flipped.
    Printed,
}

/// Closed-form `Q(t) = [(1 − (1−γ)/Δ)e^{∓Δ(T−t)/(1−γ)} + (1−γ)/Δ]^{1−γ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QSolution {
    pub delta_coeff: f64,
    pub gamma: f64,
    pub horizon_t: f64,
    pub form: QForm,
}

impl QSolution {
    fn bracket(&self, t: f64) -> (f64, f64) {
        let a = self.delta_coeff / (1.0 - self.gamma);
        let amp = 1.0 - 1.0 / a;
        let sign = match self.form {
            QForm::Corrected => -1.0,
            QForm::Printed => 1.0,
        };
        let e = (sign * a * (self.horizon_t - t)).exp();
        (amp * e + 1.0 / a, -sign * a * amp * e)
    }

    pub fn q(&self, t: f64) -> Result<f64> {
        let (b, _) = self.bracket(t);
        if !(b > 0.0) {
            return Err(LabError::Domain(format!("Q bracket {b} is not positive at t = {t}")));
        }
        Ok(b.powf(1.0 - self.gamma))
    }

    /// Analytic `dQ/dt`.
    pub fn q_prime(&self, t: f64) -> Result<f64> {
        let (b, db) = self.bracket(t);
        if !(b > 0.0) {
            return Err(LabError::Domain(format!("Q bracket {b} is not positive at t = {t}")));
        }
        Ok((1.0 - self.gamma) * b.powf(-self.gamma) * db)
    }

    /// `Q' − [(γ−1)Q^{γ/(γ−1)} + ΔQ]` using the analytic derivative.
    pub fn ode_residual(&self, t: f64) -> Result<f64> {
        let q = self.q(t)?;
        Ok(self.q_prime(t)? - q_rhs(q, self.gamma, self.delta_coeff))
    }
}

#[inline]
fn q_rhs(q: f64, gamma: f64, delta: f64) -> f64 {
    (gamma - 1.0) * q.powf(gamma / (gamma - 1.0)) + delta * q
}

pub fn q_closed_form(params: &MertonParams, delta: f64) -> QSolution {
    QSolution { delta_coeff: delta, gamma: params.gamma, horizon_t: params.horizon_t, form: QForm::Corrected }
}

pub fn q_closed_form_printed(params: &MertonParams, delta: f64) -> QSolution {
    QSolution { delta_coeff: delta, gamma: params.gamma, horizon_t: params.horizon_t, form: QForm::Printed }
}

/// RK4 solution of the Q-ODE on `[s, T]`, integrated backward from `Q(T) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTrajectory {
    /// Increasing times `s = t_0 < … < t_n = T`.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    gamma: f64,
    delta: f64,
}

impl QTrajectory {
    /// Cubic Hermite interpolation with the ODE right-hand side as slope;
    /// fourth order, like the integrator.
    pub fn interpolate(&self, t: f64) -> f64 {
        let n = self.times.len() - 1;
        let (t0, t1) = (self.times[0], self.times[n]);
        let h = (t1 - t0) / n as f64;
        let i = (((t - t0) / h).floor().max(0.0) as usize).min(n - 1);
        let (a, b) = (self.times[i], self.times[i + 1]);
        let (qa, qb) = (self.values[i], self.values[i + 1]);
        let (da, db) = (q_rhs(qa, self.gamma, self.delta), q_rhs(qb, self.gamma, self.delta));
        let hh = b - a;
        let s = (t - a) / hh;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * qa
            + (s3 - 2.0 * s2 + s) * hh * da
            + (-2.0 * s3 + 3.0 * s2) * qb
            + (s3 - s2) * hh * db
    }
}

pub fn q_ode_oracle(params: &MertonParams, delta: f64, n_steps: usize) -> Result<QTrajectory> {
    if n_steps == 0 {
        return Err(LabError::Configuration("oracle needs n_steps >= 1".into()));
    }
    let (s, t_end, g) = (params.start_s, params.horizon_t, params.gamma);
    let h = (t_end - s) / n_steps as f64;
    let rhs = |q: f64| -> Result<f64> {
        if !(q > 0.0) {
            return Err(LabError::OracleFailure(format!("Q reached {q}")));
        }
        Ok(q_rhs(q, g, delta))
    };
    let mut values = vec![0.0; n_steps + 1];
    values[n_steps] = 1.0;
    let mut q = 1.0;
    for k in (0..n_steps).rev() {
        // Step of size −h.
        let k1 = rhs(q)?;
        let k2 = rhs(q - 0.5 * h * k1)?;
        let k3 = rhs(q - 0.5 * h * k2)?;
        let k4 = rhs(q - h * k3)?;
        q -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !(q > 0.0) {
            return Err(LabError::OracleFailure(format!("Q reached {q} at step {k}")));
        }
        values[k] = q;
    }
    let times = (0..=n_steps).map(|k| if k == n_steps { t_end } else { s + k as f64 * h }).collect();
    Ok(QTrajectory { times, values, gamma: g, delta })
}

// ============================================================================
// Value function and optimal strategies
// ============================================================================

/// `V(s, x, x₁) = −(1/γ)Q(s)(x + θx₁)^γ` with analytic partials. Outside
/// `x + θx₁ > 0` the trait methods return NaN; [`MertonValue::value`] errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertonValue {
    pub params: MertonParams,
    pub q: QSolution,
}

impl MertonValue {
    pub fn new(params: MertonParams) -> Result<Self> {
        let d = delta_coefficient(&params)?;
        Ok(Self { params, q: q_closed_form(&params, d) })
    }

    pub fn with_q(params: MertonParams, q: QSolution) -> Self {
        Self { params, q }
    }

    #[inline]
    fn w(&self, x: f64, x1: f64) -> f64 {
        x + self.params.theta * x1
    }

    fn q_or_nan(&self, s: f64) -> f64 {
        self.q.q(s).unwrap_or(f64::NAN)
    }

    pub fn value(&self, s: f64, x: f64, x1: f64) -> Result<f64> {
        let w = self.w(x, x1);
        if !(w > 0.0) {
            return Err(LabError::Domain(format!("x + theta x1 = {w} must be > 0")));
        }
        Ok(-self.q.q(s)? * w.powf(self.params.gamma) / self.params.gamma)
    }

    pub fn optimal_u(&self, _t: f64, x: f64, x1: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(LabError::Domain(format!("x = {x} must be > 0")));
        }
        Ok(self.params.merton_fraction() * self.w(x, x1) / x)
    }

    pub fn optimal_c(&self, t: f64, x: f64, x1: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(LabError::Domain(format!("x = {x} must be > 0")));
        }
        let q = self.q.q(t)?;
        Ok(self.w(x, x1) / x * q.powf(1.0 / (self.params.gamma - 1.0)))
    }
}

impl ValueCandidate for MertonValue {
    fn v(&self, s: f64, x: f64, x1: f64) -> f64 {
        let w = self.w(x, x1);
        if w > 0.0 {
            -self.q_or_nan(s) * w.powf(self.params.gamma) / self.params.gamma
        } else {
            f64::NAN
        }
    }

    fn v_s(&self, s: f64, x: f64, x1: f64) -> f64 {
        let w = self.w(x, x1);
        if w > 0.0 {
            -self.q.q_prime(s).unwrap_or(f64::NAN) * w.powf(self.params.gamma) / self.params.gamma
        } else {
            f64::NAN
        }
    }

    fn v_x(&self, s: f64, x: f64, x1: f64) -> f64 {
        let w = self.w(x, x1);
        if w > 0.0 {
            -self.q_or_nan(s) * w.powf(self.params.gamma - 1.0)
        } else {
            f64::NAN
        }
    }

    fn v_xx(&self, s: f64, x: f64, x1: f64) -> f64 {
        let w = self.w(x, x1);
        let g = self.params.gamma;
        if w > 0.0 {
            -(g - 1.0) * self.q_or_nan(s) * w.powf(g - 2.0)
        } else {
            f64::NAN
        }
    }

    fn v_x1(&self, s: f64, x: f64, x1: f64) -> f64 {
        self.params.theta * self.v_x(s, x, x1)
    }

    fn v_xx1(&self, s: f64, x: f64, x1: f64) -> f64 {
        self.params.theta * self.v_xx(s, x, x1)
    }
}

/// State-dependent admissibility bounds `|uX| ≤ Λ₁|X + μ₂X₁|`,
/// `0 ≤ cX ≤ Λ₂|X + μ₂X₁|`. The same constants bound the control box:
/// `u ∈ [−Λ₁, Λ₁]`, `c ∈ [0, Λ₂]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Admissibility {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for Admissibility {
    fn default() -> Self {
        Self { lambda1: 10.0, lambda2: 10.0 }
    }
}

impl Admissibility {
    pub fn control_box(&self) -> ControlBox {
        ControlBox { lower: vec![-self.lambda1, 0.0], upper: vec![self.lambda1, self.lambda2] }
    }

    /// Projects `(u, c)` onto the admissible set at state `(x, x₁)`.
    pub fn clamp(&self, mu2: f64, x: f64, x1: f64, u: &mut [f64]) {
        let scale = (x + mu2 * x1).abs() / x.abs();
        if scale.is_finite() {
            let ub = self.lambda1 * scale;
            u[0] = u[0].clamp(-ub, ub);
            u[1] = u[1].clamp(0.0, self.lambda2 * scale);
        }
        u[0] = u[0].clamp(-self.lambda1, self.lambda1);
        u[1] = u[1].clamp(0.0, self.lambda2);
    }
}

/// The wealth model as a structured model with controls `(u, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MertonModel {
    pub merton: MertonParams,
    params: ModelParams,
    bounds: ControlBox,
    pub admissibility: Admissibility,
}

pub fn build_model(params: &MertonParams) -> MertonModel {
    build_model_with(params, Admissibility::default())
}

pub fn build_model_with(params: &MertonParams, admissibility: Admissibility) -> MertonModel {
    MertonModel {
        merton: *params,
        params: params.model_params(),
        bounds: admissibility.control_box(),
        admissibility,
    }
}

impl StructuredModel for MertonModel {
    fn params(&self) -> &ModelParams {
        &self.params
    }
    fn control_set(&self) -> &ControlBox {
        &self.bounds
    }
    fn b1(&self, _t: f64, x: f64, x1: f64, u: &[f64]) -> f64 {
        let p = &self.merton;
        ((p.mu0 - p.r) * u[0] - u[1] + p.r) * x + p.mu1 * x1
    }
    fn b2(&self, _t: f64, _x: f64, _x1: f64, _u: &[f64]) -> f64 {
        self.merton.mu2
    }
    fn sigma(&self, _t: f64, x: f64, _x1: f64, u: &[f64]) -> f64 {
        self.merton.sigma * u[0] * x
    }
    fn f1(&self, _t: f64, x: f64, _x1: f64, y: f64, _z: f64, u: &[f64]) -> f64 {
        let g = self.merton.gamma;
        -self.merton.beta * y + (u[1] * x).powf(g) / g
    }
    fn f2(&self, _t: f64, _x: f64, _x1: f64, _y: f64, _z: f64, _u: &[f64]) -> f64 {
        0.0
    }
    fn phi(&self, x: f64, x1: f64) -> f64 {
        let g = self.merton.gamma;
        (x + self.merton.theta * x1).powf(g) / g
    }
    fn df_dy(&self, _t: f64, _x: f64, _x1: f64, _x2: f64, _y: f64, _z: f64, _u: &[f64]) -> f64 {
        -self.merton.beta
    }
    fn df_dz(&self, _t: f64, _x: f64, _x1: f64, _x2: f64, _y: f64, _z: f64, _u: &[f64]) -> f64 {
        0.0
    }
    fn merton(&self) -> Option<&MertonParams> {
        Some(&self.merton)
    }
}

/// Closed-form optimal feedback `(u*, c*)` projected onto the admissible
/// set. At non-positive wealth it falls back to `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertonPolicy {
    pub value: MertonValue,
    pub admissibility: Admissibility,
}

pub fn build_policy(params: &MertonParams, q: QSolution) -> MertonPolicy {
    MertonPolicy { value: MertonValue::with_q(*params, q), admissibility: Admissibility::default() }
}

impl MertonPolicy {
    pub fn with_admissibility(mut self, admissibility: Admissibility) -> Self {
        self.admissibility = admissibility;
        self
    }
}

impl FeedbackPolicy for MertonPolicy {
    fn evaluate(&self, t: f64, x: f64, x1: f64) -> Control {
        let (u, c) = match (self.value.optimal_u(t, x, x1), self.value.optimal_c(t, x, x1)) {
            (Ok(u), Ok(c)) => (u, c),
            _ => return smallvec![0.0, 0.0],
        };
        let mut out: Control = smallvec![u, c];
        self.admissibility.clamp(self.value.params.mu2, x, x1, &mut out);
        out
    }
}

/// Closed-form adjoints along a path driven by the optimal policy:
/// `q = e^{−β(t−s)}`, `p₁ = −Q w^{γ−1} q`, `p₂ = θp₁`,
/// `k₁ = −(γ−1)Q w^{γ−2} σuX q`, `k₂ = θk₁`, `p₃ = 0`, with `w = X + θX₁`.
pub fn closed_form_adjoint(value: &MertonValue, path: &ForwardPath) -> Result<AdjointPath> {
    let p = &value.params;
    let n = path.times.len();
    let mut adj = AdjointPath::zeros(n);
    for k in 0..n {
        let (t, x, x1) = (path.times[k], path.x[k], path.x1[k]);
        let w = x + p.theta * x1;
        if !(w > 0.0) {
            return Err(LabError::Domain(format!("x + theta x1 = {w} at node {k} of path {}", path.index)));
        }
        let qt = value.q.q(t)?;
        let disc = (-p.beta * (t - p.start_s)).exp();
        let u = path.controls[k][0];
        let p1 = -qt * w.powf(p.gamma - 1.0) * disc;
        let k1 = -(p.gamma - 1.0) * qt * w.powf(p.gamma - 2.0) * p.sigma * u * x * disc;
        adj.p1[k] = p1;
        adj.p2[k] = p.theta * p1;
        adj.q[k] = disc;
        adj.k1[k] = k1;
        adj.k2[k] = p.theta * k1;
    }
    Ok(adj)
}
