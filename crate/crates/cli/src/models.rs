//! Models, value candidates and policies assembled from a config.

use delaylab::bsdde::RegressionBasis;
use delaylab::delay::DelayBuffer;
use delaylab::hjb::{ValueCandidate, FD_REL_STEP};
use delaylab::merton::{build_model_with, build_policy, resolve_constraints, MertonModel, MertonPolicy, MertonValue};
use delaylab::{Control, ControlBox, FeedbackPolicy, ModelParams, StructuredModel};

use crate::config::{GenericSection, MertonSection, ModelSection, ValueSection};
use crate::expr::{env, Expr, Var};
use crate::CliError;

const STATE: [Var; 3] = [Var::T, Var::X, Var::X1];
const COEFF: [Var; 5] = [Var::T, Var::X, Var::X1, Var::U, Var::C];
const GENERATOR: [Var; 7] = [Var::T, Var::X, Var::X1, Var::Y, Var::Z, Var::U, Var::C];

pub struct ExprModel {
    params: ModelParams,
    bounds: ControlBox,
    b1: Expr,
    b2: Expr,
    sigma: Expr,
    f1: Expr,
    f2: Expr,
    phi: Expr,
}

impl StructuredModel for ExprModel {
    fn params(&self) -> &ModelParams {
        &self.params
    }
    fn control_set(&self) -> &ControlBox {
        &self.bounds
    }
    fn b1(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64 {
        self.b1.eval(&env(t, x, x1, 0.0, 0.0, 0.0, u))
    }
    fn b2(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64 {
        self.b2.eval(&env(t, x, x1, 0.0, 0.0, 0.0, u))
    }
    fn sigma(&self, t: f64, x: f64, x1: f64, u: &[f64]) -> f64 {
        self.sigma.eval(&env(t, x, x1, 0.0, 0.0, 0.0, u))
    }
    fn f1(&self, t: f64, x: f64, x1: f64, y: f64, z: f64, u: &[f64]) -> f64 {
        self.f1.eval(&env(t, x, x1, 0.0, y, z, u))
    }
    fn f2(&self, t: f64, x: f64, x1: f64, y: f64, z: f64, u: &[f64]) -> f64 {
        self.f2.eval(&env(t, x, x1, 0.0, y, z, u))
    }
    fn phi(&self, x: f64, x1: f64) -> f64 {
        self.phi.eval(&env(0.0, x, x1, 0.0, 0.0, 0.0, &[]))
    }
}

pub struct ExprValue {
    v: Expr,
    v_t: Option<Expr>,
    v_x: Option<Expr>,
    v_xx: Option<Expr>,
    v_x1: Option<Expr>,
    v_xx1: Option<Expr>,
}

fn step(at: f64, rel: f64) -> f64 {
    rel * at.abs().max(1.0)
}

impl ExprValue {
    fn at(e: &Expr, s: f64, x: f64, x1: f64) -> f64 {
        e.eval(&env(s, x, x1, 0.0, 0.0, 0.0, &[]))
    }
}

impl ValueCandidate for ExprValue {
    fn v(&self, s: f64, x: f64, x1: f64) -> f64 {
        Self::at(&self.v, s, x, x1)
    }
    fn v_s(&self, s: f64, x: f64, x1: f64) -> f64 {
        match &self.v_t {
            Some(e) => Self::at(e, s, x, x1),
            None => {
                let h = step(s, FD_REL_STEP);
                (self.v(s + h, x, x1) - self.v(s - h, x, x1)) / (2.0 * h)
            }
        }
    }
    fn v_x(&self, s: f64, x: f64, x1: f64) -> f64 {
        match &self.v_x {
            Some(e) => Self::at(e, s, x, x1),
            None => {
                let h = step(x, FD_REL_STEP);
                (self.v(s, x + h, x1) - self.v(s, x - h, x1)) / (2.0 * h)
            }
        }
    }
    fn v_xx(&self, s: f64, x: f64, x1: f64) -> f64 {
        match &self.v_xx {
            Some(e) => Self::at(e, s, x, x1),
            None => {
                let h = step(x, 1e-4);
                (self.v(s, x + h, x1) - 2.0 * self.v(s, x, x1) + self.v(s, x - h, x1)) / (h * h)
            }
        }
    }
    fn v_x1(&self, s: f64, x: f64, x1: f64) -> f64 {
        match &self.v_x1 {
            Some(e) => Self::at(e, s, x, x1),
            None => {
                let h = step(x1, FD_REL_STEP);
                (self.v(s, x, x1 + h) - self.v(s, x, x1 - h)) / (2.0 * h)
            }
        }
    }
    fn v_xx1(&self, s: f64, x: f64, x1: f64) -> f64 {
        match &self.v_xx1 {
            Some(e) => Self::at(e, s, x, x1),
            None => {
                let h = step(x1, FD_REL_STEP);
                (self.v_x(s, x, x1 + h) - self.v_x(s, x, x1 - h)) / (2.0 * h)
            }
        }
    }
}

pub struct ExprPolicy {
    controls: Vec<Expr>,
}

impl FeedbackPolicy for ExprPolicy {
    fn evaluate(&self, t: f64, x: f64, x1: f64) -> Control {
        let e = env(t, x, x1, 0.0, 0.0, 0.0, &[]);
        self.controls.iter().map(|c| c.eval(&e)).collect()
    }
}

pub struct MertonSetup {
    pub model: MertonModel,
    pub value: MertonValue,
    pub policy: MertonPolicy,
    pub initial_value: f64,
}

pub struct GenericSetup {
    pub model: ExprModel,
    pub value: Option<ExprValue>,
    pub policy: Option<ExprPolicy>,
    pub initial: Expr,
}

pub enum Setup {
    Merton(MertonSetup),
    Generic(GenericSetup),
}

fn expr(src: &str, section: &GenericSection, allowed: &[Var], field: &str) -> Result<Expr, CliError> {
    Expr::parse(src, &section.constants, allowed).map_err(|e| CliError::Config(format!("model.{field}: {e}")))
}

fn build_merton(m: &MertonSection) -> Result<MertonSetup, CliError> {
    let mut params = resolve_constraints(&m.params).map_err(CliError::Lab)?;
    params.theta += m.perturb.theta;
    params.mu1 += m.perturb.mu1;
    if !(m.initial_value.is_finite() && m.initial_value > 0.0) {
        return Err(CliError::Config("model.initial_value must be positive".into()));
    }
    let a = m.admissibility;
    if !(a.lambda1 > 0.0 && a.lambda2 > 0.0 && a.lambda1.is_finite() && a.lambda2.is_finite()) {
        return Err(CliError::Config("admissibility bounds must be positive and finite".into()));
    }
    let model = build_model_with(&params, a);
    let value = MertonValue::new(params).map_err(CliError::Lab)?;
    let policy = build_policy(&params, value.q).with_admissibility(a);
    Ok(MertonSetup { model, value, policy, initial_value: m.initial_value })
}

fn build_generic(g: &GenericSection) -> Result<GenericSetup, CliError> {
    let params = ModelParams::new(g.lambda, g.delta, g.horizon_t, g.start_s).map_err(CliError::Lab)?;
    let bounds = ControlBox::new(g.controls.lower.clone(), g.controls.upper.clone()).map_err(CliError::Lab)?;
    let model = ExprModel {
        params,
        bounds,
        b1: expr(&g.b1, g, &COEFF, "b1")?,
        b2: expr(&g.b2, g, &COEFF, "b2")?,
        sigma: expr(&g.sigma, g, &COEFF, "sigma")?,
        f1: expr(&g.f1, g, &GENERATOR, "f1")?,
        f2: expr(&g.f2, g, &GENERATOR, "f2")?,
        phi: expr(&g.phi, g, &[Var::X, Var::X1], "phi")?,
    };
    let value = g.value.as_ref().map(|v| build_value(v, g)).transpose()?;
    let policy = match &g.policy {
        Some(exprs) => Some(ExprPolicy {
            controls: exprs
                .iter()
                .enumerate()
                .map(|(i, s)| expr(s, g, &STATE, &format!("policy[{i}]")))
                .collect::<Result<_, _>>()?,
        }),
        None => None,
    };
    let initial = expr(&g.initial, g, &[Var::T], "initial")?;
    Ok(GenericSetup { model, value, policy, initial })
}

fn build_value(v: &ValueSection, g: &GenericSection) -> Result<ExprValue, CliError> {
    let opt = |s: &Option<String>, field: &str| s.as_ref().map(|s| expr(s, g, &STATE, field)).transpose();
    Ok(ExprValue {
        v: expr(&v.v, g, &STATE, "value.v")?,
        v_t: opt(&v.v_t, "value.v_t")?,
        v_x: opt(&v.v_x, "value.v_x")?,
        v_xx: opt(&v.v_xx, "value.v_xx")?,
        v_x1: opt(&v.v_x1, "value.v_x1")?,
        v_xx1: opt(&v.v_xx1, "value.v_xx1")?,
    })
}

impl Setup {
    pub fn from_section(section: &ModelSection) -> Result<Self, CliError> {
        Ok(match section {
            ModelSection::Merton(m) => Setup::Merton(build_merton(m)?),
            ModelSection::Generic(g) => Setup::Generic(build_generic(g)?),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Setup::Merton(_) => "merton",
            Setup::Generic(_) => "generic",
        }
    }

    pub fn model(&self) -> &dyn StructuredModel {
        match self {
            Setup::Merton(m) => &m.model,
            Setup::Generic(g) => &g.model,
        }
    }

    pub fn value(&self) -> Result<&dyn ValueCandidate, CliError> {
        match self {
            Setup::Merton(m) => Ok(&m.value),
            Setup::Generic(g) => match &g.value {
                Some(v) => Ok(v),
                None => Err(CliError::Config("this subcommand needs model.value".into())),
            },
        }
    }

    /// The policy used to drive simulations, which is also the maximiser
    /// hint for the HJB sup.
    pub fn policy(&self) -> Result<&dyn FeedbackPolicy, CliError> {
        match self {
            Setup::Merton(m) => Ok(&m.policy),
            Setup::Generic(g) => match &g.policy {
                Some(p) => Ok(p),
                None => Err(CliError::Config("this subcommand needs model.policy".into())),
            },
        }
    }

    pub fn maximizer(&self) -> Option<&dyn FeedbackPolicy> {
        self.policy().ok()
    }

    pub fn initial_buffer(&self, h: f64) -> Result<DelayBuffer, CliError> {
        let delta = self.model().params().delta;
        match self {
            Setup::Merton(m) => DelayBuffer::constant(delta, h, m.initial_value),
            Setup::Generic(g) => {
                DelayBuffer::from_initial_path(delta, h, |t| g.initial.eval(&env(t, 0.0, 0.0, 0.0, 0.0, 0.0, &[])))
            }
        }
        .map_err(CliError::Lab)
    }

    pub fn basis(&self, degree: usize) -> RegressionBasis {
        match self {
            Setup::Merton(m) => RegressionBasis::with_power(degree, m.value.params.theta, m.value.params.gamma),
            Setup::Generic(_) => RegressionBasis::polynomial(degree),
        }
    }
}
