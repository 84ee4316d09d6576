//! Experiment configuration: one JSON document, unknown keys rejected.
//!
//! ```json
//! {
//!   "model": { "kind": "merton", "params": { "mu0": 0.08, ... } },
//!   "sim":   { "n_steps": 128, "n_paths": 1000, "master_seed": 7 },
//!   "checks": { "tolerances": { "hjb_residual": 1e-6 } },
//!   "output": { "directory": "out" }
//! }
//! ```
//!
//! Every section except `model` may be omitted; defaults are the values
//! returned by the `Default` impls below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use delaylab::merton::{Admissibility, FreeParams};
use delaylab::X1Method;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub checks: ChecksSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSection {
    Merton(MertonSection),
    Generic(GenericSection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MertonSection {
    /// Free parameters; `θ` and `μ₁` are derived from them.
    #[serde(default = "FreeParams::benchmark")]
    pub params: FreeParams,
    /// Additive offsets applied to the derived `θ`, `μ₁` (constraint breaks).
    #[serde(default)]
    pub perturb: Perturbation,
    #[serde(default)]
    pub admissibility: Admissibility,
    /// Constant initial history `φ ≡ initial_value`.
    #[serde(default = "one")]
    pub initial_value: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub mu1: f64,
}

/// Coefficients as expressions. `b1`, `b2`, `sigma` see `t, x, x1, u, c`;
/// `f1`, `f2` additionally `y, z`; `phi` sees `x, x1`; `initial` is the
/// history `φ(t)` on `[−δ, 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericSection {
    pub lambda: f64,
    pub delta: f64,
    pub horizon_t: f64,
    #[serde(default)]
    pub start_s: f64,
    pub controls: ControlsSection,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    pub b1: String,
    #[serde(default = "zero_expr")]
    pub b2: String,
    pub sigma: String,
    pub f1: String,
    #[serde(default = "zero_expr")]
    pub f2: String,
    pub phi: String,
    #[serde(default = "one_expr")]
    pub initial: String,
    /// Feedback `(u, c)` in `t, x, x1`; one expression per control.
    #[serde(default)]
    pub policy: Option<Vec<String>>,
    /// Candidate value function, needed by the checks.
    #[serde(default)]
    pub value: Option<ValueSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// `V(t, x, x1)` with optional analytic partials; missing partials use
/// central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSection {
    pub v: String,
    #[serde(default)]
    pub v_t: Option<String>,
    #[serde(default)]
    pub v_x: Option<String>,
    #[serde(default)]
    pub v_xx: Option<String>,
    #[serde(default)]
    pub v_x1: Option<String>,
    #[serde(default)]
    pub v_xx1: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_steps: usize,
    pub n_paths: usize,
    /// Overridden by `--seed`; falls back to `DELAYLAB_SEED`, then 0.
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub x1_method: X1Method,
    /// Polynomial degree of the regression basis.
    pub basis_degree: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { n_steps: 128, n_paths: 1000, master_seed: None, x1_method: X1Method::default(), basis_degree: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    /// Restricts a subcommand to these check names; empty runs all.
    pub run: Vec<String>,
    pub tolerances: Tolerances,
    /// Time slices of the HJB / compatibility probe grid.
    pub probe_times: Vec<f64>,
    pub x2_values: Vec<f64>,
    pub grid_nodes: usize,
    /// Rows of the `solve-merton` table.
    pub q_table_rows: usize,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self {
            run: Vec::new(),
            tolerances: Tolerances::default(),
            probe_times: vec![0.0, 0.25, 0.5, 0.75, 0.95],
            x2_values: (0..=20).map(|i| -10.0 + i as f64).collect(),
            grid_nodes: delaylab::optimize::DEFAULT_NODES,
            q_table_rows: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub hjb_residual: f64,
    pub x2_independence: f64,
    pub compatibility_pde: f64,
    pub terminal: f64,
    pub q_ode: f64,
    pub p3_zero: f64,
    pub maximum_condition: f64,
    pub interior_margin: f64,
    pub convexity: f64,
    pub q_closed_form: f64,
    pub relation_time_derivative: f64,
    pub relation_maximality: f64,
    pub relation_adjoint: f64,
    /// Standard-error multiplier for Monte Carlo verdicts.
    pub mc_z: f64,
    /// `C` in the `C·h` bias allowance of the closed-form cost check.
    pub cost_bias: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            hjb_residual: 1e-6,
            x2_independence: 1e-8,
            compatibility_pde: delaylab::hjb::compatibility_tolerance(),
            terminal: 1e-12,
            q_ode: 1e-8,
            p3_zero: 1e-10,
            maximum_condition: 1e-6,
            interior_margin: 1e-3,
            convexity: 1e-6,
            q_closed_form: 1e-12,
            relation_time_derivative: 1e-4,
            relation_maximality: 1e-4,
            relation_adjoint: 1e-4,
            mc_z: 3.0,
            cost_bias: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub csv: bool,
    pub json: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), csv: true, json: true }
    }
}

fn one() -> f64 {
    1.0
}

fn zero_expr() -> String {
    "0".into()
}

fn one_expr() -> String {
    "1".into()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.sim.n_steps == 0 || self.sim.n_paths == 0 {
            return bad("sim.n_steps and sim.n_paths must be positive".into());
        }
        if self.checks.grid_nodes == 0 {
            return bad("checks.grid_nodes must be positive".into());
        }
        if self.checks.q_table_rows < 2 {
            return bad("checks.q_table_rows must be at least 2".into());
        }
        let t = &self.checks.tolerances;
        let all = [
            t.hjb_residual,
            t.x2_independence,
            t.compatibility_pde,
            t.terminal,
            t.q_ode,
            t.p3_zero,
            t.maximum_condition,
            t.interior_margin,
            t.convexity,
            t.q_closed_form,
            t.relation_time_derivative,
            t.relation_maximality,
            t.relation_adjoint,
            t.mc_z,
            t.cost_bias,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("tolerances must be finite and non-negative".into());
        }
        if self.checks.probe_times.iter().chain(&self.checks.x2_values).any(|v| !v.is_finite()) {
            return bad("probe times and x2 values must be finite".into());
        }
        if let ModelSection::Generic(g) = &self.model {
            if g.controls.lower.len() != g.controls.upper.len() || !(1..=2).contains(&g.controls.lower.len()) {
                return bad("controls.lower and controls.upper must both have 1 or 2 entries".into());
            }
            if let Some(p) = &g.policy {
                if p.len() != g.controls.lower.len() {
                    return bad(format!("policy has {} expressions for {} controls", p.len(), g.controls.lower.len()));
                }
            }
        }
        Ok(())
    }

    /// Whether check `name` is selected by `checks.run`.
    pub fn wants(&self, name: &str) -> bool {
        self.checks.run.is_empty() || self.checks.run.iter().any(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_merton_config_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"model": {"kind": "merton"}}"#).unwrap();
        let ModelSection::Merton(m) = &c.model else { panic!() };
        assert_eq!(m.params, FreeParams::benchmark());
        assert_eq!(m.initial_value, 1.0);
        assert_eq!(c.sim, SimSection::default());
        assert_eq!(c.checks.probe_times.len(), 5);
        assert!(c.wants("hjb_residual"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"model": {"kind": "merton"}, "extra": 1}"#,
            r#"{"model": {"kind": "merton", "colour": 1}}"#,
            r#"{"model": {"kind": "merton"}, "sim": {"n_steps": 4, "n_paths": 2, "basis_degree": 2, "seed": 1}}"#,
            r#"{"model": {"kind": "merton"}, "checks": {"tolerances": {"hjb": 1}}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn generic_shape_is_validated() {
        let base = r#"{"model": {"kind": "generic", "lambda": 0.1, "delta": 1, "horizon_t": 1,
            "controls": {"lower": [0], "upper": [1, 2]}, "b1": "x", "sigma": "0.2", "f1": "0", "phi": "x"}}"#;
        assert!(ExperimentConfig::from_json(base).is_err());
    }

    #[test]
    fn check_selection() {
        let c = ExperimentConfig::from_json(r#"{"model": {"kind": "merton"}, "checks": {"run": ["p3_zero"]}}"#).unwrap();
        assert!(c.wants("p3_zero"));
        assert!(!c.wants("hjb_residual"));
    }
}
