//! Command-line front end for the delay-control lab.
//!
//! Exit status: 0 when every check passes, 1 when a check fails, 2 for
//! configuration or parameter errors, 3 for numerical divergence.

#![allow(clippy::large_enum_variant)]

pub mod commands;
pub mod config;
pub mod expr;
pub mod models;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use delaylab::hjb::CheckReport;
use delaylab::LabError;
use serde::Serialize;
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::models::Setup;

pub const SEED_ENV: &str = "DELAYLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "delaylab", version, about = "Numerical lab for stochastic recursive control with delay")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config and DELAYLAB_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides output.directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress the stdout summary.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Forward and backward trajectories under the configured policy.
    Simulate,
    /// Derived parameters, Q table and optimal strategy samples.
    SolveMerton,
    /// HJB residual, x2-independence and compatibility PDEs.
    CheckHjb,
    /// p3, maximum condition, convexity spot check and q.
    CheckPmp,
    /// Value/adjoint relations along optimal paths.
    CheckRelations,
    /// Paired Monte Carlo comparison against perturbed policies.
    CompareControls,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveMerton => "solve-merton",
            Command::CheckHjb => "check-hjb",
            Command::CheckPmp => "check-pmp",
            Command::CheckRelations => "check-relations",
            Command::CompareControls => "compare-controls",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Lab(e) => match e {
                LabError::SimulationDiverged { .. } | LabError::Domain(_) | LabError::OracleFailure(_) => 3,
                _ => 2,
            },
        }
    }
}

/// What a subcommand produced, before it is written out.
#[derive(Debug, Default)]
pub struct Outcome {
    pub checks: Vec<CheckReport>,
    pub details: serde_json::Map<String, serde_json::Value>,
    pub csv: Vec<(&'static str, Vec<u8>)>,
    pub summary: Vec<String>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("detail values serialise");
        self.details.insert(key.to_string(), v);
    }
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'static str,
    model: &'static str,
    seed: u64,
    n_steps: usize,
    n_paths: usize,
    x1_method: delaylab::X1Method,
    tolerances: &'a config::Tolerances,
    pass: bool,
    checks: &'a [CheckReport],
    details: &'a serde_json::Map<String, serde_json::Value>,
}

/// `--seed`, then `sim.master_seed`, then `DELAYLAB_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not a u64"))),
        None => Ok(0),
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    let io = |source| CliError::Io { path: path.clone(), source };
    let mut f = fs::File::create(&path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Runs one invocation and returns `(exit status, report.json bytes)` on
/// success; diagnostics go to stderr.
pub fn execute(cli: &Cli) -> Result<(i32, Vec<u8>), CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(cli.seed, cfg.sim.master_seed, env_seed.as_deref())?;
    let setup = Setup::from_section(&cfg.model)?;
    let outcome = commands::dispatch(cli.command, &cfg, &setup, seed)?;

    let report = Report {
        command: cli.command.name(),
        model: setup.kind(),
        seed,
        n_steps: cfg.sim.n_steps,
        n_paths: cfg.sim.n_paths,
        x1_method: cfg.sim.x1_method,
        tolerances: &cfg.checks.tolerances,
        pass: outcome.pass(),
        checks: &outcome.checks,
        details: &outcome.details,
    };
    let mut json = serde_json::to_vec_pretty(&report).expect("report serialises");
    json.push(b'\n');

    let dir = cli.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    if cfg.output.csv || cfg.output.json {
        fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
    }
    if cfg.output.csv {
        for (name, bytes) in &outcome.csv {
            write_file(&dir, name, bytes)?;
        }
    }
    if cfg.output.json {
        write_file(&dir, "report.json", &json)?;
    }

    if !cli.quiet {
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        for line in &outcome.summary {
            let _ = writeln!(out, "{line}");
        }
        for c in &outcome.checks {
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{verdict} {:<34} max_residual={} tolerance={} probes={}",
                c.check,
                delaylab::fmt_float(c.max_residual),
                delaylab::fmt_float(c.tolerance),
                c.probes
            );
        }
    }
    for c in outcome.checks.iter().filter(|c| !c.pass) {
        eprintln!("check failed: {} ({} vs tolerance {})", c.check, c.max_residual, c.tolerance);
    }
    Ok((if outcome.pass() { 0 } else { 1 }, json))
}

pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok((code, _)) => code,
        Err(e) => {
            eprintln!("delaylab {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_priority() {
        assert_eq!(resolve_seed(Some(1), Some(2), Some("3")).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2), Some("3")).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some(" 3 ")).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(resolve_seed(None, None, Some("x")).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Lab(LabError::InvalidParameters("x".into())).exit_code(), 2);
        assert_eq!(CliError::Lab(LabError::SimulationDiverged { path: 0, step: 1, value: 1e13 }).exit_code(), 3);
    }
}
