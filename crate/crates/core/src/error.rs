use thiserror::Error;

/// Errors raised by the simulation, regression and check machinery.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("simulation diverged on path {path} at step {step} (|x| = {value:e})")]
    SimulationDiverged { path: usize, step: usize, value: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("oracle failure: {0}")]
    OracleFailure(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
