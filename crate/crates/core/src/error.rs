use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure contracts of the
/// individual modules so callers (and the CLI exit-code mapping) can
/// distinguish config mistakes from runtime divergence and verification
/// failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("CTC infeasible: target needs {needed} frames but only {frames} available")]
    Feasibility { needed: usize, frames: usize },
    #[error("oracle instance too large: {0}")]
    OracleSize(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("divergence at step {step}: {diagnostic}")]
    Divergence { step: u64, diagnostic: String },
    #[error("budget infeasible for subnet {subnet}: {msg}")]
    BudgetInfeasible { subnet: usize, msg: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("state error: {0}")]
    State(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
