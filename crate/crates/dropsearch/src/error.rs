use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, names both sides.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A kernel op produced NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// An internal precondition was violated (programming error, not user input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed genome text or out-of-vocabulary token.
    #[error("invalid genome: {0}")]
    Genome(String),

    /// Bad run configuration or CLI arguments.
    #[error("config error: {0}")]
    Config(String),

    /// A reward evaluation failed (non-finite loss, evaluator panic, ...).
    #[error("evaluation failed: {0}")]
    EvalFailed(String),

    /// The search gave up (e.g. persistent evaluator failures).
    #[error("search aborted: {0}")]
    Aborted(String),

    /// A replay diverged from the recorded log.
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code per the CLI contract: 1 = user error, 2 = internal fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Genome(_) | Error::Config(_) | Error::Io(_) | Error::Json(_) => 1,
            _ => 2,
        }
    }
}
