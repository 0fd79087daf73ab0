use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("empty loss support")]
    EmptyLossSupport,
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("empty token batch")]
    EmptyTokenBatch,
    #[error("scene-too-sparse: class `{class}` has {count} instances, need at least {min}")]
    SceneTooSparse {
        class: String,
        count: usize,
        min: usize,
    },
    #[error("constraint-unsatisfiable: {0}")]
    ConstraintUnsatisfiable(String),
    #[error("placement-infeasible: {0}")]
    PlacementInfeasible(String),
    #[error("poisson solve did not converge: residual {residual:.3e} after {sweeps} sweeps")]
    NonConvergence { residual: f64, sweeps: usize },
    #[error("ambiguous-expression: `{term}` occurs {occurrences} times in `{expr}`")]
    AmbiguousExpression {
        expr: String,
        term: String,
        occurrences: usize,
    },
    #[error("unsupported task {task} for scene: {reason}")]
    UnsupportedTask { task: String, reason: String },
    #[error("tokenizer: {0}")]
    Tokenize(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config: unknown keys {0:?}")]
    UnknownConfigKeys(Vec<String>),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (NaN, divergence, non-convergence).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NonFiniteGradient(_)
                | Error::Diverged { .. }
                | Error::NonConvergence { .. }
        )
    }
}
