use std::path::PathBuf;

use mrn_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MrnError {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("infeasible CTC target: {frames} frames cannot emit {labels} labels with {repeats} adjacent repeats")]
    InfeasibleTarget {
        frames: usize,
        labels: usize,
        repeats: usize,
    },
    #[error("charset registry: {0}")]
    Registry(String),
    #[error("training impossible: {0}")]
    TrainingImpossible(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("protocol audit: {0}")]
    Audit(String),
}

pub type Result<T> = std::result::Result<T, MrnError>;

pub(crate) fn contract(msg: impl Into<String>) -> MrnError {
    MrnError::Contract(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> MrnError {
    let path = path.into();
    move |source| MrnError::Io { path, source }
}
