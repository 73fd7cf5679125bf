use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("class {0} has no samples")]
    EmptyClass(u32),

    #[error("cannot normalize a zero-norm vector ({0})")]
    ZeroNorm(&'static str),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("arithmetic overflow evaluating {0}")]
    Overflow(&'static str),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("task {task}: {source}")]
    InTask {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Attach the index of the task being processed.
    pub fn in_task(self, task: usize) -> Self {
        match self {
            e @ Error::InTask { .. } => e,
            e => Error::InTask {
                task,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping task context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InTask { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_))
    }

    pub fn is_protocol(&self) -> bool {
        matches!(self.root(), Error::Protocol(_))
    }
}
