use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("degenerate prototype: {0}")]
    DegeneratePrototype(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("no slice contains class {class} after filtering")]
    Exhausted { class: String },

    #[error("non-finite value at {stage}")]
    Numeric { stage: String },

    /// Training produced a non-finite value; `last_good` holds the
    /// parameters from before the failing update.
    #[error("training diverged at iteration {iteration}: {stage}")]
    Diverged {
        iteration: usize,
        stage: String,
        last_good: Box<crate::params::Params>,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn numeric(stage: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
        }
    }

    /// Prefix the stage of a numeric error, leaving other errors untouched.
    pub fn in_stage(self, prefix: &str) -> Self {
        match self {
            Error::Numeric { stage } => Error::Numeric {
                stage: format!("{prefix}/{stage}"),
            },
            Error::EmptyMask(msg) => Error::EmptyMask(format!("{prefix}: {msg}")),
            Error::DegeneratePrototype(msg) => {
                Error::DegeneratePrototype(format!("{prefix}: {msg}"))
            }
            other => other,
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
