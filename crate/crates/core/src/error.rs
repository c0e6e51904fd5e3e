use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not match what the operation expects.
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    /// `line` is 1-based; 0 marks a command-line override.
    #[error("config error at {}, key `{key}`: {reason}", config_origin(*.line))]
    Config {
        line: usize,
        key: String,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary input; `offset` is the byte offset of the offending record.
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("missing artifact {}: run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn config_origin(line: usize) -> String {
    if line == 0 {
        "command line".into()
    } else {
        format!("line {line}")
    }
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Process exit status for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument { .. } => 2,
            Error::Numerical { .. } => 4,
            Error::Shape { .. }
            | Error::Data(_)
            | Error::Format { .. }
            | Error::MissingArtifact { .. }
            | Error::Fingerprint(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
        }
    }
}
