use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::store::CompatReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the merge toolkit.
///
/// Variants fall into three families that the CLI maps onto exit codes:
/// validation (bad inputs, incompatible models, bad manifests), I/O and
/// format (unreadable or malformed files), and internal invariant breaks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed checkpoint{}: {message}", location(.tensor, .offset))]
    Format {
        message: String,
        tensor: Option<String>,
        offset: Option<u64>,
    },

    #[error("incompatible checkpoints{}:\n{report}", node_suffix(.node))]
    Incompatible {
        node: Option<String>,
        report: CompatReport,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("recipe field `{field}`: {message}")]
    Recipe { field: String, message: String },

    #[error("synthetic spec field `{field}`: {message}")]
    Synth { field: String, message: String },

    #[error(
        "global quantile scope needs {required} elements but the exact-computation cap is {cap}"
    )]
    CapExceeded { required: u64, cap: u64 },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

fn location(tensor: &Option<String>, offset: &Option<u64>) -> String {
    match (tensor, offset) {
        (Some(t), Some(o)) => format!(" (tensor {t:?}, byte {o})"),
        (Some(t), None) => format!(" (tensor {t:?})"),
        (None, Some(o)) => format!(" (byte {o})"),
        (None, None) => String::new(),
    }
}

fn node_suffix(node: &Option<String>) -> String {
    node.as_ref()
        .map(|n| format!(" at plan node {n}"))
        .unwrap_or_default()
}

/// Coarse error family, used for exit-code mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
            Error::Incompatible { .. }
            | Error::InvalidInput(_)
            | Error::Recipe { .. }
            | Error::Synth { .. }
            | Error::CapExceeded { .. } => ErrorKind::Validation,
            Error::Internal(_) => ErrorKind::Internal,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(message: impl Into<String>) -> Self {
        Error::Format {
            message: message.into(),
            tensor: None,
            offset: None,
        }
    }

    pub(crate) fn format_at_tensor(tensor: &str, message: impl Into<String>) -> Self {
        Error::Format {
            message: message.into(),
            tensor: Some(tensor.to_owned()),
            offset: None,
        }
    }

    pub(crate) fn format_at_offset(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            message: message.into(),
            tensor: None,
            offset: Some(offset),
        }
    }

    pub(crate) fn recipe(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Recipe {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn synth(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Synth {
            field: field.into(),
            message: message.into(),
        }
    }
}
