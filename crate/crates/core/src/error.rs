use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite input to {0}")]
    NumericInput(&'static str),

    #[error("loss is undefined: every row carries the ignore index")]
    UndefinedLoss,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// A problem with a data file, located by line when known.
    #[error("data error{}: {message}", location(.path, .line))]
    Data {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },

    #[error("benchmark spec error: {0}")]
    Spec(String),

    #[error("policy violation: {0}")]
    Policy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint: bad magic bytes (not a checkpoint file)")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint: file truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint: vocabulary hash mismatch for {}", .0.display())]
    VocabHashMismatch(PathBuf),

    #[error("checkpoint: malformed {0}")]
    MalformedCheckpoint(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(path: &Option<PathBuf>, line: &Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!(" at {}:{l}", p.display()),
        (Some(p), None) => format!(" in {}", p.display()),
        (None, Some(l)) => format!(" at line {l}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(message: impl Into<String>) -> Self {
        Error::Data {
            path: None,
            line: None,
            message: message.into(),
        }
    }
}
