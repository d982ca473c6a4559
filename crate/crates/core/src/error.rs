use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid layer, network or training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor extents do not line up with what a kernel expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinity produced by a kernel, a loss or an update.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation needed state that was never produced (e.g. a missing cache).
    #[error("state error: {0}")]
    State(String),

    /// Caller supplied inputs that violate an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    #[error("timestamp {0} is not available")]
    Unavailable(usize),

    /// Malformed or inconsistent dataset on disk.
    #[error("data error: {0}")]
    Data(String),

    #[error("split infeasible: class {class} has {segments} segment(s), at least 3 are required")]
    SplitInfeasible { class: usize, segments: usize },

    /// Failure while handling one timestamp of a multi-model run.
    #[error("timestamp {timestamp}: {source}")]
    Timestamp {
        timestamp: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 1 is reserved for usage errors, which are reported by the argument
    /// parser before any of these variants can occur.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Timestamp { source, .. } => source.exit_code(),
            Error::Config(_) | Error::Input(_) => 1,
            _ => 2,
        }
    }
}
