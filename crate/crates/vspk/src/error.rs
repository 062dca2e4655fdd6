//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller violated an operation's contract (preconditions).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (layer chain, framing parameters, config file).
    #[error("configuration error: {0}")]
    Config(String),

    /// Numeric failure: non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Out-of-range label or missing per-class entry.
    #[error("index error: {0}")]
    Index(String),

    /// Batch statistics undefined: fewer than two rows in train mode.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A basis row with zero norm cannot be direction-compared.
    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    /// Byte stream is not the container it claims to be.
    #[error("format error: {0}")]
    Format(String),

    /// The container is recognized but the variant is not handled.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// The input ended before the declared payload did.
    #[error("truncated input: {0}")]
    Truncated(String),

    /// An audio clip is too short for the requested extraction.
    #[error("insufficient audio: {0}")]
    InsufficientAudio(String),

    /// A speaker lacks the utterances a sampling step needs.
    #[error("insufficient data for speaker {speaker}: {detail}")]
    InsufficientData { speaker: String, detail: String },

    /// A metric is undefined on the given inputs (e.g. single-class EER).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Checkpoint file version is not one this build can read.
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    /// Filesystem failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an I/O error with the path it happened on.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
