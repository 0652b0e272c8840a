use thiserror::Error;

/// Errors surfaced by the pipeline. Fallible operations return
/// [`F2pResult`] instead of panicking; panics are reserved for internal
/// invariant violations (indexing bugs), never for bad input data.
#[derive(Debug, Error)]
pub enum F2pError {
    /// Caller passed something structurally unusable (size mismatch,
    /// non-finite parameter, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input is well-formed but carries no usable signal, e.g. a constant
    /// image fed to registration or an all-background segmentation.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Finger segmentation produced no foreground region.
    #[error("segmentation failed: {0}")]
    SegmentationFailed(String),

    /// Core point detection found no candidate and no fallback was allowed.
    #[error("no core point candidate found")]
    CoreNotFound,

    /// Triplet mining could not produce any triplet (e.g. a single identity).
    #[error("triplet mining failed: {0}")]
    MiningFailed(String),

    /// Training diverged or hit a non-finite loss.
    #[error("training failed at epoch {epoch}: {reason}")]
    TrainingFailed { epoch: usize, reason: String },

    /// Checkpoint serialization/deserialization problem (bad magic, CRC
    /// mismatch, unknown tensor, shape mismatch, ...).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// PNG decode/encode failure.
    #[error("image codec error: {0}")]
    Codec(String),
}

pub type F2pResult<T> = Result<T, F2pError>;

impl F2pError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        F2pError::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        F2pError::DegenerateInput(msg.into())
    }
}
