use thiserror::Error;

/// Errors raised by tensor construction, tape ops and backward passes.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("tensor does not belong to this tape")]
    TapeMismatch,
    #[error("tensor has no tape handle")]
    NoTapeHandle,
}

/// Errors raised by the checkpoint reader/writer.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    BadVersion { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("non-finite value in tensor {0:?}")]
    NonFinite(String),
}

/// Errors raised by dataset generators and loaders.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    LengthMismatch { images: usize, labels: usize },
    #[error("invalid dataset parameter: {0}")]
    InvalidParam(String),
}

/// Errors raised by the training and inference loops.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged: epoch cost {cost} exceeded 10x the initial average {baseline} for 3 consecutive epochs")]
    Diverged { cost: f64, baseline: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
