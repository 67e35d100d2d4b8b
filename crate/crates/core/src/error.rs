use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid tensor: shape {shape:?} does not match {len} elements")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("k-means needs at least {k} distinct points, found {distinct}")]
    TooFewDistinctPoints { k: usize, distinct: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample rate mismatch: waveform {got} Hz, config {expected} Hz")]
    SampleRateMismatch { got: u32, expected: u32 },

    #[error("unit sequence is not collapsed (adjacent repeat at position {position})")]
    NotCollapsed { position: usize },

    #[error("unit {unit} out of range for {num_units} units")]
    UnitOutOfRange { unit: u32, num_units: usize },

    #[error("carrier for unit {unit} is {freq} Hz, at or above Nyquist {nyquist} Hz")]
    CarrierAboveNyquist { unit: u32, freq: f64, nyquist: f64 },

    #[error("{path}: {msg}")]
    BadFile { path: String, msg: String },

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint vocab hash mismatch: file {file:#018x}, expected {expected:#018x}")]
    VocabHashMismatch { file: u64, expected: u64 },

    #[error("checkpoint format version {got}, supported {supported}")]
    CheckpointVersion { got: u32, supported: u32 },

    #[error("example {example_id}: {msg}")]
    Example { example_id: String, msg: String },

    #[error("training diverged at step {step}: loss is non-finite")]
    Diverged { step: usize },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad data, bad file, bad configuration.
    Data,
    /// Numerical failure (non-finite values, divergence).
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. }
            | Error::Diverged { .. }
            | Error::NonFiniteGradient { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
