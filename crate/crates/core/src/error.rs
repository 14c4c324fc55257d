use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in `{layer}`: expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        actual: String,
    },

    /// A feature vector with zero norm, or a pair whose dot product is not
    /// positive, where a ratio of norms to dot product was required.
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error(
        "corrupt batchnorm statistics in `{layer}`: channel {channel} has var + eps = {value}"
    )]
    CorruptBatchNorm {
        layer: String,
        channel: usize,
        value: f32,
    },

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("weight `{name}` has shape {actual:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid exit positions {given:?}: {reason}; valid boundaries are {valid:?}")]
    InvalidExitPositions {
        given: Vec<usize>,
        valid: Vec<usize>,
        reason: String,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("{what} index {index} out of range 1..={count}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        count: usize,
    },

    #[error("probability vector has negative entry {value} at position {index}")]
    NegativeProbability { index: usize, value: f32 },

    #[error("probability vector sums to {0}, expected 1")]
    NotNormalized(f64),

    #[error("exit controller stepped out of order: expected exit {expected}, got {got}")]
    OutOfOrderStep { expected: usize, got: usize },

    #[error("probabilities are required by the entropy policy at exit {0}")]
    MissingProbabilities(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("CIFAR-10 format error: {0}")]
    CifarFormat(String),

    #[error("CIFAR-10 record {record} has label {label}, expected 0..=9")]
    CifarLabel { record: usize, label: u8 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Errors raised while decoding a weight file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated payload while reading {0}")]
    Truncated(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(String),

    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),

    #[error("tensor `{name}` has invalid rank {rank}")]
    InvalidRank { name: String, rank: u8 },

    #[error("tensor `{name}` has a zero dimension")]
    ZeroDimension { name: String },

    #[error("tensor name of {0} bytes exceeds the u16 length field")]
    NameTooLong(usize),

    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}
