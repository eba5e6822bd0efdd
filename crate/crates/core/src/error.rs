use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file. `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dataset is missing feature vectors")]
    MissingFeatures,

    #[error("labels are required but missing for {0} sample(s)")]
    MissingLabels(usize),

    #[error("feature dimension is zero")]
    Degenerate,

    #[error("count {k} exceeds trial count {m}")]
    InvalidCount { k: usize, m: usize },

    #[error("interval [{lower}, {upper}] is empty after clipping")]
    EmptyInterval { lower: f64, upper: f64 },

    #[error("group has no {0} samples")]
    EmptyGroup(&'static str),

    #[error("no group passed the eligibility thresholds for any temperature")]
    NoEligibleGroups,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
