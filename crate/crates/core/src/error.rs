use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty sample set: {0}")]
    EmptySet(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("parameter key sets do not match: {0}")]
    KeyMismatch(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("forget fraction {0} outside (0, 1]")]
    InvalidFraction(f64),

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("metric input {name} = {value} outside [0, 1]")]
    MetricRange { name: &'static str, value: f64 },

    #[error("manipulation provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
