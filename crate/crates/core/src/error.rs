use thiserror::Error;

/// Errors produced anywhere in the modelling pipeline.
#[derive(Debug, Error)]
pub enum LsrError {
    #[error("record has no visits")]
    NoVisits,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("dataset has {records} records, fewer than the {parts} split parts")]
    TooFewRecords { records: usize, parts: usize },
    #[error("parse error at record {record}, field `{field}`: {reason}")]
    Parse {
        record: usize,
        field: String,
        reason: String,
    },
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("non-finite rate {value} at t = {time}")]
    NonFiniteRate { time: f64, value: f64 },
    #[error("attention row {0} has no allowed keys")]
    EmptyAttentionRow(usize),
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite loss in patient `{patient}` ({term})")]
    NonFiniteLoss { patient: String, term: &'static str },
    #[error("no deaths in training split")]
    NoDeaths,
    #[error("missing ground truth for patient `{0}`")]
    MissingOracle(String),
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("gradient check failed: relative error {max_rel_error:.3e} at {param}")]
    GradientCheck { max_rel_error: f64, param: String },
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LsrError>;

impl LsrError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LsrError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
