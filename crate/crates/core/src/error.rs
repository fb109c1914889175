use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate sigma {value:e} at unit {unit} (|sigma| below floor {floor:e})")]
    DegenerateSigma { unit: usize, value: f64, floor: f64 },

    #[error("degenerate sigma parameter at unit {unit}: inverse parameterization with p = 0")]
    DegenerateParameter { unit: usize },

    #[error("insufficient batch for batch statistics: {count} value(s) per unit")]
    InsufficientBatch { count: usize },

    #[error("degenerate sample in layer {layer}: unit {unit} has std {std:e}")]
    DegenerateSample {
        layer: String,
        unit: usize,
        std: f64,
    },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ingestion error in {}: {detail} (byte offset {offset})", file.display())]
    Ingestion {
        file: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures that mean a training run blew up numerically rather
    /// than a programming or configuration mistake.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::DegenerateSigma { .. }
                | Error::DegenerateParameter { .. }
                | Error::Domain { .. }
        )
    }
}
