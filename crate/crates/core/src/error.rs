use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("label value {value} outside the valid range 0..=4")]
    LabelRange { value: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("infeasible phantom spec: {0}")]
    PhantomSpec(String),

    #[error("empty foreground: no pixel belongs to the requested classes")]
    EmptyForeground,

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("epoch {epoch} out of range 0..{epochs}")]
    Range { epoch: usize, epochs: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NumericalDivergence { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
