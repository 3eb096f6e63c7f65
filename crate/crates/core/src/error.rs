//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: String,
        right: String,
    },

    #[error("image too small: {context} (got {width}x{height})")]
    ImageTooSmall {
        context: &'static str,
        width: usize,
        height: usize,
    },

    #[error("rotation angle at pi: axis is ambiguous, log map undefined")]
    DegenerateRotation,

    #[error("point behind camera: z = {z}")]
    BehindCamera { z: f64 },

    #[error("warp invalid at pixel ({u}, {v}): no gradient available")]
    InvalidWarp { u: f64, v: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("non-finite gradient in block '{block}'")]
    NonFiniteGradient { block: String },

    #[error("no valid ground-truth pixels to evaluate against")]
    EmptyGroundTruth,

    #[error("trajectories share fewer than 2 associated poses")]
    InsufficientOverlap,

    #[error("ray at pixel ({u}, {v}) hits no scene plane in front of the camera")]
    SceneCoverage { u: usize, v: usize },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("png error: {0}")]
    Png(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
