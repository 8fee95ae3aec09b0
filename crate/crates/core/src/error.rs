use thiserror::Error;

use crate::geometry::GridDims;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid dims {height}x{width} are invalid: both axes need at least 2 nodes")]
    InvalidDims { height: usize, width: usize },
    #[error("dims mismatch: expected {expected}, got {got}")]
    DimsMismatch { expected: GridDims, got: GridDims },
    #[error("channel {channel} out of range for image with {channels} channels")]
    InvalidChannel { channel: usize, channels: usize },
    #[error("field of length {got} does not match {dims} ({expected} values)")]
    FieldLength {
        dims: GridDims,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("box mask has zero mass")]
    EmptyMask,
    #[error("saliency map has no positive value")]
    ZeroSaliency,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no boxes to optimize")]
    NoBoxes,
    #[error("solver diverged at iteration {iteration} (objective {objective}); lower the learning rate")]
    Diverged { iteration: usize, objective: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
