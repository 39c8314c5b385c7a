//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("patch has no spread: all valid values are equal")]
    FlatPatch,
    #[error("patch has no valid cells")]
    EmptyPatch,
    #[error("grid {rows}x{cols} is smaller than tile {tile_rows}x{tile_cols}")]
    GridTooSmall {
        rows: usize,
        cols: usize,
        tile_rows: usize,
        tile_cols: usize,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported raster format: {0}")]
    UnsupportedFormat(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("grid {rows}x{cols} not divisible by scale {scale}")]
    NotDivisible {
        rows: usize,
        cols: usize,
        scale: usize,
    },
    #[error("input too small: {0}")]
    TooSmall(String),
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("timestep index {i} out of range [1, {t}]")]
    IndexOutOfRange { i: usize, t: usize },
    #[error("degenerate variance at timestep {0}")]
    DegenerateVariance(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("schedule mismatch: {0}")]
    SchedMismatch(String),
    #[error("non-finite state: {0}")]
    NonFiniteState(String),
}

pub type Result<T> = std::result::Result<T, Error>;
