//! Restoration toolkit for digital elevation models: a mean-reverting
//! diffusion process models joint downsampling-plus-void degradation, and a
//! learned time-conditioned noise predictor simulates the reverse process to
//! super-resolve and void-fill elevation patches in one pass.

pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod grid;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod sampling;
pub mod sde;
pub mod training;

pub use error::{Error, Result};
