//! Full-chip CMP topography modeling with a fully convolutional network.
//!
//! The pipeline turns a rectangle layout into a binary raster, pairs it with
//! a height map (measured, or produced by [`synth`]), cuts both into
//! augmented subframes, trains a U-Net on them and reports nanometer-scale
//! error metrics.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod grid;
pub mod layout;
pub mod persistence;
pub mod preprocess;
pub mod synth;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use grid::Grid2D;
