//! Forest-height regression from multi-source Earth-observation rasters with
//! a squeeze-excitation UNet, sparse-label model transfer, and kNN / MLR
//! reference methods.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod patch;
pub mod plots;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
