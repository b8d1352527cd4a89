//! Multimodal satellite raster stacking, a compact U-Net trained with a
//! hand-written autodiff, leakage-aware splits and segmentation scoring.

pub mod catalog;
pub mod error;
pub mod eval;
pub mod model;
pub mod raster;
pub mod seed;
pub mod splits;
pub mod stacker;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
