//! Weakly supervised single-target detection.
//!
//! A reduced-width U-Net is trained on masks rasterized from bounding boxes;
//! a small classifier on the bridge features decides target presence; the
//! confidence-weighted first and second moments of the thresholded mask give
//! the box center and extent.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pgm;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Dims, Module, Param, Real, Tensor4};
