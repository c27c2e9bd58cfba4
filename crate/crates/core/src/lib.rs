//! Semantic segmentation of pre-trained 3D Gaussian splatting scenes.
//!
//! Every Gaussian carries a K-class object code. Codes are learned by
//! alpha-blending them into per-pixel class distributions and minimizing a
//! cross-entropy loss against posed 2D masks, then cleaned up with k-nearest
//! neighbor averaging and statistical outlier filtering.

// Validation writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod projection;
pub mod rasterizer;
pub mod refine;
pub mod scene_io;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
