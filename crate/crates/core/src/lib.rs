//! Core of a desk-scale model-stitching laboratory: dense tensor kernels,
//! small residual CNNs with cut points, training loops, datasets, stitching
//! layers with penalty estimation, and linear CKA.

pub mod data;
pub mod error;
mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod stitching;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Mode, Param, Scalar, Tensor};
