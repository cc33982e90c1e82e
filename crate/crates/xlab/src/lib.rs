//! Manifest-driven stitching experiments: trained networks and stitch fits
//! are cached by content, results are written as CSV, JSON and SVG.

pub mod error;
pub mod experiments;
pub mod lab;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
pub use experiments::run;
pub use lab::Lab;
pub use manifest::Manifest;
pub use report::RunResult;
