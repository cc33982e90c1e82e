//! Stitching layers, stitched models, and penalty estimation.

mod penalty;
mod stitched;
mod stitcher;

pub use penalty::{
    baselines, connectivity, penalty, penalty_curve, penalty_with, symmetrized_penalty,
    write_penalty_csv, Baselines, ConnectivityReport, PenaltyReport,
};
pub use stitched::{fit_stitcher, make_stitched, Spurious, StitchOptions, StitchedModel};
pub use stitcher::{StitchFamily, StitchInit, Stitcher, STITCH_KERNELS};
