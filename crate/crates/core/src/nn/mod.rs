//! Small CNNs split into blocks with addressable cut points.

mod blocks;
mod checkpoint;
mod fold;
mod gradsuite;
mod layers;
mod model;
mod permute;

pub use blocks::{Block, BlockKind, Head, ModalBlock, PlainBlock, ResidualBlock, StemBlock};
pub use checkpoint::{load, save, CHECKPOINT_VERSION};
pub use fold::{fold_affine, fold_stitcher};
pub use gradsuite::{gradient_suite, GRAD_STEP, GRAD_TOLERANCE};
pub use layers::{BatchNorm2d, Conv2d, GradNeeds, Linear, ModalBatchNorm};
pub use model::{
    ArchKind, ArchitectureSpec, ModelGraph, ModelMeta, ARCH_SPEC_VERSION, PLAIN_CNN_5,
    SMALL_RESNET_8, SMALL_RESNET_8_PARAMS, STEM_KERNEL,
};
