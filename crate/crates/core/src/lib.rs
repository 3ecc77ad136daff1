//! GCA-ResUNet: a ResNet50/U-Net segmentation network with grouped
//! coordinate attention, implemented on a small CPU tensor core.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod profiler;
pub mod training;

pub use attention::{AttentionConfig, AttentionKind};
pub use backbone::{BackboneConfig, FeaturePyramid};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decoder::DecoderConfig;
pub use error::{CheckpointError, DataError, Error, Result};
pub use model::{Model, ModelConfig};
pub use numerics::{FeatureMap, Scalar, Shape};
pub use params::{Mode, Module};
