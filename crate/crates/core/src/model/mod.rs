//! Network definitions.

mod config;
mod discriminators;
mod extractor;
mod transform;

pub use config::ModelConfig;
pub use discriminators::{FeatureDiscriminator, PixelDiscriminator, LEAKY_SLOPE};
pub use extractor::{
    extractor_from_id, perceptual_features, ConvExtractor, FeatureExtractor, DEFAULT_EXTRACTOR_SEED,
};
pub use transform::{PREFIX as TRANSFORM_PREFIX, add_residual_block, fuse_local_global, residual_block_preact, DenoiseOutput, TransformNet};

#[cfg(test)]
mod tests;
