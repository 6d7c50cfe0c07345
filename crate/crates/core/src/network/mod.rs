//! Full video network: patch embedding, windowed stages with downsampling
//! between them, classification head, presets and checkpoints.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::Checkpoint;
pub use config::{InputShape, ModelConfig, PatchVersion, Preset, StageLayout, STAGE_CHANNELS, STAGE_GROUPS};
pub use model::{
    block_prefix, buffer_names, classify_head, downsample, forward, model_param_specs, patch_channels, patch_embed,
    stage_prefix, window_partition, window_unpartition, Buffers, Model, StageTrace,
};
