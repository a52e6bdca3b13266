//! Bidirectional selective-scan vision backbone.

pub mod config;
pub mod layer;
pub mod model;
pub mod weights;

pub use config::ModelConfig;
pub use layer::{layer_forward, layer_forward_batch, Direction};
pub use model::{
    extract_patches, insert_class_token, patchify, remove_class_token, Decisions, Diagnostics, ForwardOutput, Layout,
    Model, Policy,
};
pub use weights::{DirectionWeights, LayerWeights, ModelWeights};
