//! Vision-transformer model: configuration, parameters, and forward passes
//! (plain and differentiable).

pub mod config;
pub mod diff;
pub mod forward;
pub mod params;
pub mod trainer;

pub use config::ModelConfig;
pub use forward::{
    activation_sites, argmax_rows, forward, patch_embed, quantizable_weights, AttentionTrace,
    ForwardResult, SiteMode, LN_EPS,
};
pub use params::{snap_f32, tensor_layout, ParameterSet};
pub use trainer::{train_toy_model, TrainConfig};
