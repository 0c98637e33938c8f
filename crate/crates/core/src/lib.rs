//! Data-free quantization toolkit for small vision transformers.
//!
//! The crate synthesizes calibration images from noise by driving the
//! diversity of patch-to-patch similarity inside a pretrained transformer,
//! then uses those images to fit clipping ranges for uniform quantizers.

pub mod calib;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod patchsim;
pub mod priors;
pub mod quant;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Result, VitqError};
