//! RCMNet: a ResNet18 backbone with CBAM attention in every residual block
//! and a trailing bottleneck-transformer stage, plus the surrounding data,
//! training, transfer-learning and Grad-CAM pipeline. Everything runs on a
//! from-scratch f64 autodiff engine and is deterministic for a fixed seed.

pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod init;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
