//! Self-supervised pretraining for 3D volumes: a shifted-window transformer
//! with a semantic-attention block, trained by masked token distillation
//! from a noisy momentum teacher.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod pretrain;
pub mod scalar;
pub mod tensor;
pub mod views;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

/// Single-precision instantiations.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Grid32 = volume::Grid3<f32>;
pub type Volume32 = volume::VolumeSample<f32>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type Trainer32 = pretrain::Trainer<f32>;

/// Double-precision instantiations.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Grid64 = volume::Grid3<f64>;
pub type Volume64 = volume::VolumeSample<f64>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Trainer64 = pretrain::Trainer<f64>;
