//! Small-patch image classification: a reverse-mode autodiff core, eight
//! architectures for 40x40 RGB inputs, the patch data pipeline, blur
//! robustness analysis, training and metrics.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; training uses
//! `f32` and gradient checks use `f64`.

pub mod archzoo;
pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod perturb;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Model32 = archzoo::Model<f32>;
pub type Model64 = archzoo::Model<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Adam32 = optim::Adam<f32>;
pub type Adam64 = optim::Adam<f64>;
pub type TensorData32 = trainer::TensorData<f32>;
pub type TensorData64 = trainer::TensorData<f64>;
