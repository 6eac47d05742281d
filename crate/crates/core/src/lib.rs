//! Object counting by density-map regression with two auxiliary segmentation tasks
//! (crowd region and density level), an attention-gated shared backbone, graph reasoning
//! over the density branch, and a dilated contrastive density loss.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the common choices.

pub mod annotation;
pub mod backbone;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod groundtruth;
pub mod heads;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::CountingModel<f32>;
pub type Model64 = model::CountingModel<f64>;
pub type DensityMap32 = groundtruth::DensityMap<f32>;
pub type DensityMap64 = groundtruth::DensityMap<f64>;
