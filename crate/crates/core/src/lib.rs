//! Interleaved vision-text latent reasoning on a tiny multimodal transformer.

pub mod analysis;
pub mod checkpoint;
pub mod curriculum;
pub mod error;
pub mod latent;
pub mod model;
pub mod scalar;
pub mod substrate;
pub mod tasks;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = substrate::Tensor<f32>;
pub type Tensor64 = substrate::Tensor<f64>;
pub type Params32 = model::Params<f32>;
pub type Params64 = model::Params<f64>;
pub type Graph32 = substrate::Graph<f32>;
pub type Graph64 = substrate::Graph<f64>;
