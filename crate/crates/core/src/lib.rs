//! Clustering-guided multi-layer contrastive pre-training with frozen-encoder linear
//! fine-tuning.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! scalar for the common cases.

pub mod augment;
pub mod checkpoint;
pub mod cluster;
pub mod data;
pub mod embedding;
pub mod error;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Encoder32 = model::Encoder<f32>;
pub type Encoder64 = model::Encoder<f64>;
pub type LinearHead32 = model::LinearHead<f32>;
pub type LinearHead64 = model::LinearHead<f64>;
pub type CentroidBank32 = memory::CentroidBank<f32>;
pub type CentroidBank64 = memory::CentroidBank<f64>;
pub type EmbeddingBatch32 = embedding::EmbeddingBatch<f32>;
pub type EmbeddingBatch64 = embedding::EmbeddingBatch<f64>;
pub type TrainState32 = train::TrainState<f32>;
pub type TrainState64 = train::TrainState<f64>;
