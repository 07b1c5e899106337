//! A small mask-aware transformer over padded CSV patches, with exact
//! gradients, finite-difference checks and cross-validated training.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod params;
pub mod train;

pub use config::{ModelConfig, Pooling, TrainConfig};
pub use error::{NnError, Result};
pub use params::ModelParams;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use data::{Dataset, SynthSpec};
pub use train::{cross_validate, CrossValidation};
