//! Icosphere meshes, synthetic atlases, ROI-preserving supervertex
//! partitioning and padded patch tokenization.

mod binio;

pub mod atlas;
pub mod error;
pub mod mesh;
pub mod metrics;
pub mod partitioner;
pub mod planner;
pub mod sampling;
pub mod tokenizer;

pub use atlas::{AtlasLabeling, RoiId};
pub use error::{Error, Result};
pub use mesh::{Adjacency, Mesh};
pub use partitioner::{partition_hemisphere, CsvMap, PartitionConfig};
pub use planner::PartitionPlan;
pub use tokenizer::{IndexTable, PaddedBatch};
