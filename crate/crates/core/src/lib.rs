//! Keypoint grouping for multi-class keypoint detection.
//!
//! Clusters keypoint types into shared output channels, validates and
//! compares groupings, budgets head channels and memory, and decodes
//! CenterNet-style head maps back into per-keypoint predictions.

pub mod budget;
pub mod cluster;
pub mod decode;
pub mod dissim;
pub mod ingest;
pub mod metrics;
pub mod schema;
pub mod synth;

pub use cluster::{Dendrogram, Linkage};
pub use decode::{DecodeParams, Detection, HeadTensors, Refine};
pub use dissim::DissimilarityMatrix;
pub use ingest::{IngestError, Tensor};
pub use schema::{ClassSpec, Grouping, Head, KeypointSchema};
