//! Deterministic multi-segment token clustering.
//!
//! A video's patch-token embeddings are split into contiguous temporal
//! segments, each segment is clustered independently (KKZ-seeded
//! k-medoids or normalized spectral clustering), and only the center
//! tokens are kept, in their original spatio-temporal order. The crate
//! also provides the segment-level retrieval similarity and the symmetric
//! temperature-scaled contrastive loss used to score reduced sequences.
//!
//! With the default `parallel` feature, segments and the inner distance
//! loops run on rayon. Disabling it falls back to plain sequential
//! iteration; results are bit-identical either way.

pub mod cli;
pub mod distance;
pub mod embedding;
pub mod error;
pub mod kmedoids;
pub mod metrics;
mod par;
pub mod points;
pub mod retrieval;
pub mod segmenter;
pub mod spectral;
pub mod synth;

pub use distance::{gaussian_similarity, squared_distance, Metric};
pub use embedding::{ClusterResult, SegmentClusters, SegmentSpec, TokenIndex, TokenSet};
pub use error::{Error, Result};
pub use kmedoids::{kkz_init, kmeans, kmedoids_pp, Centers, KMedoidsConfig, PartitionOutcome};
pub use points::PointSet;
pub use segmenter::{
    cluster_segments, reduction_report, run_plan, Algorithm, ClusteringPlan, ReducedSequence,
    ReductionReport, Stage,
};
pub use spectral::{SimilarityGraph, SpectralConfig, SpectralEmbedding};
