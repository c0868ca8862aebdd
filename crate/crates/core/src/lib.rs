//! Occlusion-robust re-identification building blocks: keypoint-pooled
//! semantic features, adaptive directed graph convolution over the skeleton,
//! differentiable cross-image graph matching with embedded alignment, and the
//! training / retrieval / evaluation pipeline around them.
//!
//! Everything learned runs on the small reverse-mode substrate in
//! [`numerics`]; feature maps and keypoint heatmaps come from the synthetic
//! generator or from a dataset container rather than from a CNN.

mod binio;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod relation;
pub mod semantic;
pub mod topology;

pub use error::{Error, Result};
pub use numerics::{Mode, ParamStore, Tape, Tensor, Var};
pub use pipeline::{Config, Metrics, RetrievalResult, SyntheticSpec};
pub use relation::SkeletonAdjacency;
pub use semantic::{ConfidenceVector, FeatureMap, HeatmapSet, NodeFeatureSet, Stage};
pub use topology::{AffinityMatrix, MatchingMatrix};
