//! Training, two-stage retrieval, evaluation, the synthetic benchmark and
//! the file formats around them.

mod config;
mod dataset;
mod gradsuite;
mod metrics;
mod model;
mod retrieval;
mod synthetic;
mod train;

pub use config::Config;
pub use dataset::{Dataset, Sample, Split, DATASET_MAGIC, DATASET_VERSION};
pub use gradsuite::{gradient_suite, GradCase};
pub use metrics::{average_precision, evaluate_rankings, Metrics};
pub use model::{skeleton_for, Embedding, LossParts, Model, Pair};
pub use retrieval::{
    evaluate_model, rank_desc, relation_grid, rerank, retrieve, topology_candidates, Benchmark, Candidates, RetrievalResult,
    Variant,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use train::{class_map, sample_pairs, trace_csv, train, train_model, TrainOutcome};

/// Scores a retrieval result against identity labels.
pub fn evaluate(result: &RetrievalResult, query_labels: &[u32], gallery_labels: &[u32]) -> crate::Result<Metrics> {
    evaluate_rankings(&result.rankings, query_labels, gallery_labels)
}
