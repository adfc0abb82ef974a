//! Metrics and the analysis tables.

pub mod ablation;
mod analysis;
pub mod csv;
mod metrics;

pub use analysis::{
    action_distribution, conflict_subset_eval, topk_confidence_curve, ActionDistribution,
    ActionFrequencies, Subset, SubsetAccuracy,
};
pub use metrics::{accuracy, compute_metrics, regression_metrics, weighted_f1, MetricsReport};
