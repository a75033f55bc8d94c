//! Metrics, bootstrap uncertainty, pairwise significance and tie-aware ranks.

mod bootstrap;
mod metrics;
mod predictions;
mod ranking;

pub use bootstrap::{
    bootstrap_metric, paired_significance, percentile, significance_matrix, BootstrapConfig, Interval,
    PairedResult, SignificanceMatrix,
};
pub use metrics::{auroc, macro_auroc, mean_z_mae, Metric};
pub use predictions::{read_predictions, write_predictions, PredictionSet};
pub use ranking::{median_rank, median_ranks, rank_models};
