//! Evaluation and statistics: accuracy, seed aggregation, the Wilcoxon
//! signed-rank test, and numerical checks of the Fisher-information gap and
//! the KL decomposition of the expected log-likelihood.

mod fisher;
mod kl;
mod metrics;
mod wilcoxon;

pub use fisher::{fisher_gap_check, FisherReport, FisherScore, FisherSetup};
pub use kl::{kl_decomposition_check, KlReport};
pub use metrics::{aggregate_curves, argmax, test_accuracy, AggregateCurve};
pub use wilcoxon::{wilcoxon_exact, WilcoxonResult, EXACT_LIMIT};
