//! Pool-based active learning with dependency-aware maximum likelihood
//! estimation (DMLE) and the conventional independent estimator (IMLE).
//!
//! The crate is organised bottom-up:
//!
//! - [`diff`]: a small reverse-mode differentiation tape over [`Tensor`]s.
//! - [`model`]: the MLP classifier, MC dropout and Adam.
//! - [`acquisition`]: entropy, BALD, least-confidence and core-set scores.
//! - [`selection`]: Top-k and Gumbel-perturbed stochastic batch selection,
//!   plus exact ordered-sequence log-probabilities.
//! - [`estimation`]: IMLE/DMLE objectives and per-cycle training.
//! - [`data`] and [`engine`]: datasets and the active-learning loop.
//! - [`analysis`]: metrics, the exact Wilcoxon signed-rank test and the
//!   Fisher-information and KL-decomposition checks.
//! - [`verify`]: property suites used by the `verify` command.

pub mod acquisition;
pub mod analysis;
pub mod data;
pub mod diff;
pub mod engine;
mod error;
pub mod estimation;
pub mod model;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod verify;

pub use acquisition::{AcquisitionKind, CoresetContext, ScoreVector};
pub use analysis::{AggregateCurve, FisherReport, KlReport, WilcoxonResult};
pub use data::{Dataset, DatasetSpec};
pub use diff::{DiffError, Graph, Inputs, NamedTensors, NodeId};
pub use engine::{CycleLog, ExperimentConfig, PoolState, RunOutcome};
pub use error::{Error, Result};
pub use estimation::{DependencyLedger, DependencyTermResult, EstimatorConfig, EstimatorKind};
pub use model::{Activation, AdamState, MlpParams};
pub use rng::{Purpose, RngStreams, Stream};
pub use selection::{Ranking, SelectionConfig, SelectionRecord, Strategy};
pub use tensor::Tensor;
