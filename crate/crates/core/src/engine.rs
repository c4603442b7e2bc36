//! The active-learning loop: score the pool, select a batch, reveal its
//! labels, refit, evaluate.
//!
//! Every random draw comes from a stream keyed by the run seed and the
//! cycle, so a `(config, seed)` pair always yields the same curve.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{score_with_masks, AcquisitionKind, CoresetContext, ScoreVector};
use crate::analysis::test_accuracy;
use crate::data::{load_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::estimation::{train_cycle, DependencyLedger, EstimatorConfig, Problem};
use crate::model::{masks_per_sample, mlp_embed, Activation, AdamState, MlpParams};
use crate::rng::{Purpose, RngStreams};
use crate::selection::{select, SelectionConfig, SelectionRecord};
use crate::tensor::Tensor;

/// Dropout rate given to models whose acquisition samples dropout masks.
pub const MC_DROPOUT_RATE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub acquisition: AcquisitionKind,
    pub selection: SelectionConfig,
    pub estimator: EstimatorConfig,
    /// Number of acquisition cycles `T` after the initial random pick.
    pub cycles: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// Fill the per-phase wall-clock columns. Off keeps curves byte-stable.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    /// Uses the dataset's default architecture, with MC dropout switched on
    /// only when the acquisition needs it.
    pub fn new(
        dataset: DatasetSpec,
        acquisition: AcquisitionKind,
        selection: SelectionConfig,
        estimator: EstimatorConfig,
        cycles: usize,
    ) -> Self {
        let (hidden, activation) = dataset.architecture();
        let dropout_rate = if acquisition.uses_dropout() {
            MC_DROPOUT_RATE
        } else {
            0.0
        };
        Self {
            dataset,
            acquisition,
            selection,
            estimator,
            cycles,
            hidden,
            activation,
            dropout_rate,
            record_timing: false,
        }
    }

    /// Checks everything that does not need the data loaded.
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.estimator.validate()?;
        if self.cycles == 0 {
            return Err(Error::InvalidConfig(
                "at least one cycle is required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.acquisition.uses_dropout() && self.dropout_rate == 0.0 {
            return Err(Error::InvalidConfig(
                "BALD needs a positive dropout rate".into(),
            ));
        }
        if self.acquisition == AcquisitionKind::Coreset && self.hidden.is_empty() {
            return Err(Error::NoEmbeddingLayer);
        }
        if let AcquisitionKind::Bald { samples } = self.acquisition {
            if samples < 2 {
                return Err(Error::InvalidConfig(
                    "BALD needs at least two dropout samples".into(),
                ));
            }
        }
        Ok(())
    }

    /// Labeled-set size after the last cycle.
    pub fn final_labeled(&self) -> usize {
        1 + self.cycles * self.selection.k
    }
}

/// Labeled and unlabeled parts of the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolState {
    labeled: Vec<usize>,
    unlabeled: BTreeSet<usize>,
}

impl PoolState {
    pub fn new(train: &[usize]) -> Result<Self> {
        let unlabeled: BTreeSet<usize> = train.iter().copied().collect();
        if unlabeled.len() != train.len() {
            return Err(Error::Dataset("train split lists a sample twice".into()));
        }
        Ok(Self {
            labeled: Vec::new(),
            unlabeled,
        })
    }

    /// Labeled indices in acquisition order.
    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    /// Unlabeled indices in ascending order.
    pub fn unlabeled(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn label(&mut self, indices: &[usize]) -> Result<()> {
        if let Some(&i) = indices.iter().find(|i| !self.unlabeled.contains(i)) {
            return Err(Error::NotInSnapshot(i));
        }
        for &i in indices {
            self.unlabeled.remove(&i);
            self.labeled.push(i);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub acquisition_s: f64,
    pub selection_s: f64,
    pub training_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleLog {
    pub cycle: usize,
    pub n_labeled: usize,
    pub test_acc: f64,
    pub nll: f64,
    pub dependency: f64,
    pub sum_log_z: Option<f64>,
    pub timing: Option<PhaseTiming>,
}

pub const CURVE_HEADER: &str =
    "cycle,n_labeled,test_acc,nll,dependency,sum_logZ,acq_s,sel_s,train_s";

impl CycleLog {
    /// One CSV row; optional fields are left empty.
    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let t = self.timing;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.cycle,
            self.n_labeled,
            self.test_acc,
            self.nll,
            self.dependency,
            opt(self.sum_log_z),
            opt(t.map(|t| t.acquisition_s)),
            opt(t.map(|t| t.selection_s)),
            opt(t.map(|t| t.training_s)),
        )
    }
}

/// `curve.csv` contents, header included.
pub fn curve_csv(curve: &[CycleLog]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for log in curve {
        let _ = writeln!(out, "{}", log.to_csv_row());
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub curve: Vec<CycleLog>,
    pub ledger: DependencyLedger,
    pub params: MlpParams,
    /// Set when training diverged; the curve then stops at the last good cycle.
    pub failure: Option<String>,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.curve.last().map(|c| c.test_acc)
    }
}

/// Loads the dataset and splits it with the run seed.
pub fn prepare_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    load_dataset(spec)?.make_splits(spec.split_fractions(), seed)
}

pub fn run_active_learning(config: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let data = prepare_dataset(&config.dataset, seed)?;
    run_on_dataset(config, &data, seed)
}

/// Runs the loop on an already split dataset.
pub fn run_on_dataset(config: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let splits = data
        .splits()
        .ok_or_else(|| Error::Dataset("dataset has no splits".into()))?;
    if splits.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let needed = config.final_labeled();
    if needed > splits.train.len() {
        return Err(Error::PoolExhausted {
            needed,
            available: splits.train.len(),
        });
    }

    let streams = RngStreams::new(seed);
    let mut dims = vec![data.num_features()];
    dims.extend(&config.hidden);
    dims.push(data.num_classes());
    let mut params = MlpParams::init(
        &dims,
        config.activation,
        config.dropout_rate,
        &mut streams.stream(Purpose::Init, 0),
    )?;
    let mut adam = AdamState::new(&params, config.estimator.adam);
    let mut pool = PoolState::new(&splits.train)?;
    let mut ledger = DependencyLedger::new();
    let mut labels: Vec<usize> = Vec::with_capacity(needed);
    let mut curve = Vec::with_capacity(config.cycles + 1);

    let pick = {
        let candidates = pool.unlabeled();
        candidates[streams
            .stream(Purpose::InitialPick, 0)
            .random_range(0..candidates.len())]
    };
    pool.label(&[pick])?;
    labels.push(data.y()[pick]);
    ledger.push(SelectionRecord {
        cycle: 0,
        ordered_selected: vec![pick],
        pool_snapshot: Vec::new(),
        labeled_snapshot: Vec::new(),
        strategy: config.selection.strategy,
        beta: config.selection.beta,
        random_seed_event: true,
    })?;

    for cycle in 0..=config.cycles {
        let mut timing = PhaseTiming::default();
        if cycle > 0 {
            let started = Instant::now();
            let scores = score_pool(config, data, &params, &pool, &streams, cycle)?;
            timing.acquisition_s = started.elapsed().as_secs_f64();

            let started = Instant::now();
            let record = select(
                &config.selection,
                &scores,
                &mut streams.stream(Purpose::Gumbel, cycle),
            )?
            .with_context(cycle, pool.labeled().to_vec());
            timing.selection_s = started.elapsed().as_secs_f64();

            // the oracle: ground truth is read only for the chosen batch
            labels.extend(record.ordered_selected.iter().map(|&i| data.y()[i]));
            pool.label(&record.ordered_selected)?;
            ledger.push(record)?;
        }

        let started = Instant::now();
        let problem = Problem {
            features: data.x(),
            labeled: pool.labeled(),
            labels: &labels,
            ledger: &ledger,
            acquisition: config.acquisition,
            streams,
        };
        let trained = match train_cycle(&mut params, &mut adam, &problem, &config.estimator, cycle)
        {
            Ok(log) => log,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                return Ok(RunOutcome {
                    curve,
                    ledger,
                    params,
                    failure: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        };
        timing.training_s = started.elapsed().as_secs_f64();

        curve.push(CycleLog {
            cycle,
            n_labeled: pool.labeled().len(),
            test_acc: test_accuracy(&params, data.x(), data.y(), &splits.test)?,
            nll: trained.nll,
            dependency: trained.dependency,
            sum_log_z: trained.sum_log_z,
            timing: config.record_timing.then_some(timing),
        });
    }

    Ok(RunOutcome {
        curve,
        ledger,
        params,
        failure: None,
    })
}

/// Acquisition scores for the current unlabeled pool.
fn score_pool(
    config: &ExperimentConfig,
    data: &Dataset,
    params: &MlpParams,
    pool: &PoolState,
    streams: &RngStreams,
    cycle: usize,
) -> Result<ScoreVector> {
    score_candidates(
        config.acquisition,
        params,
        data.x(),
        &pool.unlabeled(),
        pool.labeled(),
        streams,
        cycle,
    )
}

/// Scores the rows `pool` of `features`. BALD masks come from the same
/// per-sample lanes the dependency term replays later, and core-set centers
/// are the embeddings of `labeled`.
pub fn score_candidates(
    acquisition: AcquisitionKind,
    params: &MlpParams,
    features: &Tensor,
    pool: &[usize],
    labeled: &[usize],
    streams: &RngStreams,
    cycle: usize,
) -> Result<ScoreVector> {
    let x = features.select_rows(pool)?;
    let masks = match acquisition {
        AcquisitionKind::Bald { samples } => Some(masks_per_sample(
            params,
            pool,
            samples,
            streams,
            Purpose::Dropout,
            cycle,
        )?),
        _ => None,
    };
    let context = match acquisition {
        AcquisitionKind::Coreset => Some(CoresetContext {
            center_embeddings: mlp_embed(params, &features.select_rows(labeled)?)?,
        }),
        _ => None,
    };
    let scores = score_with_masks(acquisition, params, &x, context.as_ref(), masks.as_deref())?;
    ScoreVector::new(pool.to_vec(), scores, acquisition, cycle as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::EstimatorKind;
    use crate::selection::Strategy;

    fn small(acq: AcquisitionKind, strategy: Strategy, est: EstimatorKind) -> ExperimentConfig {
        let mut estimator = EstimatorConfig::with_estimator(est);
        estimator.epochs_per_cycle = 3;
        ExperimentConfig::new(
            DatasetSpec::Iris,
            acq,
            SelectionConfig::new(strategy, 3, 1.0).unwrap(),
            estimator,
            4,
        )
    }

    #[test]
    fn pool_bookkeeping_holds_every_cycle() {
        let config = small(
            AcquisitionKind::Entropy,
            Strategy::Ssms,
            EstimatorKind::Dmle,
        );
        let data = prepare_dataset(&config.dataset, 3).unwrap();
        let out = run_on_dataset(&config, &data, 3).unwrap();
        assert!(out.failure.is_none());
        assert_eq!(out.curve.len(), 5);
        for (c, log) in out.curve.iter().enumerate() {
            assert_eq!(log.cycle, c);
            assert_eq!(log.n_labeled, 1 + 3 * c);
            assert!((0.0..=1.0).contains(&log.test_acc));
        }
        let labeled = out.ledger.labeled_indices();
        assert_eq!(labeled.len(), 13);
        let train: BTreeSet<usize> = data.splits().unwrap().train.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for r in out.ledger.records() {
            for i in &r.ordered_selected {
                assert!(train.contains(i));
                assert!(seen.insert(*i), "sample {i} selected twice");
            }
            if !r.random_seed_event {
                assert_eq!(
                    r.pool_snapshot.len() + r.labeled_snapshot.len(),
                    train.len()
                );
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_curves() {
        let config = small(
            AcquisitionKind::Bald { samples: 4 },
            Strategy::Sps,
            EstimatorKind::Dmle,
        );
        let a = run_active_learning(&config, 5).unwrap();
        let b = run_active_learning(&config, 5).unwrap();
        assert_eq!(curve_csv(&a.curve), curve_csv(&b.curve));
        let c = run_active_learning(&config, 6).unwrap();
        assert_ne!(curve_csv(&a.curve), curve_csv(&c.curve));
    }

    #[test]
    fn every_acquisition_and_strategy_runs() {
        for acq in [
            AcquisitionKind::Entropy,
            AcquisitionKind::LeastConfidence,
            AcquisitionKind::Coreset,
        ] {
            for s in [
                Strategy::TopK,
                Strategy::Ssms,
                Strategy::Sps,
                Strategy::Ssrs,
            ] {
                let out = run_active_learning(&small(acq, s, EstimatorKind::Dmle), 1).unwrap();
                assert!(out.failure.is_none());
                assert!(out
                    .curve
                    .iter()
                    .all(|c| c.nll.is_finite() && c.dependency.is_finite()));
            }
        }
    }

    #[test]
    fn imle_still_reports_the_dependency_diagnostic() {
        let out = run_active_learning(
            &small(
                AcquisitionKind::Entropy,
                Strategy::Ssms,
                EstimatorKind::Imle,
            ),
            2,
        )
        .unwrap();
        assert_eq!(out.curve[0].dependency, 0.0);
        assert!(out.curve[1..]
            .iter()
            .all(|c| c.dependency > 0.0 && c.sum_log_z.is_none()));
    }

    #[test]
    fn exact_z_emits_a_trace() {
        let mut config = small(
            AcquisitionKind::Entropy,
            Strategy::Ssms,
            EstimatorKind::Dmle,
        );
        config.estimator.include_z = true;
        let out = run_active_learning(&config, 2).unwrap();
        assert!(out.curve[1..]
            .iter()
            .all(|c| c.sum_log_z.is_some_and(f64::is_finite)));
        assert!(
            curve_csv(&out.curve)
                .lines()
                .nth(2)
                .unwrap()
                .split(',')
                .nth(5)
                .unwrap()
                != ""
        );
    }

    #[test]
    fn too_many_cycles_exhaust_the_pool() {
        let mut config = small(
            AcquisitionKind::Entropy,
            Strategy::TopK,
            EstimatorKind::Imle,
        );
        config.cycles = 40;
        assert!(matches!(
            run_active_learning(&config, 0),
            Err(Error::PoolExhausted {
                needed: 121,
                available: 110
            })
        ));
    }

    #[test]
    fn timing_columns_are_empty_unless_requested() {
        let mut config = small(
            AcquisitionKind::Entropy,
            Strategy::TopK,
            EstimatorKind::Imle,
        );
        config.cycles = 1;
        let out = run_active_learning(&config, 0).unwrap();
        assert!(curve_csv(&out.curve)
            .lines()
            .nth(1)
            .unwrap()
            .ends_with(",,,"));
        config.record_timing = true;
        let out = run_active_learning(&config, 0).unwrap();
        assert!(out.curve[1].timing.unwrap().training_s > 0.0);
    }

    #[test]
    fn pool_state_rejects_relabeling() {
        let mut pool = PoolState::new(&[4, 2, 9]).unwrap();
        pool.label(&[9]).unwrap();
        assert!(pool.label(&[9]).is_err());
        assert_eq!(pool.unlabeled(), vec![2, 4]);
        assert_eq!(pool.labeled(), &[9]);
    }
}
