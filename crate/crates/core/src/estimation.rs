//! IMLE and DMLE objectives, the dependency term, and per-cycle training.
//!
//! IMLE minimizes the summed negative log-likelihood of the labeled set.
//! DMLE additionally maximizes the log-probability that past selections
//! would have been made, re-evaluated under the current parameters: each
//! ledger record contributes `Σ ũ(x)` over its selected items and, in
//! exact-normalization mode, `-Σ ln Z` over its pool snapshot.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::acquisition::{score_node, AcquisitionKind, NodeContext};
use crate::diff::{grad_check, DiffError, Graph, Inputs, NamedTensors, NodeId};
use crate::error::{Error, Result};
use crate::model::{
    adam_step, draw_masks, embed_node, logits_node, masks_per_sample, AdamConfig, AdamState,
    HiddenMasks, MlpParams, ParamNodes,
};
use crate::rng::{Purpose, RngStreams};
use crate::selection::{
    rank_descending, sequence_positions, SelectionConfig, SelectionRecord, Strategy,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Imle,
    Dmle,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Imle => "imle",
            EstimatorKind::Dmle => "dmle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "imle" => Ok(EstimatorKind::Imle),
            "dmle" => Ok(EstimatorKind::Dmle),
            other => Err(Error::InvalidConfig(format!("unknown estimator `{other}`"))),
        }
    }
}

/// How soft-rank sampling turns scores into ranks inside the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum RankMode {
    /// Integer ranks, constant within a gradient step.
    Hard,
    /// `r_i = 1 + Σ_{j≠i} sigmoid((a_j - a_i) / temperature)`.
    Smooth { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub estimator: EstimatorKind,
    pub include_z: bool,
    pub epochs_per_cycle: usize,
    pub warm_start: bool,
    pub rank_mode: RankMode,
    #[serde(skip, default)]
    pub adam: AdamConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Dmle,
            include_z: false,
            epochs_per_cycle: 30,
            warm_start: true,
            rank_mode: RankMode::Hard,
            adam: AdamConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn with_estimator(estimator: EstimatorKind) -> Self {
        Self {
            estimator,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let RankMode::Smooth { temperature } = self.rank_mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "smooth-rank temperature must be positive, got {temperature}"
                )));
            }
        }
        Ok(())
    }
}

/// Every selection event of a run, in cycle order. The initial random pick
/// is kept (flagged) so the labeled set can be rebuilt, but it never enters
/// the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DependencyLedger {
    records: Vec<SelectionRecord>,
}

impl DependencyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: SelectionRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.cycle <= last.cycle {
                return Err(Error::InvalidArgument(format!(
                    "ledger cycles must increase: {} after {}",
                    record.cycle, last.cycle
                )));
            }
        }
        // the random pick may be logged without its pool snapshot
        if !(record.random_seed_event && record.pool_snapshot.is_empty()) {
            sequence_positions(&record.pool_snapshot, &record.ordered_selected)?;
        }
        if let Some(&i) = record
            .pool_snapshot
            .iter()
            .find(|i| record.labeled_snapshot.contains(i))
        {
            return Err(Error::InvalidArgument(format!(
                "sample {i} is in both pool and labeled snapshots at cycle {}",
                record.cycle
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[SelectionRecord] {
        &self.records
    }

    /// Records that contribute to the dependency term.
    pub fn dependency_records(&self) -> impl Iterator<Item = &SelectionRecord> {
        self.records.iter().filter(|r| !r.random_seed_event)
    }

    /// Labeled set reconstructed from the selections, in labeling order.
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .flat_map(|r| r.ordered_selected.iter().copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DependencyTermResult {
    pub total: f64,
    /// `Σ ũ(x)` over each record's selected items.
    pub per_cycle_logprob: Vec<f64>,
    /// `Σ_i ln Z_{τ,i}` per record, when normalization is included.
    pub per_cycle_log_z: Option<Vec<f64>>,
}

/// Everything the objective reads besides the parameters.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    /// Feature rows for every sample id that can appear in the ledger.
    pub features: &'a Tensor,
    pub labeled: &'a [usize],
    /// Oracle labels aligned with `labeled`.
    pub labels: &'a [usize],
    pub ledger: &'a DependencyLedger,
    pub acquisition: AcquisitionKind,
    /// Run streams; BALD masks are replayed from them.
    pub streams: RngStreams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub nll: f64,
    pub dependency: f64,
    pub total: f64,
    pub sum_log_z: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    /// Loss components after the last update, without dropout.
    pub nll: f64,
    pub dependency: f64,
    pub sum_log_z: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

/// θ-independent inputs for one ledger record.
struct RecordPlan {
    strategy: Strategy,
    beta: f64,
    /// Sample ids scored for this record.
    ids: Vec<usize>,
    /// Positions of the selected items within `ids`, in selection order.
    selected: Vec<usize>,
    /// Rows of the shared score column, when scores are shared.
    shared_rows: Option<Vec<usize>>,
    features: Option<Tensor>,
    centers: Option<Tensor>,
    masks: Option<Vec<HiddenMasks>>,
}

/// θ-independent inputs for the whole objective, built once per cycle.
struct LossPlan {
    x_labeled: Tensor,
    labels: Vec<usize>,
    acquisition: AcquisitionKind,
    include_z: bool,
    rank_mode: RankMode,
    shared_features: Option<Tensor>,
    records: Vec<RecordPlan>,
}

struct LossNodes {
    total: NodeId,
    nll: NodeId,
    dependency: Option<NodeId>,
    per_record: Vec<NodeId>,
    log_z: Vec<NodeId>,
}

impl LossPlan {
    fn new(
        params: &MlpParams,
        problem: &Problem<'_>,
        config: &EstimatorConfig,
        with_dependency: bool,
    ) -> Result<Self> {
        config.validate()?;
        if problem.labeled.is_empty() {
            return Err(Error::Empty("labeled set"));
        }
        if problem.labeled.len() != problem.labels.len() {
            return Err(Error::LengthMismatch {
                what: "labels for the labeled set",
                expected: problem.labeled.len(),
                got: problem.labels.len(),
            });
        }
        let x_labeled = problem.features.select_rows(problem.labeled)?;
        let shared = matches!(
            problem.acquisition,
            AcquisitionKind::Entropy | AcquisitionKind::LeastConfidence
        );
        let mut records = Vec::new();
        let mut union: BTreeMap<usize, usize> = BTreeMap::new();
        if with_dependency {
            for rec in problem.ledger.dependency_records() {
                let full_pool = config.include_z || rec.strategy == Strategy::Ssrs;
                if full_pool && rec.pool_snapshot.is_empty() {
                    return Err(Error::MissingSnapshot { cycle: rec.cycle });
                }
                let ids = if full_pool {
                    rec.pool_snapshot.clone()
                } else {
                    rec.ordered_selected.clone()
                };
                let selected = sequence_positions(&ids, &rec.ordered_selected)?;
                let mut plan = RecordPlan {
                    strategy: rec.strategy,
                    beta: rec.beta,
                    ids,
                    selected,
                    shared_rows: None,
                    features: None,
                    centers: None,
                    masks: None,
                };
                if shared {
                    plan.ids.iter().for_each(|&i| {
                        union.entry(i).or_insert(0);
                    });
                } else {
                    plan.features = Some(problem.features.select_rows(&plan.ids)?);
                }
                match problem.acquisition {
                    AcquisitionKind::Bald { samples } => {
                        plan.masks = Some(masks_per_sample(
                            params,
                            &plan.ids,
                            samples,
                            &problem.streams,
                            Purpose::Dropout,
                            rec.cycle,
                        )?);
                    }
                    AcquisitionKind::Coreset => {
                        if rec.labeled_snapshot.is_empty() {
                            return Err(Error::MissingSnapshot { cycle: rec.cycle });
                        }
                        plan.centers = Some(problem.features.select_rows(&rec.labeled_snapshot)?);
                    }
                    _ => {}
                }
                records.push(plan);
            }
        }
        let shared_features = if shared && !union.is_empty() {
            let ids: Vec<usize> = union.keys().copied().collect();
            for (pos, v) in union.values_mut().enumerate() {
                *v = pos;
            }
            for plan in &mut records {
                plan.shared_rows = Some(plan.ids.iter().map(|i| union[i]).collect());
            }
            Some(problem.features.select_rows(&ids)?)
        } else {
            None
        };
        Ok(Self {
            x_labeled,
            labels: problem.labels.to_vec(),
            acquisition: problem.acquisition,
            include_z: config.include_z,
            rank_mode: config.rank_mode,
            shared_features,
            records,
        })
    }

    fn build(
        &self,
        g: &mut Graph,
        params: &MlpParams,
        nodes: &ParamNodes,
        estimator: EstimatorKind,
        train_masks: Option<&HiddenMasks>,
    ) -> Result<LossNodes> {
        let x = g.constant(self.x_labeled.clone())?;
        let logits = logits_node(g, params, nodes, x, train_masks)?;
        let nll = g.softmax_cross_entropy(logits, &self.labels)?;
        if self.records.is_empty() {
            return Ok(LossNodes {
                total: nll,
                nll,
                dependency: None,
                per_record: Vec::new(),
                log_z: Vec::new(),
            });
        }
        let shared_scores = match &self.shared_features {
            Some(f) => {
                let xs = g.constant(f.clone())?;
                Some(score_node(
                    g,
                    self.acquisition,
                    params,
                    nodes,
                    xs,
                    NodeContext::default(),
                )?)
            }
            None => None,
        };
        let mut terms = Vec::new();
        let mut log_z = Vec::new();
        for plan in &self.records {
            let scores = match (&plan.shared_rows, shared_scores) {
                (Some(rows), Some(all)) => g.index_rows(all, rows)?,
                _ => {
                    let xs = g.constant(plan.features.clone().expect("per-record features"))?;
                    let centers = match &plan.centers {
                        Some(c) => {
                            let xc = g.constant(c.clone())?;
                            Some(embed_node(g, params, nodes, xc)?)
                        }
                        None => None,
                    };
                    let ctx = NodeContext {
                        centers,
                        masks: plan.masks.as_deref(),
                    };
                    score_node(g, self.acquisition, params, nodes, xs, ctx)?
                }
            };
            let u = utility_node(g, plan.strategy, plan.beta, self.rank_mode, scores)?;
            let picked = g.index_rows(u, &plan.selected)?;
            terms.push(g.sum(picked)?);
            if self.include_z {
                let mut remaining: Vec<usize> = (0..plan.ids.len()).collect();
                let mut parts = Vec::with_capacity(plan.selected.len());
                for &p in &plan.selected {
                    parts.push(lse_node(g, u, &remaining)?);
                    remaining.retain(|&r| r != p);
                }
                log_z.push(sum_nodes(g, &parts)?);
            }
        }
        let mut dependency = sum_nodes(g, &terms)?;
        if self.include_z {
            let z = sum_nodes(g, &log_z)?;
            dependency = g.sub(dependency, z)?;
        }
        let total = match estimator {
            EstimatorKind::Imle => nll,
            EstimatorKind::Dmle => g.sub(nll, dependency)?,
        };
        Ok(LossNodes {
            total,
            nll,
            dependency: Some(dependency),
            per_record: terms,
            log_z,
        })
    }
}

fn sum_nodes(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// `ln Σ exp(u[r])` over the given rows, shifted by their (constant) max.
pub(crate) fn lse_node(g: &mut Graph, u: NodeId, rows: &[usize]) -> Result<NodeId> {
    let sub = g.index_rows(u, rows)?;
    let shift = g
        .value(sub)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let centered = g.add_scalar(sub, -shift)?;
    let e = g.exp(centered)?;
    let s = g.sum(e)?;
    let l = g.log(s)?;
    Ok(g.add_scalar(l, shift)?)
}

/// Utility column `ũ` for a score column under the record's strategy.
fn utility_node(
    g: &mut Graph,
    strategy: Strategy,
    beta: f64,
    rank_mode: RankMode,
    scores: NodeId,
) -> Result<NodeId> {
    match strategy {
        Strategy::TopK | Strategy::Ssms => Ok(g.scale(scores, beta)?),
        Strategy::Sps => {
            if let Some((i, &a)) = g
                .value(scores)
                .data()
                .iter()
                .enumerate()
                .find(|(_, &a)| a < -1e-9)
            {
                return Err(Error::NegativeScore { index: i, score: a });
            }
            let floored = g.clamp_min(scores, SelectionConfig::DEFAULT_SCORE_FLOOR)?;
            let l = g.log(floored)?;
            Ok(g.scale(l, beta)?)
        }
        Strategy::Ssrs => match rank_mode {
            RankMode::Hard => {
                let ranks = rank_descending(g.value(scores).data())?;
                let u = ranks
                    .ranks
                    .iter()
                    .map(|&r| -beta * (r as f64).ln())
                    .collect();
                Ok(g.constant(Tensor::column(u)?)?)
            }
            RankMode::Smooth { temperature } => {
                let diffs = g.pairwise_diff(scores, scores)?;
                let scaled = g.scale(diffs, 1.0 / temperature)?;
                let sig = g.sigmoid(scaled)?;
                let summed = g.sum_rows(sig)?;
                // the diagonal contributes sigmoid(0) = 1/2
                let r = g.add_scalar(summed, 0.5)?;
                let l = g.log(r)?;
                Ok(g.scale(l, -beta)?)
            }
        },
    }
}

fn evaluate(
    params: &MlpParams,
    problem: &Problem<'_>,
    config: &EstimatorConfig,
    with_dependency: bool,
) -> Result<(Graph, LossNodes)> {
    let plan = LossPlan::new(params, problem, config, with_dependency)?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, true)?;
    let loss = plan.build(&mut g, params, &nodes, config.estimator, None)?;
    Ok((g, loss))
}

/// Summed negative log-likelihood of `labels` given the rows of `x`.
pub fn imle_loss(params: &MlpParams, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    if x.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: x.rows(),
            got: labels.len(),
        });
    }
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false)?;
    let xn = g.constant(x.clone())?;
    let z = logits_node(&mut g, params, &nodes, xn, None)?;
    let nll = g.softmax_cross_entropy(z, labels)?;
    Ok(g.value(nll).item())
}

/// The dependency term under the current parameters.
pub fn dependency_term(
    params: &MlpParams,
    problem: &Problem<'_>,
    config: &EstimatorConfig,
) -> Result<DependencyTermResult> {
    let plan = LossPlan::new(params, problem, config, true)?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false)?;
    let loss = plan.build(&mut g, params, &nodes, EstimatorKind::Dmle, None)?;
    let Some(dep) = loss.dependency else {
        return Ok(DependencyTermResult {
            total: 0.0,
            per_cycle_logprob: Vec::new(),
            per_cycle_log_z: config.include_z.then(Vec::new),
        });
    };
    let total = g.value(dep).item();
    let log_z: Vec<f64> = loss.log_z.iter().map(|&n| g.value(n).item()).collect();
    Ok(DependencyTermResult {
        total,
        per_cycle_logprob: loss.per_record.iter().map(|&n| g.value(n).item()).collect(),
        per_cycle_log_z: config.include_z.then_some(log_z),
    })
}

/// IMLE or DMLE loss value, per `config.estimator`.
pub fn loss_value(
    params: &MlpParams,
    problem: &Problem<'_>,
    config: &EstimatorConfig,
) -> Result<f64> {
    let (g, loss) = evaluate(
        params,
        problem,
        config,
        config.estimator == EstimatorKind::Dmle,
    )?;
    Ok(g.value(loss.total).item())
}

/// `nll - dependency`.
pub fn dmle_loss(
    params: &MlpParams,
    problem: &Problem<'_>,
    config: &EstimatorConfig,
) -> Result<f64> {
    let config = EstimatorConfig {
        estimator: EstimatorKind::Dmle,
        ..*config
    };
    loss_value(params, problem, &config)
}

/// Loss value and gradient with respect to every parameter.
pub fn loss_gradients(
    params: &MlpParams,
    problem: &Problem<'_>,
    config: &EstimatorConfig,
) -> Result<(f64, NamedTensors)> {
    let (g, loss) = evaluate(
        params,
        problem,
        config,
        config.estimator == EstimatorKind::Dmle,
    )?;
    let grads = g.backward(loss.total)?;
    Ok((g.value(loss.total).item(), grads))
}

/// Worst relative error between analytic and central-difference gradients
/// of the configured loss.
pub fn loss_grad_check(
    params: &MlpParams,
    problem: &Problem<'_>,
    config: &EstimatorConfig,
    h: f64,
) -> Result<f64> {
    let plan = LossPlan::new(
        params,
        problem,
        config,
        config.estimator == EstimatorKind::Dmle,
    )?;
    let layers = params.weights().len();
    grad_check(&Inputs::from_params(&params.named()), h, |g| {
        let nodes = ParamNodes::from_inputs(g, layers)?;
        Ok::<_, Error>(plan.build(g, params, &nodes, config.estimator, None)?.total)
    })
}

/// Cumulative `Σ_{τ ≤ t} ln Z_τ` after each dependency record, under the
/// current parameters.
pub fn log_z_trace(
    params: &MlpParams,
    problem: &Problem<'_>,
    config: &EstimatorConfig,
) -> Result<Vec<f64>> {
    let config = EstimatorConfig {
        include_z: true,
        ..*config
    };
    let dep = dependency_term(params, problem, &config)?;
    let mut acc = 0.0;
    Ok(dep
        .per_cycle_log_z
        .unwrap_or_default()
        .into_iter()
        .map(|z| {
            acc += z;
            acc
        })
        .collect())
}

/// Runs `epochs_per_cycle` full-batch Adam steps on the configured loss.
pub fn train_cycle(
    params: &mut MlpParams,
    adam: &mut AdamState,
    problem: &Problem<'_>,
    config: &EstimatorConfig,
    cycle: usize,
) -> Result<TrainLog> {
    if !config.warm_start {
        *params = MlpParams::init(
            params.layer_dims(),
            params.activation(),
            params.dropout_rate(),
            &mut problem.streams.stream(Purpose::Init, 0),
        )?;
        *adam = AdamState::new(params, config.adam);
    }
    let dmle = config.estimator == EstimatorKind::Dmle;
    let plan = LossPlan::new(params, problem, config, dmle)?;
    let mut epochs = Vec::with_capacity(config.epochs_per_cycle);
    for epoch in 0..config.epochs_per_cycle {
        let masks = if params.dropout_rate() > 0.0 {
            let mut rng = problem.streams.lane(Purpose::TrainDropout, cycle, epoch);
            Some(draw_masks(params, problem.labeled.len(), &mut rng)?)
        } else {
            None
        };
        let mut g = Graph::new();
        let nodes = params.bind(&mut g, true)?;
        let loss = plan
            .build(&mut g, params, &nodes, config.estimator, masks.as_ref())
            .map_err(|e| non_finite(e, cycle, epoch))?;
        let log = epoch_log(&g, &loss, epoch);
        let grads = g.backward(loss.total)?;
        if grads.values().any(|t| !t.all_finite()) {
            return Err(Error::NonFiniteLoss {
                cycle,
                epoch,
                nll: log.nll,
                dependency: log.dependency,
            });
        }
        adam_step(params, &grads, adam)?;
        epochs.push(log);
    }
    let eval_plan = LossPlan::new(params, problem, config, true)?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false)?;
    let loss = eval_plan
        .build(&mut g, params, &nodes, config.estimator, None)
        .map_err(|e| non_finite(e, cycle, config.epochs_per_cycle))?;
    let last = epoch_log(&g, &loss, config.epochs_per_cycle);
    Ok(TrainLog {
        nll: last.nll,
        dependency: last.dependency,
        sum_log_z: last.sum_log_z,
        epochs,
    })
}

fn epoch_log(g: &Graph, loss: &LossNodes, epoch: usize) -> EpochLog {
    let nll = g.value(loss.nll).item();
    let dependency = loss.dependency.map_or(0.0, |d| g.value(d).item());
    let sum_log_z =
        (!loss.log_z.is_empty()).then(|| loss.log_z.iter().map(|&n| g.value(n).item()).sum());
    EpochLog {
        epoch,
        nll,
        dependency,
        total: g.value(loss.total).item(),
        sum_log_z,
    }
}

fn non_finite(e: Error, cycle: usize, epoch: usize) -> Error {
    match e {
        Error::Diff(DiffError::NonFinite { .. }) => Error::NonFiniteLoss {
            cycle,
            epoch,
            nll: f64::NAN,
            dependency: f64::NAN,
        },
        other => other,
    }
}
