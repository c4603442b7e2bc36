//! Property suites behind the `verify` command.
//!
//! Each check compares a measured quantity against a fixed bound. All
//! randomness comes from fixed seeds, so a report renders to the same bytes
//! on every run.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::Rng;
use serde::Serialize;

use crate::acquisition::AcquisitionKind;
use crate::analysis::{fisher_gap_check, kl_decomposition_check, FisherSetup};
use crate::engine::score_candidates;
use crate::error::{Error, Result};
use crate::estimation::{
    loss_grad_check, loss_gradients, DependencyLedger, EstimatorConfig, EstimatorKind, Problem,
};
use crate::model::{Activation, MlpParams};
use crate::rng::{Purpose, RngStreams};
use crate::selection::{
    select, select_positions, sequence_log_prob, SelectionConfig, SelectionRecord, Strategy,
};
use crate::tensor::Tensor;
use crate::ScoreVector;

pub const STOCHASTIC: [Strategy; 3] = [Strategy::Ssms, Strategy::Sps, Strategy::Ssrs];
pub const ALL_STRATEGIES: [Strategy; 4] = [
    Strategy::TopK,
    Strategy::Ssms,
    Strategy::Sps,
    Strategy::Ssrs,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gumbel,
    Gradients,
    Theorems,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gumbel" => Suite::Gumbel,
            "gradients" => Suite::Gradients,
            "theorems" => Suite::Theorems,
            "all" => Suite::All,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown suite `{s}` (expected gumbel, gradients, theorems or all)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gumbel => "gumbel",
            Suite::Gradients => "gradients",
            Suite::Theorems => "theorems",
            Suite::All => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Below,
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub threshold: f64,
}

impl Check {
    pub fn below(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: Bound::Below,
            threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: Bound::AtLeast,
            threshold,
        }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::Below => self.measured < self.threshold,
            Bound::AtLeast => self.measured >= self.threshold,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::Below => "<",
            Bound::AtLeast => ">=",
        };
        write!(
            f,
            "{} {:<40} {:>13.6e} ({op} {:e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!("verify {}\n", self.suite.name());
        for c in &self.checks {
            let _ = writeln!(out, "{c}");
        }
        let failed = self.checks.iter().filter(|c| !c.passed()).count();
        let _ = writeln!(out, "{} checks, {failed} failed", self.checks.len());
        out
    }
}

pub fn run_suite(suite: Suite) -> Result<Report> {
    let checks = match suite {
        Suite::Gumbel => gumbel_checks()?,
        Suite::Gradients => gradient_checks()?,
        Suite::Theorems => theorem_checks()?,
        Suite::All => {
            let mut all = gumbel_checks()?;
            all.extend(gradient_checks()?);
            all.extend(theorem_checks()?);
            all
        }
    };
    Ok(Report { suite, checks })
}

/// Pool of four scores used by the sampling checks.
pub const SAMPLING_SCORES: [f64; 4] = [0.1, 0.4, 0.7, 1.0];

fn gumbel_checks() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (lane, s) in STOCHASTIC.into_iter().enumerate() {
        let tv = gumbel_tv(s, &SAMPLING_SCORES, 1.0, 2, 200_000, lane as u64)?;
        checks.push(Check::below(format!("gumbel/tv[{}]", s.name()), tv, 0.01));
    }
    for s in STOCHASTIC {
        let err = normalization_error(s, &[0.05, 0.3, 0.3, 0.8, 1.6], 1.0, 2)?;
        checks.push(Check::below(
            format!("gumbel/normalization[{}]", s.name()),
            err,
            1e-10,
        ));
    }
    Ok(checks)
}

fn gradient_checks() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for s in ALL_STRATEGIES {
        let worst = ACQUISITIONS
            .iter()
            .map(|&a| beta_zero_gap(s, a, 11))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        checks.push(Check::below(
            format!("gradients/beta0-vs-imle[{}]", s.name()),
            worst,
            1e-10,
        ));
    }
    for s in [Strategy::Ssms, Strategy::Sps] {
        let worst = (0..20)
            .map(|trial| dmle_grad_error(s, trial))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        checks.push(Check::below(
            format!("gradients/grad-check[{}]", s.name()),
            worst,
            1e-4,
        ));
    }
    Ok(checks)
}

fn theorem_checks() -> Result<Vec<Check>> {
    let r = fisher_gap_check(&FisherSetup::logistic_toy(0, 100_000))?;
    let asym = [&r.i_y, &r.i_x, &r.i_dmle]
        .iter()
        .map(|m| (*m - m.transpose()).abs().max())
        .fold(0.0, f64::max);
    Ok(vec![
        Check::at_least("theorems/fisher-min-eig[I_x]", r.min_eig_i_x, -1e-8),
        Check::at_least("theorems/fisher-min-eig[I_dmle-I_y]", r.min_eig_gap, -1e-8),
        Check::below("theorems/fisher-asymmetry", asym, 1e-10),
        Check::below("theorems/kl-residual", kl_max_residual(100, 0)?, 1e-10),
    ])
}

/// Total-variation distance between the empirical frequencies of ordered
/// `k`-sequences drawn by Gumbel top-k and their exact probabilities.
pub fn gumbel_tv(
    strategy: Strategy,
    scores: &[f64],
    beta: f64,
    k: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let config = SelectionConfig::new(strategy, k, beta)?;
    let mut rng = RngStreams::new(seed).stream(Purpose::Verification, 100);
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts
            .entry(select_positions(&config, scores, &mut rng)?)
            .or_default() += 1;
    }
    let sv = ScoreVector::from_scores(scores.to_vec());
    let mut tv = 0.0;
    for seq in ordered_sequences(scores.len(), k) {
        let exact = sequence_log_prob(strategy, beta, config.score_floor, &sv, &seq)?.exp();
        let empirical = counts.get(&seq).copied().unwrap_or(0) as f64 / draws as f64;
        tv += (exact - empirical).abs();
    }
    Ok(0.5 * tv)
}

/// `|Σ exp(log P(seq)) - 1|` over all ordered `k`-sequences of the pool.
pub fn normalization_error(strategy: Strategy, scores: &[f64], beta: f64, k: usize) -> Result<f64> {
    let sv = ScoreVector::from_scores(scores.to_vec());
    let mut total = 0.0;
    for seq in ordered_sequences(scores.len(), k) {
        total += sequence_log_prob(
            strategy,
            beta,
            SelectionConfig::DEFAULT_SCORE_FLOOR,
            &sv,
            &seq,
        )?
        .exp();
    }
    Ok((total - 1.0).abs())
}

/// All ordered sequences of `k` distinct positions out of `n`.
pub fn ordered_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|s: Vec<usize>| {
                let free: Vec<usize> = (0..n).filter(|i| !s.contains(i)).collect();
                free.into_iter().map(move |i| {
                    let mut t = s.clone();
                    t.push(i);
                    t
                })
            })
            .collect();
    }
    out
}

pub const ACQUISITIONS: [AcquisitionKind; 4] = [
    AcquisitionKind::Entropy,
    AcquisitionKind::Bald { samples: 4 },
    AcquisitionKind::LeastConfidence,
    AcquisitionKind::Coreset,
];

/// A 2-8-3 MLP over twelve random points with a seed pick followed by three
/// real selection cycles of two samples each.
///
/// Records carry `beta`, which the dependency term reads. Batches are drawn
/// at `β = 1` when `beta` is zero, since selection itself needs `β > 0`.
pub struct ToyProblem {
    pub params: MlpParams,
    pub features: Tensor,
    pub labeled: Vec<usize>,
    pub labels: Vec<usize>,
    pub ledger: DependencyLedger,
    pub acquisition: AcquisitionKind,
    pub streams: RngStreams,
}

impl ToyProblem {
    pub fn new(
        seed: u64,
        acquisition: AcquisitionKind,
        strategy: Strategy,
        beta: f64,
    ) -> Result<Self> {
        let streams = RngStreams::new(seed);
        let dropout = if acquisition.uses_dropout() {
            0.25
        } else {
            0.0
        };
        let params = MlpParams::init(
            &[2, 8, 3],
            Activation::Tanh,
            dropout,
            &mut streams.stream(Purpose::Init, 0),
        )?;
        let mut rng = streams.stream(Purpose::Verification, 0);
        let features = Tensor::matrix(
            12,
            2,
            (0..24).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )?;
        let labels_all: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
        let mut ledger = DependencyLedger::new();
        let first = rng.random_range(0..12);
        ledger.push(SelectionRecord {
            cycle: 0,
            ordered_selected: vec![first],
            pool_snapshot: Vec::new(),
            labeled_snapshot: Vec::new(),
            strategy,
            beta,
            random_seed_event: true,
        })?;
        let mut labeled = vec![first];
        let config = SelectionConfig::new(strategy, 2, if beta > 0.0 { beta } else { 1.0 })?;
        for cycle in 1..=3 {
            let pool: Vec<usize> = (0..12).filter(|i| !labeled.contains(i)).collect();
            let scores = score_candidates(
                acquisition,
                &params,
                &features,
                &pool,
                &labeled,
                &streams,
                cycle,
            )?;
            let mut record = select(
                &config,
                &scores,
                &mut streams.stream(Purpose::Gumbel, cycle),
            )?
            .with_context(cycle, labeled.clone());
            record.beta = beta;
            labeled.extend(&record.ordered_selected);
            ledger.push(record)?;
        }
        let labels = labeled.iter().map(|&i| labels_all[i]).collect();
        Ok(Self {
            params,
            features,
            labeled,
            labels,
            ledger,
            acquisition,
            streams,
        })
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem {
            features: &self.features,
            labeled: &self.labeled,
            labels: &self.labels,
            ledger: &self.ledger,
            acquisition: self.acquisition,
            streams: self.streams,
        }
    }
}

/// Largest absolute gradient difference between DMLE at `β = 0` and IMLE.
pub fn beta_zero_gap(strategy: Strategy, acquisition: AcquisitionKind, seed: u64) -> Result<f64> {
    let toy = ToyProblem::new(seed, acquisition, strategy, 0.0)?;
    let p = toy.problem();
    let (_, imle) = loss_gradients(
        &toy.params,
        &p,
        &EstimatorConfig::with_estimator(EstimatorKind::Imle),
    )?;
    let (_, dmle) = loss_gradients(
        &toy.params,
        &p,
        &EstimatorConfig::with_estimator(EstimatorKind::Dmle),
    )?;
    Ok(imle
        .iter()
        .map(|(name, t)| t.max_abs_diff(&dmle[name]))
        .fold(0.0, f64::max))
}

/// Relative error of the DMLE gradient against central differences
/// (`h = 1e-5`) on a freshly drawn toy problem with entropy scores.
pub fn dmle_grad_error(strategy: Strategy, trial: u64) -> Result<f64> {
    let toy = ToyProblem::new(1000 + trial, AcquisitionKind::Entropy, strategy, 1.0)?;
    loss_grad_check(
        &toy.params,
        &toy.problem(),
        &EstimatorConfig::with_estimator(EstimatorKind::Dmle),
        1e-5,
    )
}

/// Largest KL-identity residual over random strictly positive models on a
/// 4 × 3 outcome space.
pub fn kl_max_residual(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStreams::new(seed).stream(Purpose::Verification, 200);
    let mut draw = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let joint: Vec<Vec<f64>> = draw(12).chunks(3).map(<[f64]>::to_vec).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let conditional: Vec<Vec<f64>> = (0..4).map(|_| draw(3)).collect();
        let marginal = draw(4);
        let r = kl_decomposition_check(&joint, &conditional, &marginal)?;
        worst = worst.max(r.residual.abs());
    }
    Ok(worst)
}
