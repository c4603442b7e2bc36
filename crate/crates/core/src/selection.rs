//! Batch selection: deterministic Top-k and Gumbel-perturbed stochastic
//! strategies, ranks, and exact ordered-sequence log-probabilities.
//!
//! Each stochastic strategy maps a score `a` to a utility `ũ` and draws
//! without replacement with probability proportional to `exp(ũ)` among the
//! items still left. Gumbel-top-k realizes exactly that: add standard Gumbel
//! noise to every `ũ` and keep the `k` largest, in order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::ScoreVector;
use crate::diff::log_sum_exp;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Scores below this are treated as MC noise and floored rather than
/// rejected under the power strategy.
const NEGATIVE_SCORE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    TopK,
    /// Soft-max sampling, `ũ = β a`.
    Ssms,
    /// Power sampling, `ũ = β ln a`.
    Sps,
    /// Soft-rank sampling, `ũ = -β ln r`.
    Ssrs,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::TopK => "topk",
            Strategy::Ssms => "ssms",
            Strategy::Sps => "sps",
            Strategy::Ssrs => "ssrs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "topk" | "top-k" => Strategy::TopK,
            "ssms" => Strategy::Ssms,
            "sps" => Strategy::Sps,
            "ssrs" => Strategy::Ssrs,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown selection strategy `{other}`"
                )))
            }
        })
    }

    pub fn is_stochastic(self) -> bool {
        self != Strategy::TopK
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub beta: f64,
    pub score_floor: f64,
}

impl SelectionConfig {
    pub const DEFAULT_SCORE_FLOOR: f64 = 1e-12;

    pub fn new(strategy: Strategy, k: usize, beta: f64) -> Result<Self> {
        let config = Self {
            strategy,
            k,
            beta,
            score_floor: Self::DEFAULT_SCORE_FLOOR,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig(
                "batch size k must be at least 1".into(),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if self.score_floor.is_nan() || self.score_floor <= 0.0 {
            return Err(Error::InvalidConfig("score floor must be positive".into()));
        }
        Ok(())
    }
}

/// Descending ranks: 1 for the highest score, ties by ascending position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ranking {
    pub ranks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub cycle: usize,
    pub ordered_selected: Vec<usize>,
    pub pool_snapshot: Vec<usize>,
    pub labeled_snapshot: Vec<usize>,
    pub strategy: Strategy,
    pub beta: f64,
    pub random_seed_event: bool,
}

impl SelectionRecord {
    pub fn with_context(mut self, cycle: usize, labeled_snapshot: Vec<usize>) -> Self {
        self.cycle = cycle;
        self.labeled_snapshot = labeled_snapshot;
        self
    }
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NanScore { index: i });
    }
    if scores.iter().any(|s| s.is_infinite()) {
        return Err(Error::InvalidArgument(
            "acquisition scores must be finite".into(),
        ));
    }
    Ok(())
}

/// Positions sorted by descending score, ties by ascending position.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

pub fn rank_descending(scores: &[f64]) -> Result<Ranking> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    check_finite(scores)?;
    let mut ranks = vec![0; scores.len()];
    for (r, i) in descending_order(scores).into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    Ok(Ranking { ranks })
}

/// The utilities `ũ` whose soft-max defines the selection distribution.
/// Top-k uses the soft-max form.
pub fn utilities(
    strategy: Strategy,
    beta: f64,
    score_floor: f64,
    scores: &[f64],
) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    check_finite(scores)?;
    Ok(match strategy {
        Strategy::TopK | Strategy::Ssms => scores.iter().map(|a| beta * a).collect(),
        Strategy::Sps => {
            if let Some(i) = scores.iter().position(|&a| a < -NEGATIVE_SCORE_TOLERANCE) {
                return Err(Error::NegativeScore {
                    index: i,
                    score: scores[i],
                });
            }
            scores
                .iter()
                .map(|&a| beta * a.max(score_floor).ln())
                .collect()
        }
        Strategy::Ssrs => rank_descending(scores)?
            .ranks
            .into_iter()
            .map(|r| -beta * (r as f64).ln())
            .collect(),
    })
}

/// One draw from the standard Gumbel distribution.
pub fn gumbel(rng: &mut Stream) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Ordered positions (into `scores`) of the selected batch.
pub fn select_positions(
    config: &SelectionConfig,
    scores: &[f64],
    rng: &mut Stream,
) -> Result<Vec<usize>> {
    config.validate()?;
    if scores.is_empty() {
        return Err(Error::Empty("unlabeled pool"));
    }
    if config.k > scores.len() {
        return Err(Error::BatchTooLarge {
            k: config.k,
            pool: scores.len(),
        });
    }
    let mut keyed = utilities(config.strategy, config.beta, config.score_floor, scores)?;
    if config.strategy == Strategy::TopK {
        keyed = scores.to_vec();
    } else {
        keyed.iter_mut().for_each(|u| *u += gumbel(rng));
    }
    let mut order = descending_order(&keyed);
    order.truncate(config.k);
    Ok(order)
}

/// Selects a batch from the pool described by `scores`. The returned record
/// has `cycle = 0` and an empty labeled snapshot; callers fill those in.
pub fn select(
    config: &SelectionConfig,
    scores: &ScoreVector,
    rng: &mut Stream,
) -> Result<SelectionRecord> {
    let positions = select_positions(config, &scores.scores, rng)?;
    Ok(SelectionRecord {
        cycle: 0,
        ordered_selected: positions.into_iter().map(|p| scores.indices[p]).collect(),
        pool_snapshot: scores.indices.clone(),
        labeled_snapshot: Vec::new(),
        strategy: config.strategy,
        beta: config.beta,
        random_seed_event: false,
    })
}

/// Positions of `sequence` within `snapshot`, rejecting duplicates and
/// strangers.
pub fn sequence_positions(snapshot: &[usize], sequence: &[usize]) -> Result<Vec<usize>> {
    let mut seen = std::collections::BTreeSet::new();
    sequence
        .iter()
        .map(|&s| {
            if !seen.insert(s) {
                return Err(Error::DuplicateInSequence(s));
            }
            snapshot
                .iter()
                .position(|&i| i == s)
                .ok_or(Error::NotInSnapshot(s))
        })
        .collect()
}

/// Per-step `(ũ(x_i), ln Z_i)` for an ordered sequence, where `Z_i` sums
/// `exp(ũ)` over the snapshot minus the items chosen before step `i`.
pub fn sequence_terms(
    strategy: Strategy,
    beta: f64,
    score_floor: f64,
    scores: &ScoreVector,
    sequence: &[usize],
) -> Result<Vec<(f64, f64)>> {
    let positions = sequence_positions(&scores.indices, sequence)?;
    let u = utilities(strategy, beta, score_floor, &scores.scores)?;
    let mut remaining = vec![true; u.len()];
    let mut out = Vec::with_capacity(positions.len());
    for p in positions {
        let live: Vec<f64> = u
            .iter()
            .zip(&remaining)
            .filter(|(_, &r)| r)
            .map(|(&v, _)| v)
            .collect();
        out.push((u[p], log_sum_exp(&live)));
        remaining[p] = false;
    }
    Ok(out)
}

/// `ln P(sequence)` under the strategy's without-replacement distribution.
pub fn sequence_log_prob(
    strategy: Strategy,
    beta: f64,
    score_floor: f64,
    scores: &ScoreVector,
    sequence: &[usize],
) -> Result<f64> {
    Ok(
        sequence_terms(strategy, beta, score_floor, scores, sequence)?
            .into_iter()
            .map(|(u, lz)| u - lz)
            .sum(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, RngStreams};
    use std::collections::BTreeMap;

    const FLOOR: f64 = SelectionConfig::DEFAULT_SCORE_FLOOR;

    fn rng(seed: u64) -> Stream {
        RngStreams::new(seed).stream(Purpose::Gumbel, 1)
    }

    fn frequencies(
        config: SelectionConfig,
        scores: &[f64],
        draws: usize,
        seed: u64,
    ) -> BTreeMap<Vec<usize>, f64> {
        let mut r = rng(seed);
        let mut counts = BTreeMap::new();
        for _ in 0..draws {
            *counts
                .entry(select_positions(&config, scores, &mut r).unwrap())
                .or_insert(0usize) += 1;
        }
        counts
            .into_iter()
            .map(|(k, c)| (k, c as f64 / draws as f64))
            .collect()
    }

    fn ordered_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for prefix in ordered_sequences(n, k - 1) {
            for i in 0..n {
                if !prefix.contains(&i) {
                    let mut s = prefix.clone();
                    s.push(i);
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            rank_descending(&[0.3, 0.9, 0.1]).unwrap().ranks,
            vec![2, 1, 3]
        );
        assert_eq!(rank_descending(&[0.5, 0.5]).unwrap().ranks, vec![1, 2]);
        assert_eq!(
            rank_descending(&[1.0, 2.0, 3.0, 4.0]).unwrap().ranks,
            vec![4, 3, 2, 1]
        );
        assert!(matches!(
            rank_descending(&[1.0, f64::NAN]),
            Err(Error::NanScore { index: 1 })
        ));
    }

    #[test]
    fn topk_takes_highest_in_order() {
        let c = SelectionConfig::new(Strategy::TopK, 2, 1.0).unwrap();
        assert_eq!(
            select_positions(&c, &[1.0, 3.0, 2.0], &mut rng(0)).unwrap(),
            vec![1, 2]
        );
        let c3 = SelectionConfig::new(Strategy::TopK, 3, 1.0).unwrap();
        assert!(matches!(
            select_positions(
                &SelectionConfig { k: 4, ..c3 },
                &[1.0, 3.0, 2.0],
                &mut rng(0)
            ),
            Err(Error::BatchTooLarge { k: 4, pool: 3 })
        ));
    }

    #[test]
    fn sps_rejects_negative_scores() {
        let c = SelectionConfig::new(Strategy::Sps, 1, 1.0).unwrap();
        assert!(matches!(
            select_positions(&c, &[0.5, -0.2], &mut rng(0)),
            Err(Error::NegativeScore { index: 1, .. })
        ));
    }

    #[test]
    fn select_maps_positions_to_sample_ids() {
        let c = SelectionConfig::new(Strategy::TopK, 2, 1.0).unwrap();
        let s = ScoreVector::new(
            vec![10, 20, 30],
            vec![0.1, 0.5, 0.3],
            crate::AcquisitionKind::Entropy,
            0,
        )
        .unwrap();
        let rec = select(&c, &s, &mut rng(0)).unwrap();
        assert_eq!(rec.ordered_selected, vec![20, 30]);
        assert_eq!(rec.pool_snapshot, vec![10, 20, 30]);
    }

    #[test]
    fn equal_scores_draw_every_ordered_pair_evenly() {
        let c = SelectionConfig::new(Strategy::Ssms, 2, 1.0).unwrap();
        let f = frequencies(c, &[0.0, 0.0, 0.0], 200_000, 1);
        assert_eq!(f.len(), 6);
        for v in f.values() {
            assert!((v - 1.0 / 6.0).abs() < 0.01, "{f:?}");
        }
    }

    #[test]
    fn ssms_single_pick_is_logistic() {
        let c = SelectionConfig::new(Strategy::Ssms, 1, 1.0).unwrap();
        let f = frequencies(c, &[1.0, 2.0], 200_000, 2);
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((oracle - 0.731059).abs() < 1e-6);
        assert!((f[&vec![1]] - oracle).abs() < 0.005);
    }

    #[test]
    fn sps_single_pick_is_proportional() {
        let c = SelectionConfig::new(Strategy::Sps, 1, 1.0).unwrap();
        let f = frequencies(c, &[1.0, 2.0, 3.0], 200_000, 3);
        assert!((f[&vec![2]] - 0.5).abs() < 0.005);
    }

    #[test]
    fn log_prob_examples() {
        let eq = ScoreVector::from_scores(vec![0.4; 3]);
        let lp = sequence_log_prob(Strategy::Ssms, 1.0, FLOOR, &eq, &[2, 0]).unwrap();
        assert!((lp + 6f64.ln()).abs() < 1e-12);
        let two = ScoreVector::from_scores(vec![1.0, 2.0]);
        let lp = sequence_log_prob(Strategy::Ssms, 1.0, FLOOR, &two, &[1]).unwrap();
        let oracle = (1.0 / (1.0 + (-1.0f64).exp())).ln();
        assert!((lp - oracle).abs() < 1e-12);
        assert!((lp + 0.313262).abs() < 1e-6);
        let three = ScoreVector::from_scores(vec![1.0, 2.0, 3.0]);
        let lp = sequence_log_prob(Strategy::Sps, 1.0, FLOOR, &three, &[2, 0]).unwrap();
        assert!((lp - (3.0f64 / 6.0 * 1.0 / 3.0).ln()).abs() < 1e-12);
        assert!((lp + 1.791759).abs() < 1e-6);
    }

    #[test]
    fn log_prob_rejects_bad_sequences() {
        let s = ScoreVector::from_scores(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            sequence_log_prob(Strategy::Ssms, 1.0, FLOOR, &s, &[1, 1]),
            Err(Error::DuplicateInSequence(1))
        ));
        assert!(matches!(
            sequence_log_prob(Strategy::Ssms, 1.0, FLOOR, &s, &[7]),
            Err(Error::NotInSnapshot(7))
        ));
    }

    #[test]
    fn sequence_probabilities_sum_to_one() {
        let s = ScoreVector::from_scores(vec![0.2, 1.7, 0.0, 0.9]);
        for strategy in [Strategy::Ssms, Strategy::Sps, Strategy::Ssrs] {
            for k in 1..=3 {
                let total: f64 = ordered_sequences(4, k)
                    .iter()
                    .map(|q| {
                        sequence_log_prob(strategy, 1.3, FLOOR, &s, q)
                            .unwrap()
                            .exp()
                    })
                    .sum();
                assert!((total - 1.0).abs() < 1e-10, "{strategy:?} k={k}: {total}");
            }
        }
    }

    #[test]
    fn empirical_sequences_match_exact_probabilities() {
        let scores = [0.3, 1.1, 0.7, 0.05];
        let sv = ScoreVector::from_scores(scores.to_vec());
        for (seed, strategy) in [Strategy::Ssms, Strategy::Sps, Strategy::Ssrs]
            .into_iter()
            .enumerate()
        {
            let c = SelectionConfig::new(strategy, 2, 1.5).unwrap();
            let f = frequencies(c, &scores, 200_000, 40 + seed as u64);
            let tv: f64 = ordered_sequences(4, 2)
                .iter()
                .map(|q| {
                    let exact = sequence_log_prob(strategy, 1.5, FLOOR, &sv, q)
                        .unwrap()
                        .exp();
                    (f.get(q).copied().unwrap_or(0.0) - exact).abs()
                })
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.01, "{strategy:?}: tv = {tv}");
        }
    }

    #[test]
    fn cold_sampling_recovers_topk() {
        let scores = [0.1, 0.9, 0.5, 0.3, 0.7];
        for strategy in [Strategy::Ssms, Strategy::Sps, Strategy::Ssrs] {
            let c = SelectionConfig::new(strategy, 2, 50.0).unwrap();
            let mut r = rng(9);
            let hits = (0..20_000)
                .filter(|_| {
                    let mut s = select_positions(&c, &scores, &mut r).unwrap();
                    s.sort();
                    s == [1, 4]
                })
                .count();
            assert!(hits as f64 / 20_000.0 > 0.999, "{strategy:?}: {hits}");
        }
    }

    #[test]
    fn gumbel_moments() {
        let mut r = rng(5);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| gumbel(&mut r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        // Euler-Mascheroni constant and pi^2 / 6
        assert!((mean - 0.5772156649).abs() < 0.01);
        assert!((var - std::f64::consts::PI.powi(2) / 6.0).abs() < 0.03);
    }
}
