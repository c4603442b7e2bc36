//! Acquisition scores: entropy, BALD, least confidence and core-set distance.
//!
//! Every score is built from the same graph operations in both modes. Plain
//! scoring evaluates the graph with the parameters bound as constants;
//! differentiable scoring binds them as named leaves so the dependency term
//! can push gradients back into θ. The two paths therefore agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{draw_masks, embed_node, logits_node, HiddenMasks, MlpParams, ParamNodes};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "tag")]
pub enum AcquisitionKind {
    Entropy,
    Bald { samples: usize },
    LeastConfidence,
    Coreset,
}

impl AcquisitionKind {
    pub const DEFAULT_BALD_SAMPLES: usize = 10;

    pub fn name(self) -> &'static str {
        match self {
            AcquisitionKind::Entropy => "entropy",
            AcquisitionKind::Bald { .. } => "bald",
            AcquisitionKind::LeastConfidence => "least_confidence",
            AcquisitionKind::Coreset => "coreset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "entropy" => AcquisitionKind::Entropy,
            "bald" => AcquisitionKind::Bald {
                samples: Self::DEFAULT_BALD_SAMPLES,
            },
            "least_confidence" | "least-confidence" | "lc" => AcquisitionKind::LeastConfidence,
            "coreset" => AcquisitionKind::Coreset,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown acquisition `{other}`"
                )))
            }
        })
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, AcquisitionKind::Bald { .. })
    }
}

/// Embeddings of the current core-set centers under the current θ.
#[derive(Clone, Debug, PartialEq)]
pub struct CoresetContext {
    pub center_embeddings: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub kind: AcquisitionKind,
    pub theta_version: u64,
}

impl ScoreVector {
    pub fn new(
        indices: Vec<usize>,
        scores: Vec<f64>,
        kind: AcquisitionKind,
        theta_version: u64,
    ) -> Result<Self> {
        if indices.len() != scores.len() {
            return Err(Error::LengthMismatch {
                what: "score vector",
                expected: indices.len(),
                got: scores.len(),
            });
        }
        Ok(Self {
            indices,
            scores,
            kind,
            theta_version,
        })
    }

    /// Bare scores over positions `0..n`, for use outside the engine.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        Self {
            indices: (0..scores.len()).collect(),
            scores,
            kind: AcquisitionKind::Entropy,
            theta_version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score_of(&self, index: usize) -> Option<f64> {
        self.indices
            .iter()
            .position(|&i| i == index)
            .map(|p| self.scores[p])
    }
}

/// Extra inputs some kinds need inside a graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct NodeContext<'a> {
    /// `[c, h]` center embeddings, for core-set.
    pub centers: Option<NodeId>,
    /// Dropout masks, one set per MC pass, for BALD.
    pub masks: Option<&'a [HiddenMasks]>,
}

/// `[n, 1]` score node for the rows of `x`.
pub fn score_node(
    g: &mut Graph,
    kind: AcquisitionKind,
    params: &MlpParams,
    nodes: &ParamNodes,
    x: NodeId,
    ctx: NodeContext<'_>,
) -> Result<NodeId> {
    match kind {
        AcquisitionKind::Entropy => {
            let z = logits_node(g, params, nodes, x, None)?;
            let p = g.softmax(z)?;
            Ok(g.entropy_rows(p)?)
        }
        AcquisitionKind::LeastConfidence => {
            let z = logits_node(g, params, nodes, x, None)?;
            let p = g.softmax(z)?;
            let top = g.max_rows(p)?;
            let neg = g.scale(top, -1.0)?;
            Ok(g.add_scalar(neg, 1.0)?)
        }
        AcquisitionKind::Bald { samples } => {
            let masks = ctx.masks.ok_or(Error::MissingContext {
                kind: "bald",
                needs: "dropout masks or a random stream",
            })?;
            if samples < 2 || masks.len() != samples {
                return Err(Error::InvalidArgument(format!(
                    "BALD needs M >= 2 mask sets matching M = {samples}, got {}",
                    masks.len()
                )));
            }
            let mut mean_p: Option<NodeId> = None;
            let mut mean_h: Option<NodeId> = None;
            for m in masks {
                let z = logits_node(g, params, nodes, x, Some(m))?;
                let p = g.softmax(z)?;
                let h = g.entropy_rows(p)?;
                mean_p = Some(match mean_p {
                    Some(acc) => g.add(acc, p)?,
                    None => p,
                });
                mean_h = Some(match mean_h {
                    Some(acc) => g.add(acc, h)?,
                    None => h,
                });
            }
            let inv = 1.0 / samples as f64;
            let mean_p = g.scale(mean_p.expect("M >= 2"), inv)?;
            let mean_h = g.scale(mean_h.expect("M >= 2"), inv)?;
            let h_mean = g.entropy_rows(mean_p)?;
            Ok(g.sub(h_mean, mean_h)?)
        }
        AcquisitionKind::Coreset => {
            let centers = ctx.centers.ok_or(Error::MissingContext {
                kind: "coreset",
                needs: "center embeddings",
            })?;
            if g.value(centers).rows() == 0 {
                return Err(Error::Empty("core-set centers"));
            }
            let e = embed_node(g, params, nodes, x)?;
            Ok(g.min_dist(e, centers)?)
        }
    }
}

/// Plain scores for the rows of `samples`.
///
/// BALD draws its masks from `rng` for the whole batch; use
/// [`score_with_masks`] to replay recorded masks instead.
pub fn score(
    kind: AcquisitionKind,
    params: &MlpParams,
    samples: &Tensor,
    context: Option<&CoresetContext>,
    rng: Option<&mut Stream>,
) -> Result<Vec<f64>> {
    let masks = match kind {
        AcquisitionKind::Bald { samples: m } => {
            let rng = rng.ok_or(Error::MissingContext {
                kind: "bald",
                needs: "a random stream",
            })?;
            if samples.rows() == 0 {
                return Err(Error::Empty("sample set"));
            }
            Some(
                (0..m)
                    .map(|_| draw_masks(params, samples.rows(), rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        _ => None,
    };
    score_with_masks(kind, params, samples, context, masks.as_deref())
}

pub fn score_with_masks(
    kind: AcquisitionKind,
    params: &MlpParams,
    samples: &Tensor,
    context: Option<&CoresetContext>,
    masks: Option<&[HiddenMasks]>,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if samples.cols() != params.input_dim() {
        return Err(Error::LengthMismatch {
            what: "feature dimension",
            expected: params.input_dim(),
            got: samples.cols(),
        });
    }
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false)?;
    let x = g.constant(samples.clone())?;
    let centers = match (kind, context) {
        (AcquisitionKind::Coreset, Some(c)) => Some(g.constant(c.center_embeddings.clone())?),
        _ => None,
    };
    let out = score_node(
        &mut g,
        kind,
        params,
        &nodes,
        x,
        NodeContext { centers, masks },
    )?;
    let scores = g.value(out).data().to_vec();
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NanScore { index: i });
    }
    Ok(scores)
}

/// Entropy of one probability vector, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Mutual information from a set of predictive vectors.
pub fn bald_from_predictions(preds: &[Vec<f64>]) -> f64 {
    let m = preds.len() as f64;
    let k = preds[0].len();
    let mean: Vec<f64> = (0..k)
        .map(|c| preds.iter().map(|p| p[c]).sum::<f64>() / m)
        .collect();
    entropy(&mean) - preds.iter().map(|p| entropy(p)).sum::<f64>() / m
}
