//! Monte Carlo check that the selection term adds a positive semi-definite
//! block to the Fisher information.
//!
//! The toy model is logistic regression `P(y = 1 | x) = sigmoid(θ·x)` over a
//! fixed pool. Selection follows the soft-max distribution over `β a(x; θ)`.
//! `I_y` and `I_x` are averages of score outer products, so `I_dmle - I_y`
//! is exactly the selection block `I_x`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::Serialize;

use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::estimation::lse_node;
use crate::rng::{Purpose, RngStreams};
use crate::selection::{select_positions, SelectionConfig, Strategy};
use crate::tensor::Tensor;

const MAX_PARAMS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherScore {
    /// Predictive entropy of the logistic model, which depends on θ.
    Entropy,
    /// The first pool feature, which does not.
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherSetup {
    /// Pool features `[n, d]`; `d` equals the number of parameters.
    pub pool: Tensor,
    pub theta: Vec<f64>,
    pub beta: f64,
    pub score: FisherScore,
    pub mc_samples: usize,
    pub seed: u64,
}

impl FisherSetup {
    /// Three-parameter logistic model (two features plus intercept) over a
    /// ten-sample pool, with entropy scores and `β = 1`.
    pub fn logistic_toy(seed: u64, mc_samples: usize) -> Self {
        let mut rng = RngStreams::new(seed).stream(Purpose::Verification, 0);
        let data = (0..10)
            .flat_map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    1.0,
                ]
            })
            .collect();
        let theta = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            pool: Tensor::matrix(10, 3, data).expect("10 x 3"),
            theta,
            beta: 1.0,
            score: FisherScore::Entropy,
            mc_samples,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherReport {
    pub i_y: DMatrix<f64>,
    pub i_x: DMatrix<f64>,
    pub i_dmle: DMatrix<f64>,
    /// `I_x` summed exactly over the selection distribution.
    pub i_x_exact: DMatrix<f64>,
    pub min_eig_i_x: f64,
    pub min_eig_gap: f64,
    pub mc_samples: usize,
    /// Largest per-entry standard error of the MC averages.
    pub std_error: f64,
}

/// Gradients of `ln P(j)` under the selection distribution and of
/// `ln P(y | x_j)` for both labels, plus the predictive `P(y = 1 | x_j)`.
struct Scores {
    selection: Vec<DVector<f64>>,
    label: Vec<[DVector<f64>; 2]>,
    p1: Vec<f64>,
    sel_scores: Vec<f64>,
}

fn gradients(setup: &FisherSetup) -> Result<Scores> {
    let (n, d) = (setup.pool.rows(), setup.pool.cols());
    let theta = Tensor::column(setup.theta.clone())?;
    let build = |g: &mut Graph| -> Result<_> {
        let th = g.param("theta", theta.clone())?;
        let x = g.constant(setup.pool.clone())?;
        let z = g.matmul(x, th)?;
        let split = g.constant(Tensor::row_vector(vec![-0.5, 0.5])?)?;
        let logits = g.matmul(z, split)?;
        let a = match setup.score {
            FisherScore::Entropy => {
                let p = g.softmax(logits)?;
                g.entropy_rows(p)?
            }
            FisherScore::Constant => {
                let first: Vec<f64> = (0..n).map(|i| setup.pool.get(i, 0)).collect();
                g.constant(Tensor::column(first)?)?
            }
        };
        let u = g.scale(a, setup.beta)?;
        Ok((u, a, logits))
    };
    let grad_of = |pick: &dyn Fn(
        &mut Graph,
        crate::NodeId,
        crate::NodeId,
    ) -> Result<crate::NodeId>|
     -> Result<DVector<f64>> {
        let mut g = Graph::new();
        let (u, _, logits) = build(&mut g)?;
        let out = pick(&mut g, u, logits)?;
        let grads = g.backward(out)?;
        let v = DVector::from_column_slice(grads["theta"].data());
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::IllConditioned("non-finite score vector".into()));
        }
        Ok(v)
    };
    let all: Vec<usize> = (0..n).collect();
    let mut selection = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for j in 0..n {
        selection.push(grad_of(&|g, u, _| {
            let uj = g.index_rows(u, &[j])?;
            let lz = lse_node(g, u, &all)?;
            Ok(g.sub(uj, lz)?)
        })?);
        let mut per_label = Vec::with_capacity(2);
        for y in 0..2 {
            per_label.push(grad_of(&|g, _, logits| {
                let ls = g.log_softmax(logits)?;
                let row = g.index_rows(ls, &[j])?;
                let mut mask = vec![0.0; 2];
                mask[y] = 1.0;
                let m = g.constant(Tensor::row_vector(mask)?)?;
                let picked = g.mul(row, m)?;
                Ok(g.sum(picked)?)
            })?);
        }
        let [a, b]: [DVector<f64>; 2] = per_label.try_into().expect("two labels");
        label.push([a, b]);
    }
    let mut g = Graph::new();
    let (_, a, logits) = build(&mut g)?;
    let p = g.softmax(logits)?;
    let p1 = (0..n).map(|i| g.value(p).get(i, 1)).collect();
    let sel_scores = g.value(a).data().to_vec();
    debug_assert_eq!(d, setup.theta.len());
    Ok(Scores {
        selection,
        label,
        p1,
        sel_scores,
    })
}

/// Running mean and per-entry standard error of outer products.
struct OuterMean {
    sum: DMatrix<f64>,
    sum_sq: DMatrix<f64>,
    count: usize,
}

impl OuterMean {
    fn new(d: usize) -> Self {
        Self {
            sum: DMatrix::zeros(d, d),
            sum_sq: DMatrix::zeros(d, d),
            count: 0,
        }
    }

    fn add(&mut self, v: &DVector<f64>) {
        let outer = v * v.transpose();
        self.sum_sq += outer.component_mul(&outer);
        self.sum += outer;
        self.count += 1;
    }

    fn mean(&self) -> DMatrix<f64> {
        &self.sum / self.count as f64
    }

    fn std_error(&self) -> f64 {
        let n = self.count as f64;
        let mean = self.mean();
        let var = &self.sum_sq / n - mean.component_mul(&mean);
        var.iter()
            .map(|v| (v.max(0.0) / n).sqrt())
            .fold(0.0, f64::max)
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn fisher_gap_check(setup: &FisherSetup) -> Result<FisherReport> {
    let (n, d) = (setup.pool.rows(), setup.pool.cols());
    if n < 2 || !setup.pool.is_matrix() {
        return Err(Error::IllConditioned(
            "the pool needs at least two samples".into(),
        ));
    }
    if d != setup.theta.len() || d > MAX_PARAMS {
        return Err(Error::IllConditioned(format!(
            "{} parameters for {d} features (at most {MAX_PARAMS})",
            setup.theta.len()
        )));
    }
    if setup.mc_samples == 0 || !(setup.beta >= 0.0 && setup.beta.is_finite()) {
        return Err(Error::InvalidArgument(
            "need MC samples and a finite β >= 0".into(),
        ));
    }
    if !setup.pool.all_finite() || setup.theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::IllConditioned(
            "non-finite pool or parameters".into(),
        ));
    }
    let s = gradients(setup)?;

    let streams = RngStreams::new(setup.seed);
    let mut sel_rng = streams.stream(Purpose::Gumbel, 0);
    let mut lab_rng = streams.stream(Purpose::Verification, 1);
    // β = 0 still samples uniformly, so the soft-max draw uses β = 1 on
    // scores that are already scaled
    let scaled: Vec<f64> = s.sel_scores.iter().map(|a| setup.beta * a).collect();
    let pick = SelectionConfig {
        strategy: Strategy::Ssms,
        k: 1,
        beta: 1.0,
        score_floor: SelectionConfig::DEFAULT_SCORE_FLOOR,
    };
    let mut ix = OuterMean::new(d);
    let mut iy = OuterMean::new(d);
    for _ in 0..setup.mc_samples {
        let j = select_positions(&pick, &scaled, &mut sel_rng)?[0];
        ix.add(&s.selection[j]);
        let i = lab_rng.random_range(0..n);
        let y = usize::from(lab_rng.random::<f64>() < s.p1[i]);
        iy.add(&s.label[i][y]);
    }

    let lz = crate::diff::log_sum_exp(&scaled);
    let mut i_x_exact = DMatrix::zeros(d, d);
    for (j, g) in s.selection.iter().enumerate() {
        i_x_exact += (scaled[j] - lz).exp() * (g * g.transpose());
    }

    let (i_x, i_y) = (ix.mean(), iy.mean());
    let i_dmle = &i_y + &i_x;
    let gap = &i_dmle - &i_y;
    Ok(FisherReport {
        min_eig_i_x: min_eigenvalue(&i_x),
        min_eig_gap: min_eigenvalue(&gap),
        i_y,
        i_x,
        i_dmle,
        i_x_exact,
        mc_samples: setup.mc_samples,
        std_error: ix.std_error().max(iy.std_error()),
    })
}
