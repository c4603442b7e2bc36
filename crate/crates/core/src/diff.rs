//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! caches its forward value and records its operands; operands always
//! precede the node that consumes them, so the tape is acyclic by
//! construction and the backward pass is a single reverse sweep.
//!
//! ```
//! use dmle_core::diff::{eval_graph, Inputs};
//! use dmle_core::Tensor;
//!
//! let inputs = Inputs::new().param("x", Tensor::scalar(3.0));
//! let out = eval_graph(&inputs, |g| {
//!     let x = g.input("x")?;
//!     g.mul(x, x)
//! })
//! .unwrap();
//! assert_eq!(out.value.item(), 9.0);
//! assert_eq!(out.gradients["x"].item(), 6.0);
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;

/// Tensors keyed by input name.
pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradients need a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf {
        name: Option<String>,
        differentiable: bool,
    },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    IndexRows(NodeId, Vec<usize>),
    LogSumExp(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
    EntropyRows(NodeId),
    MaxRows(NodeId, Vec<usize>),
    MinDist(NodeId, NodeId, Vec<usize>),
    PairwiseDiff(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::IndexRows(..) => "index_rows",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::EntropyRows(..) => "entropy_rows",
            Op::MaxRows(..) => "max_rows",
            Op::MinDist(..) => "min_dist",
            Op::PairwiseDiff(..) => "pairwise_diff",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Named graph inputs, each flagged as differentiable or constant.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    entries: BTreeMap<String, (Tensor, bool)>,
}

impl Inputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a differentiable input.
    pub fn param(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.entries.insert(name.into(), (value, true));
        self
    }

    /// Every tensor in `named` as a differentiable input.
    pub fn from_params(named: &NamedTensors) -> Self {
        Self {
            entries: named
                .iter()
                .map(|(k, t)| (k.clone(), (t.clone(), true)))
                .collect(),
        }
    }

    /// Adds a non-differentiable input.
    pub fn constant(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.entries.insert(name.into(), (value, false));
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, differentiable: bool) {
        self.entries.insert(name.into(), (value, differentiable));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(t, _)| t)
    }

    fn differentiable(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, (_, d))| *d)
            .map(|(k, (t, _))| (k, t))
    }
}

/// Result of [`eval_graph`].
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: Tensor,
    pub gradients: NamedTensors,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: BTreeMap<String, NodeId>,
    bound: BTreeMap<String, (Tensor, bool)>,
}

fn check2(node: usize, op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    if !t.is_matrix() {
        return Err(DiffError::ShapeMismatch {
            node,
            op,
            detail: format!("expected a rank-2 tensor, got {:?}", t.shape()),
        });
    }
    Ok((t.rows(), t.cols()))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Overflow-safe log-sum-exp of a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose [`Graph::input`] calls resolve against `inputs`.
    pub fn with_inputs(inputs: &Inputs) -> Self {
        Self {
            bound: inputs.entries.clone(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<NodeId, DiffError> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(DiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(id))
    }

    fn leaf(
        &mut self,
        name: Option<String>,
        value: Tensor,
        differentiable: bool,
    ) -> Result<NodeId, DiffError> {
        check2(self.nodes.len(), "leaf", &value)?;
        let id = self.push(
            Op::Leaf {
                name: name.clone(),
                differentiable,
            },
            value,
            differentiable,
        )?;
        if let Some(name) = name {
            self.named.insert(name, id);
        }
        Ok(id)
    }

    /// Differentiable named leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId, DiffError> {
        let name = name.into();
        if self.named.contains_key(&name) {
            return Err(DiffError::InvalidArgument(format!(
                "duplicate input `{name}`"
            )));
        }
        self.leaf(Some(name), value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, DiffError> {
        self.leaf(None, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId, DiffError> {
        self.constant(Tensor::scalar(value))
    }

    /// Resolves a bound input by name; repeated calls return the same node.
    pub fn input(&mut self, name: &str) -> Result<NodeId, DiffError> {
        if let Some(&id) = self.named.get(name) {
            return Ok(id);
        }
        let (value, differentiable) = self
            .bound
            .get(name)
            .cloned()
            .ok_or_else(|| DiffError::MissingInput(name.to_string()))?;
        self.leaf(Some(name.to_string()), value, differentiable)
    }

    /// Like [`Graph::input`] but also checks the declared shape.
    pub fn placeholder(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, DiffError> {
        if let Some((t, _)) = self.bound.get(name) {
            if t.shape() != shape {
                return Err(DiffError::ShapeMismatch {
                    node: self.nodes.len(),
                    op: "leaf",
                    detail: format!("input `{name}` declared {shape:?}, bound {:?}", t.shape()),
                });
            }
        }
        self.input(name)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> DiffError {
        DiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (m, k) = check2(self.len(), "matmul", self.value(a))?;
        let (k2, n) = check2(self.len(), "matmul", self.value(b))?;
        if k != k2 {
            return Err(self.mismatch("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        let ng = self.ng(&[a, b]);
        self.push(Op::MatMul(a, b), value, ng)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(Op::Sub(a, b), value, ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(Op::Mul(a, b), value, ng)
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = check2(self.len(), "add_bias", self.value(x))?;
        let (br, bc) = check2(self.len(), "add_bias", self.value(bias))?;
        if br != 1 || bc != n {
            return Err(self.mismatch("add_bias", format!("[{m}, {n}] + [{br}, {bc}]")));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        let value = Tensor::matrix(m, n, data)?;
        let ng = self.ng(&[x, bias]);
        self.push(Op::AddBias(x, bias), value, ng)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, DiffError> {
        let value = map(self.value(x), |v| v * factor);
        let ng = self.ng(&[x]);
        self.push(Op::Scale(x, factor), value, ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, shift: f64) -> Result<NodeId, DiffError> {
        let value = map(self.value(x), |v| v + shift);
        let ng = self.ng(&[x]);
        self.push(Op::AddScalar(x), value, ng)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId, DiffError> {
        let value = map(self.value(x), f);
        let ng = self.ng(&[x]);
        self.push(op, value, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId, DiffError> {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Op::Mean(x), Tensor::scalar(s), ng)
    }

    /// Row sums `[m, n] -> [m, 1]`.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = check2(self.len(), "sum_rows", self.value(x))?;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        let value = Tensor::matrix(m, 1, data)?;
        let ng = self.ng(&[x]);
        self.push(Op::SumRows(x), value, ng)
    }

    /// Gathers rows; indices may repeat.
    pub fn index_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, DiffError> {
        let (m, _) = check2(self.len(), "index_rows", self.value(x))?;
        if rows.is_empty() {
            return Err(self.mismatch("index_rows", "empty row selection".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(self.mismatch("index_rows", format!("row {bad} of {m}")));
        }
        let value = self.value(x).select_rows(rows)?;
        let ng = self.ng(&[x]);
        self.push(Op::IndexRows(x, rows.to_vec()), value, ng)
    }

    /// Row-wise max-shifted log-sum-exp `[m, n] -> [m, 1]`.
    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = check2(self.len(), "log_sum_exp", self.value(x))?;
        let data = self.value(x).data().chunks(n).map(log_sum_exp).collect();
        let value = Tensor::matrix(m, 1, data)?;
        let ng = self.ng(&[x]);
        self.push(Op::LogSumExp(x), value, ng)
    }

    fn log_softmax_raw(t: &Tensor) -> Tensor {
        let n = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    /// Row-wise softmax, computed as `exp(x - lse(x))`.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        check2(self.len(), "softmax", self.value(x))?;
        let value = map(&Self::log_softmax_raw(self.value(x)), f64::exp);
        let ng = self.ng(&[x]);
        self.push(Op::Softmax(x), value, ng)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        check2(self.len(), "log_softmax", self.value(x))?;
        let value = Self::log_softmax_raw(self.value(x));
        let ng = self.ng(&[x]);
        self.push(Op::LogSoftmax(x), value, ng)
    }

    /// Summed negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, DiffError> {
        let (m, n) = check2(self.len(), "softmax_cross_entropy", self.value(logits))?;
        if labels.len() != m {
            return Err(self.mismatch(
                "softmax_cross_entropy",
                format!("{m} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(self.mismatch(
                "softmax_cross_entropy",
                format!("label {bad} of {n} classes"),
            ));
        }
        let loss = self
            .value(logits)
            .data()
            .chunks(n)
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .sum();
        let ng = self.ng(&[logits]);
        self.push(
            Op::SoftmaxCrossEntropy(logits, labels.to_vec()),
            Tensor::scalar(loss),
            ng,
        )
    }

    /// Row entropies `-sum p ln p` of probability rows, with `0 ln 0 = 0`.
    pub fn entropy_rows(&mut self, p: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = check2(self.len(), "entropy_rows", self.value(p))?;
        let data = self
            .value(p)
            .data()
            .chunks(n)
            .map(|row| {
                -row.iter()
                    .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
                    .sum::<f64>()
            })
            .collect();
        let value = Tensor::matrix(m, 1, data)?;
        let ng = self.ng(&[p]);
        self.push(Op::EntropyRows(p), value, ng)
    }

    /// Row maxima `[m, n] -> [m, 1]`; ties go to the lowest column.
    pub fn max_rows(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = check2(self.len(), "max_rows", self.value(x))?;
        let mut arg = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m);
        for row in self.value(x).data().chunks(n) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let value = Tensor::matrix(m, 1, data)?;
        let ng = self.ng(&[x]);
        self.push(Op::MaxRows(x, arg), value, ng)
    }

    /// For each row of `points` `[n, h]`, the Euclidean distance to the
    /// nearest row of `centers` `[c, h]`; ties go to the lowest center.
    pub fn min_dist(&mut self, points: NodeId, centers: NodeId) -> Result<NodeId, DiffError> {
        let (n, h) = check2(self.len(), "min_dist", self.value(points))?;
        let (_, h2) = check2(self.len(), "min_dist", self.value(centers))?;
        if h != h2 {
            return Err(self.mismatch("min_dist", format!("point dim {h} vs center dim {h2}")));
        }
        let (pv, cv) = (self.value(points), self.value(centers));
        let mut arg = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let p = pv.row(i);
            let mut best = (0usize, f64::INFINITY);
            for j in 0..cv.rows() {
                let d2: f64 = p
                    .iter()
                    .zip(cv.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < best.1 {
                    best = (j, d2);
                }
            }
            arg.push(best.0);
            data.push(best.1.sqrt());
        }
        let value = Tensor::matrix(n, 1, data)?;
        let ng = self.ng(&[points, centers]);
        self.push(Op::MinDist(points, centers, arg), value, ng)
    }

    /// `out[i][j] = b[j] - a[i]` for columns `a` `[m, 1]` and `b` `[n, 1]`.
    pub fn pairwise_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (m, ac) = check2(self.len(), "pairwise_diff", self.value(a))?;
        let (n, bc) = check2(self.len(), "pairwise_diff", self.value(b))?;
        if ac != 1 || bc != 1 {
            return Err(self.mismatch("pairwise_diff", "operands must be columns".into()));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av
            .iter()
            .flat_map(|x| bv.iter().map(move |y| y - x))
            .collect();
        let value = Tensor::matrix(m, n, data)?;
        let ng = self.ng(&[a, b]);
        self.push(Op::PairwiseDiff(a, b), value, ng)
    }

    /// Gradient of the scalar `output` with respect to every differentiable
    /// named leaf. Leaves the output does not depend on get zero gradients.
    pub fn backward(&self, output: NodeId) -> Result<NamedTensors, DiffError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(DiffError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);
        let mut result = NamedTensors::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf {
                    name: Some(name),
                    differentiable: true,
                } => {
                    result.insert(name.clone(), g);
                }
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[a.0].needs_grad {
                        let bt = transpose_raw(bv.data(), k, n);
                        let da = matmul_raw(g.data(), &bt, m, n, k);
                        self.accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = transpose_raw(av.data(), m, k);
                        let db = matmul_raw(&at, g.data(), k, m, n);
                        self.accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *b, map(&g, |v| -v));
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(*b), |x, y| x * y);
                    let db = zip_map(&g, self.value(*a), |x, y| x * y);
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(&mut grads, *b, Tensor::matrix(1, n, db)?);
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, f) => self.accumulate(&mut grads, *x, map(&g, |v| v * f)),
                Op::AddScalar(x) => self.accumulate(&mut grads, *x, g),
                Op::Tanh(x) => self.accumulate(
                    &mut grads,
                    *x,
                    zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv)),
                ),
                Op::Relu(x) => {
                    let d = zip_map(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    self.accumulate(&mut grads, *x, d)
                }
                Op::Sigmoid(x) => self.accumulate(
                    &mut grads,
                    *x,
                    zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)),
                ),
                Op::Exp(x) => self.accumulate(&mut grads, *x, zip_map(&g, y, |gv, yv| gv * yv)),
                Op::Log(x) => self.accumulate(
                    &mut grads,
                    *x,
                    zip_map(&g, self.value(*x), |gv, xv| gv / xv),
                ),
                Op::Sqrt(x) => {
                    let d = zip_map(&g, y, |gv, yv| if yv > 0.0 { 0.5 * gv / yv } else { 0.0 });
                    self.accumulate(&mut grads, *x, d)
                }
                Op::ClampMin(x, floor) => {
                    let d = zip_map(
                        &g,
                        self.value(*x),
                        |gv, xv| if xv > *floor { gv } else { 0.0 },
                    );
                    self.accumulate(&mut grads, *x, d)
                }
                Op::Sum(x) => {
                    let t = self.value(*x);
                    let gv = g.item();
                    self.accumulate(&mut grads, *x, map(t, |_| gv))
                }
                Op::Mean(x) => {
                    let t = self.value(*x);
                    let gv = g.item() / t.len() as f64;
                    self.accumulate(&mut grads, *x, map(t, |_| gv))
                }
                Op::SumRows(x) => {
                    let t = self.value(*x);
                    let n = t.cols();
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv, n))
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(t.shape().to_vec(), data)?)
                }
                Op::IndexRows(x, rows) => {
                    let t = self.value(*x);
                    let n = t.cols();
                    let mut data = vec![0.0; t.len()];
                    for (r, &src) in rows.iter().enumerate() {
                        let dst = &mut data[src * n..(src + 1) * n];
                        dst.iter_mut().zip(g.row(r)).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(t.shape().to_vec(), data)?)
                }
                Op::LogSumExp(x) => {
                    let t = self.value(*x);
                    let n = t.cols();
                    let mut data = Vec::with_capacity(t.len());
                    for (r, row) in t.data().chunks(n).enumerate() {
                        let (gv, lse) = (g.data()[r], y.data()[r]);
                        data.extend(row.iter().map(|v| gv * (v - lse).exp()));
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(t.shape().to_vec(), data)?)
                }
                Op::Softmax(x) => {
                    let n = y.cols();
                    let mut data = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), data)?)
                }
                Op::LogSoftmax(x) => {
                    let n = y.cols();
                    let mut data = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                        let gsum: f64 = gr.iter().sum();
                        data.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * gsum));
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), data)?)
                }
                Op::SoftmaxCrossEntropy(logits, labels) => {
                    let t = self.value(*logits);
                    let sm = map(&Self::log_softmax_raw(t), f64::exp);
                    let n = t.cols();
                    let gv = g.item();
                    let mut data = sm.into_data();
                    for (r, &lab) in labels.iter().enumerate() {
                        data[r * n + lab] -= 1.0;
                    }
                    data.iter_mut().for_each(|v| *v *= gv);
                    self.accumulate(&mut grads, *logits, Tensor::new(t.shape().to_vec(), data)?)
                }
                Op::EntropyRows(p) => {
                    let t = self.value(*p);
                    let n = t.cols();
                    let mut data = Vec::with_capacity(t.len());
                    for (r, row) in t.data().chunks(n).enumerate() {
                        let gv = g.data()[r];
                        data.extend(
                            row.iter()
                                .map(|&q| -gv * (q.max(f64::MIN_POSITIVE).ln() + 1.0)),
                        );
                    }
                    self.accumulate(&mut grads, *p, Tensor::new(t.shape().to_vec(), data)?)
                }
                Op::MaxRows(x, arg) => {
                    let t = self.value(*x);
                    let n = t.cols();
                    let mut data = vec![0.0; t.len()];
                    for (r, &j) in arg.iter().enumerate() {
                        data[r * n + j] = g.data()[r];
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(t.shape().to_vec(), data)?)
                }
                Op::MinDist(points, centers, arg) => {
                    let (pv, cv) = (self.value(*points), self.value(*centers));
                    let h = pv.cols();
                    let mut dp = vec![0.0; pv.len()];
                    let mut dc = vec![0.0; cv.len()];
                    for (i, &j) in arg.iter().enumerate() {
                        let d = y.data()[i];
                        if d <= 0.0 {
                            continue;
                        }
                        let coef = g.data()[i] / d;
                        for c in 0..h {
                            let diff = coef * (pv.get(i, c) - cv.get(j, c));
                            dp[i * h + c] += diff;
                            dc[j * h + c] -= diff;
                        }
                    }
                    self.accumulate(&mut grads, *points, Tensor::new(pv.shape().to_vec(), dp)?);
                    self.accumulate(&mut grads, *centers, Tensor::new(cv.shape().to_vec(), dc)?);
                }
                Op::PairwiseDiff(a, b) => {
                    let (m, n) = (g.rows(), g.cols());
                    let mut da = vec![0.0; m];
                    let mut db = vec![0.0; n];
                    for (i, dai) in da.iter_mut().enumerate() {
                        for (j, dbj) in db.iter_mut().enumerate() {
                            let v = g.get(i, j);
                            *dai -= v;
                            *dbj += v;
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::matrix(m, 1, da)?);
                    self.accumulate(&mut grads, *b, Tensor::matrix(n, 1, db)?);
                }
            }
        }

        for node in &self.nodes {
            if let Op::Leaf {
                name: Some(name),
                differentiable: true,
            } = &node.op
            {
                result
                    .entry(name.clone())
                    .or_insert_with(|| map(&node.value, |_| 0.0));
            }
        }
        Ok(result)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(contrib.data())
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Builds a graph over `inputs` with `build`, returning the forward value
/// and the gradient with respect to every differentiable input.
pub fn eval_graph<F, E>(inputs: &Inputs, build: F) -> Result<Evaluation, E>
where
    F: Fn(&mut Graph) -> Result<NodeId, E>,
    E: From<DiffError>,
{
    let mut graph = Graph::with_inputs(inputs);
    let out = build(&mut graph)?;
    let value = graph.value(out).clone();
    let gradients = if inputs.differentiable().next().is_some() {
        let mut g = graph.backward(out)?;
        for (name, t) in inputs.differentiable() {
            g.entry(name.clone()).or_insert_with(|| map(t, |_| 0.0));
        }
        g
    } else {
        NamedTensors::new()
    };
    Ok(Evaluation { value, gradients })
}

/// Maximum over all differentiable input coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check<F, E>(inputs: &Inputs, h: f64, build: F) -> Result<f64, E>
where
    F: Fn(&mut Graph) -> Result<NodeId, E>,
    E: From<DiffError>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(
            DiffError::InvalidArgument(format!("step size must be positive, got {h}")).into(),
        );
    }
    let base = eval_graph(inputs, &build)?;
    if base.value.len() != 1 {
        return Err(DiffError::NonScalarOutput(base.value.shape().to_vec()).into());
    }
    let value_at = |name: &str, coord: usize, delta: f64| -> Result<f64, E> {
        let mut perturbed = inputs.clone();
        let entry = perturbed.entries.get_mut(name).expect("known input");
        entry.0.data_mut()[coord] += delta;
        let mut graph = Graph::with_inputs(&perturbed);
        let out = build(&mut graph)?;
        Ok(graph.value(out).item())
    };
    let mut worst = 0.0f64;
    for (name, analytic) in &base.gradients {
        for (coord, &a) in analytic.data().iter().enumerate() {
            let fd = (value_at(name, coord, h)? - value_at(name, coord, -h)?) / (2.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let inputs = Inputs::new().param("x", Tensor::scalar(3.0));
        let out = eval_graph(&inputs, |g| {
            let x = g.input("x")?;
            g.mul(x, x)
        })
        .unwrap();
        assert_eq!(out.value.item(), 9.0);
        assert_eq!(out.gradients["x"].item(), 6.0);
    }

    #[test]
    fn log_sum_exp_of_zeros_is_ln_two() {
        let inputs = Inputs::new().param("x", Tensor::row_vector(vec![0.0, 0.0]).unwrap());
        let out = eval_graph(&inputs, |g| {
            let x = g.input("x")?;
            let l = g.log_sum_exp(x)?;
            g.sum(l)
        })
        .unwrap();
        assert!((out.value.item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.gradients["x"].data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sum_exp_survives_large_inputs() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::row_vector(vec![700.0, -700.0, 699.0]).unwrap())
            .unwrap();
        let l = g.log_sum_exp(x).unwrap();
        assert!(g.value(l).item().is_finite());
        let x = g
            .constant(Tensor::row_vector(vec![-700.0, -700.0]).unwrap())
            .unwrap();
        let l = g.log_sum_exp(x).unwrap();
        assert!((g.value(l).item() - (-700.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn polynomial_grad_check() {
        let inputs = Inputs::new().param("x", Tensor::scalar(1.5));
        let err = grad_check(&inputs, 1e-5, |g| {
            let x = g.input("x")?;
            let x2 = g.mul(x, x)?;
            let x3 = g.mul(x2, x)?;
            let two_x = g.scale(x, 2.0)?;
            g.sub(x3, two_x)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_graph_has_zero_error() {
        let inputs = Inputs::new().param("x", Tensor::scalar(0.3));
        let err = grad_check(&inputs, 1e-5, |g| {
            let _ = g.input("x")?;
            g.scalar(4.0)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn shared_operand_accumulates() {
        // f = x*x + x, gradient 2x + 1
        let inputs = Inputs::new().param("x", Tensor::scalar(2.0));
        let out = eval_graph(&inputs, |g| {
            let x = g.input("x")?;
            let sq = g.mul(x, x)?;
            g.add(sq, x)
        })
        .unwrap();
        assert_eq!(out.gradients["x"].item(), 5.0);
    }

    #[test]
    fn matmul_shape_error_names_the_node() {
        let inputs = Inputs::new()
            .param("a", Tensor::zeros(2, 3))
            .param("b", Tensor::zeros(2, 3));
        let err = eval_graph(&inputs, |g| {
            let a = g.input("a")?;
            let b = g.input("b")?;
            g.matmul(a, b)
        })
        .unwrap_err();
        assert!(
            matches!(
                err,
                DiffError::ShapeMismatch {
                    node: 2,
                    op: "matmul",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn non_scalar_gradient_request_fails() {
        let inputs = Inputs::new().param("a", Tensor::zeros(2, 2));
        let err = eval_graph(&inputs, |g| g.input("a")).unwrap_err();
        assert_eq!(err, DiffError::NonScalarOutput(vec![2, 2]));
    }

    #[test]
    fn non_finite_reports_the_node() {
        let inputs = Inputs::new().param("x", Tensor::scalar(0.0));
        let err = eval_graph(&inputs, |g| {
            let x = g.input("x")?;
            g.log(x)
        })
        .unwrap_err();
        assert_eq!(err, DiffError::NonFinite { node: 1, op: "log" });
    }

    #[test]
    fn placeholder_checks_shape() {
        let inputs = Inputs::new().constant("x", Tensor::zeros(3, 2));
        let mut g = Graph::with_inputs(&inputs);
        assert!(g.placeholder("x", &[2, 3]).is_err());
        assert!(g.placeholder("x", &[3, 2]).is_ok());
        assert!(matches!(g.input("y"), Err(DiffError::MissingInput(_))));
    }

    #[test]
    fn forward_is_bit_identical() {
        let w = Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 0.05]).unwrap();
        let run = || {
            let mut g = Graph::new();
            let w = g.param("w", w.clone()).unwrap();
            let s = g.softmax(w).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
