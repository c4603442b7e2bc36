//! The MLP classifier that houses every learnable parameter.
//!
//! Weights are stored `[fan_in, fan_out]` so a forward layer is
//! `x · W + b`. Dropout (inverted, hidden layers only) is driven by explicit
//! [`HiddenMasks`] so that MC-dropout passes can be replayed exactly.

mod adam;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NamedTensors, NodeId};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStreams, Stream};
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    activation: Activation,
    dropout_rate: f64,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Graph handles for a bound [`MlpParams`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
}

impl ParamNodes {
    /// Resolves `w0, b0, ...` from the graph's bound inputs.
    pub fn from_inputs(g: &mut Graph, layers: usize) -> Result<Self> {
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            weights.push(g.input(&format!("w{l}"))?);
            biases.push(g.input(&format!("b{l}"))?);
        }
        Ok(Self { weights, biases })
    }
}

/// Dropout masks for one stochastic forward pass: one `[batch, width]`
/// tensor per hidden layer, entries `0` or `1 / (1 - rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenMasks(pub Vec<Tensor>);

/// Flat JSON form of the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsSnapshot {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// One `[fan_in][fan_out]` matrix per layer.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

fn check_dims(layer_dims: &[usize], dropout_rate: f64) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer dims need at least input and output and must be positive, got {layer_dims:?}"
        )));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::InvalidConfig(format!(
            "dropout rate {dropout_rate} outside [0, 1)"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(
        layer_dims: &[usize],
        activation: Activation,
        dropout_rate: f64,
        rng: &mut Stream,
    ) -> Result<Self> {
        check_dims(layer_dims, dropout_rate)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(1, fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            dropout_rate,
            weights,
            biases,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(layer_dims, 0.0)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| Tensor::zeros(p[0], p[1]))
            .collect();
        let biases = layer_dims
            .windows(2)
            .map(|p| Tensor::zeros(1, p[1]))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            dropout_rate: 0.0,
            weights,
            biases,
        })
    }

    pub fn from_layers(
        activation: Activation,
        dropout_rate: f64,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidConfig(
                "need one bias per weight matrix".into(),
            ));
        }
        let mut layer_dims = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            let last = *layer_dims.last().expect("nonempty");
            if !w.is_matrix() || w.rows() != last || b.shape() != [1, w.cols()] {
                return Err(Error::InvalidConfig(format!(
                    "inconsistent layer shapes: weight {:?}, bias {:?} after width {last}",
                    w.shape(),
                    b.shape()
                )));
            }
            layer_dims.push(w.cols());
        }
        check_dims(&layer_dims, dropout_rate)?;
        Ok(Self {
            layer_dims,
            activation,
            dropout_rate,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        check_dims(&self.layer_dims, rate)?;
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("nonempty")
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_dims[1..self.layer_dims.len() - 1]
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn num_parameters(&self) -> usize {
        self.weights
            .iter()
            .chain(&self.biases)
            .map(Tensor::len)
            .sum()
    }

    /// Parameter names in binding order: `w0, b0, w1, b1, ...`.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|l| [format!("w{l}"), format!("b{l}")])
            .collect()
    }

    pub fn named(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.insert(format!("w{l}"), w.clone());
            out.insert(format!("b{l}"), b.clone());
        }
        out
    }

    fn slot(&mut self, name: &str) -> Option<&mut Tensor> {
        let (kind, idx) = name.split_at(1);
        let idx: usize = idx.parse().ok()?;
        match kind {
            "w" => self.weights.get_mut(idx),
            "b" => self.biases.get_mut(idx),
            _ => None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let (kind, idx) = name.split_at(1);
        let idx: usize = idx.parse().ok()?;
        match kind {
            "w" => self.weights.get(idx),
            "b" => self.biases.get(idx),
            _ => None,
        }
    }

    /// Replaces one named parameter tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Adds the parameters to `g`, as differentiable named leaves or as
    /// constants.
    pub fn bind(&self, g: &mut Graph, differentiable: bool) -> Result<ParamNodes> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if differentiable {
                weights.push(g.param(format!("w{l}"), w.clone())?);
                biases.push(g.param(format!("b{l}"), b.clone())?);
            } else {
                weights.push(g.constant(w.clone())?);
                biases.push(g.constant(b.clone())?);
            }
        }
        Ok(ParamNodes { weights, biases })
    }

    pub fn snapshot(&self) -> ParamsSnapshot {
        ParamsSnapshot {
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            dropout_rate: self.dropout_rate,
            weights: self
                .weights
                .iter()
                .map(|w| (0..w.rows()).map(|r| w.row(r).to_vec()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.data().to_vec()).collect(),
        }
    }

    pub fn from_snapshot(s: &ParamsSnapshot) -> Result<Self> {
        let weights = s
            .weights
            .iter()
            .map(|w| Tensor::from_rows(w))
            .collect::<Result<Vec<_>, _>>()?;
        let biases = s
            .biases
            .iter()
            .map(|b| Tensor::row_vector(b.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let params = Self::from_layers(s.activation, s.dropout_rate, weights, biases)?;
        if params.layer_dims != s.layer_dims {
            return Err(Error::InvalidConfig(
                "snapshot layer_dims disagree with weights".into(),
            ));
        }
        Ok(params)
    }

    fn check_features(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.input_dim() {
            return Err(Error::LengthMismatch {
                what: "feature dimension",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }
}

fn activate(g: &mut Graph, act: Activation, z: NodeId) -> Result<NodeId> {
    Ok(match act {
        Activation::Relu => g.relu(z)?,
        Activation::Tanh => g.tanh(z)?,
    })
}

/// Output logits for the rows of `x`, optionally under dropout masks.
pub fn logits_node(
    g: &mut Graph,
    params: &MlpParams,
    nodes: &ParamNodes,
    x: NodeId,
    masks: Option<&HiddenMasks>,
) -> Result<NodeId> {
    let layers = nodes.weights.len();
    let mut h = x;
    for l in 0..layers {
        let z = g.matmul(h, nodes.weights[l])?;
        let z = g.add_bias(z, nodes.biases[l])?;
        if l + 1 == layers {
            return Ok(z);
        }
        h = activate(g, params.activation, z)?;
        if let Some(masks) = masks {
            let m = g.constant(masks.0[l].clone())?;
            h = g.mul(h, m)?;
        }
    }
    unreachable!("at least one layer")
}

/// Penultimate-layer activations (post-activation, no dropout).
pub fn embed_node(
    g: &mut Graph,
    params: &MlpParams,
    nodes: &ParamNodes,
    x: NodeId,
) -> Result<NodeId> {
    let layers = nodes.weights.len();
    if layers < 2 {
        return Err(Error::NoEmbeddingLayer);
    }
    let mut h = x;
    for l in 0..layers - 1 {
        let z = g.matmul(h, nodes.weights[l])?;
        let z = g.add_bias(z, nodes.biases[l])?;
        h = activate(g, params.activation, z)?;
    }
    Ok(h)
}

/// Draws one set of inverted-dropout masks for a batch.
pub fn draw_masks(params: &MlpParams, batch: usize, rng: &mut Stream) -> Result<HiddenMasks> {
    let p = params.dropout_rate;
    let keep = 1.0 / (1.0 - p);
    let masks = params
        .hidden_widths()
        .iter()
        .map(|&w| {
            let data = (0..batch * w)
                .map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 })
                .collect();
            Tensor::matrix(batch, w, data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HiddenMasks(masks))
}

/// `m` mask sets for the given samples, each sample drawing from its own
/// lane `(purpose, cycle, sample_id)`. The masks for a sample do not depend
/// on which other samples are in the batch.
pub fn masks_per_sample(
    params: &MlpParams,
    sample_ids: &[usize],
    m: usize,
    streams: &RngStreams,
    purpose: Purpose,
    cycle: usize,
) -> Result<Vec<HiddenMasks>> {
    let p = params.dropout_rate;
    let keep = 1.0 / (1.0 - p);
    let widths = params.hidden_widths();
    let n = sample_ids.len();
    let mut out: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|_| widths.iter().map(|&w| Vec::with_capacity(n * w)).collect())
        .collect();
    for &id in sample_ids {
        let mut rng = streams.lane(purpose, cycle, id);
        for pass in out.iter_mut() {
            for (layer, &w) in pass.iter_mut().zip(widths) {
                layer.extend((0..w).map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 }));
            }
        }
    }
    out.into_iter()
        .map(|pass| {
            let layers = pass
                .into_iter()
                .zip(widths)
                .map(|(data, &w)| Tensor::matrix(n, w, data))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(HiddenMasks(layers))
        })
        .collect()
}

fn forward_probs(params: &MlpParams, x: &Tensor, masks: Option<&HiddenMasks>) -> Result<Tensor> {
    params.check_features(x)?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false)?;
    let xn = g.constant(x.clone())?;
    let z = logits_node(&mut g, params, &nodes, xn, masks)?;
    let p = g.softmax(z)?;
    Ok(g.value(p).clone())
}

/// Predictive distribution for each row of `x`.
///
/// Train mode applies dropout when the rate is positive, which needs `rng`.
pub fn mlp_forward(
    params: &MlpParams,
    x: &Tensor,
    mode: Mode,
    rng: Option<&mut Stream>,
) -> Result<Tensor> {
    match mode {
        Mode::Train if params.dropout_rate > 0.0 => {
            let rng = rng.ok_or(Error::MissingContext {
                kind: "train-mode forward",
                needs: "a random stream for dropout",
            })?;
            let masks = draw_masks(params, x.rows(), rng)?;
            forward_probs(params, x, Some(&masks))
        }
        _ => forward_probs(params, x, None),
    }
}

/// Penultimate-layer embedding of each row of `x`.
pub fn mlp_embed(params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    params.check_features(x)?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false)?;
    let xn = g.constant(x.clone())?;
    let h = embed_node(&mut g, params, &nodes, xn)?;
    Ok(g.value(h).clone())
}

/// `m` forward passes with independent dropout masks drawn from `rng`.
pub fn mc_dropout_predict(
    params: &MlpParams,
    x: &Tensor,
    m: usize,
    rng: &mut Stream,
) -> Result<Vec<Tensor>> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "MC dropout needs at least one sample".into(),
        ));
    }
    if params.dropout_rate == 0.0 {
        let p = forward_probs(params, x, None)?;
        return Ok(vec![p; m]);
    }
    (0..m)
        .map(|_| {
            let masks = draw_masks(params, x.rows(), rng)?;
            forward_probs(params, x, Some(&masks))
        })
        .collect()
}

/// Forward passes under pre-drawn masks, one output per mask set.
pub fn predict_with_masks(
    params: &MlpParams,
    x: &Tensor,
    masks: &[HiddenMasks],
) -> Result<Vec<Tensor>> {
    masks
        .iter()
        .map(|m| forward_probs(params, x, Some(m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStreams;

    fn stream(seed: u64) -> Stream {
        RngStreams::new(seed).stream(Purpose::Init, 0)
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let p = MlpParams::zeros(&[3, 5, 4], Activation::Relu).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let probs = mlp_forward(&p, &x, Mode::Eval, None).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_layer_closed_form_softmax() {
        let w = Tensor::matrix(1, 2, vec![10.0, -10.0]).unwrap();
        let p = MlpParams::from_layers(Activation::Relu, 0.0, vec![w], vec![Tensor::zeros(1, 2)])
            .unwrap();
        let probs = mlp_forward(&p, &Tensor::scalar(1.0), Mode::Eval, None).unwrap();
        // sigma(20) by direct evaluation
        let s20 = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((probs.data()[0] - s20).abs() < 1e-15);
        assert!((probs.data()[0] - 0.99999999794).abs() < 1e-11);
        assert!((probs.data()[1] - 2.06e-9).abs() < 1e-11);
        assert!(matches!(
            mlp_embed(&p, &Tensor::scalar(1.0)),
            Err(Error::NoEmbeddingLayer)
        ));
    }

    #[test]
    fn rows_sum_to_one_and_eval_is_deterministic() {
        let p = MlpParams::init(&[2, 8, 3], Activation::Tanh, 0.0, &mut stream(3)).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -1.0], vec![4.0, 2.0]]).unwrap();
        let a = mlp_forward(&p, &x, Mode::Eval, None).unwrap();
        let b = mlp_forward(&p, &x, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
        for r in 0..2 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_mismatch_is_an_error() {
        let p = MlpParams::zeros(&[3, 2], Activation::Relu).unwrap();
        let x = Tensor::zeros(1, 2);
        assert!(matches!(
            mlp_forward(&p, &x, Mode::Eval, None),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn train_mode_with_dropout_needs_rng() {
        let mut p = MlpParams::init(&[2, 4, 2], Activation::Relu, 0.0, &mut stream(1)).unwrap();
        p.set_dropout_rate(0.5).unwrap();
        assert!(mlp_forward(&p, &Tensor::zeros(1, 2), Mode::Train, None).is_err());
        assert!(mlp_forward(&p, &Tensor::zeros(1, 2), Mode::Train, Some(&mut stream(2))).is_ok());
    }

    #[test]
    fn manual_two_two_two_tanh_network() {
        let w0 = Tensor::matrix(2, 2, vec![0.5, -0.3, 0.8, 0.1]).unwrap();
        let b0 = Tensor::matrix(1, 2, vec![0.1, -0.2]).unwrap();
        let w1 = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let b1 = Tensor::matrix(1, 2, vec![0.0, 0.3]).unwrap();
        let p = MlpParams::from_layers(Activation::Tanh, 0.0, vec![w0, w1], vec![b0, b1]).unwrap();
        let x = Tensor::row_vector(vec![1.0, 0.0]).unwrap();
        // hidden pre-activations for x = (1, 0): first row of w0 plus b0
        let h = [(0.5f64 + 0.1).tanh(), (-0.3f64 - 0.2).tanh()];
        let emb = mlp_embed(&p, &x).unwrap();
        assert!((emb.data()[0] - h[0]).abs() < 1e-12);
        assert!((emb.data()[1] - h[1]).abs() < 1e-12);
        let z = [h[0] * 1.0 + h[1] * 0.5, -h[0] + h[1] * 2.0 + 0.3];
        let p1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
        let probs = mlp_forward(&p, &x, Mode::Eval, None).unwrap();
        assert!((probs.data()[1] - p1).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_dropout_matches_eval_forward() {
        let p = MlpParams::init(&[2, 8, 3], Activation::Relu, 0.0, &mut stream(5)).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.9]]).unwrap();
        let eval = mlp_forward(&p, &x, Mode::Eval, None).unwrap();
        let draws = mc_dropout_predict(&p, &x, 5, &mut stream(6)).unwrap();
        assert_eq!(draws.len(), 5);
        assert!(draws.iter().all(|d| *d == eval));
        assert!(mc_dropout_predict(&p, &x, 0, &mut stream(6)).is_err());
    }

    #[test]
    fn mc_dropout_is_reproducible() {
        let p = MlpParams::init(&[2, 8, 3], Activation::Relu, 0.5, &mut stream(5)).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.9], vec![-1.0, 0.4]]).unwrap();
        let a = mc_dropout_predict(&p, &x, 4, &mut stream(9)).unwrap();
        let b = mc_dropout_predict(&p, &x, 4, &mut stream(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_sample_masks_do_not_depend_on_batch() {
        let p = MlpParams::init(&[2, 6, 3], Activation::Relu, 0.25, &mut stream(5)).unwrap();
        let s = RngStreams::new(4);
        let both = masks_per_sample(&p, &[3, 9], 3, &s, Purpose::Dropout, 2).unwrap();
        let single = masks_per_sample(&p, &[9], 3, &s, Purpose::Dropout, 2).unwrap();
        for (b, o) in both.iter().zip(&single) {
            assert_eq!(b.0[0].row(1), o.0[0].row(0));
        }
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let p = MlpParams::init(&[4, 16, 3], Activation::Relu, 0.25, &mut stream(8)).unwrap();
        let json = serde_json::to_string(&p.snapshot()).unwrap();
        let back: ParamsSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(MlpParams::from_snapshot(&back).unwrap(), p);
        assert!(json.contains("\"activation\":\"relu\""));
    }
}
