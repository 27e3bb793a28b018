//! Small MLPs, synthetic data, training and checkpoints.

mod checkpoint;
mod data;
mod train;
mod zoo;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile, LayerRecord, FORMAT_VERSION};
pub use data::{make_synthetic, Dataset, SyntheticKind, Targets};
pub use train::{newton_refine, train_sgd, verify_local_min, LocalMinReport, RefineOutcome, TrainConfig, TrainOutcome};
pub use zoo::{zoo, DataSpec, ModelSpec, ZOO_NAMES};

use crate::ad::{Graph, Var};
use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    DenseRelu,
    DenseTanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossHead {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// A dense layer `y = act(x·W + b)` with `W: [fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    /// Weights plus biases: the size of this layer's Hessian block.
    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.weight.data().to_vec();
        v.extend_from_slice(self.bias.data());
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let nw = self.weight.numel();
        self.weight.data_mut().copy_from_slice(&flat[..nw]);
        self.bias.data_mut().copy_from_slice(&flat[nw..]);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    head: LossHead,
}

/// Per-layer quantization applied during a forward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct ForwardQuant {
    pub weights: Vec<Option<QuantScheme>>,
    pub activation_bits: Vec<Option<u32>>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, head: LossHead) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a model needs at least 2 layers, got {}",
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let shape_err = |detail: String| Error::LayerShape {
                layer: layer.name.clone(),
                detail,
            };
            if layer.weight.shape().len() != 2 {
                return Err(shape_err(format!("weight shape {:?}", layer.weight.shape())));
            }
            if layer.bias.shape() != [1, layer.fan_out()] {
                return Err(shape_err(format!(
                    "bias shape {:?} for {} outputs",
                    layer.bias.shape(),
                    layer.fan_out()
                )));
            }
            if i > 0 && layers[i - 1].fan_out() != layer.fan_in() {
                return Err(shape_err(format!(
                    "expects {} inputs but previous layer emits {}",
                    layer.fan_in(),
                    layers[i - 1].fan_out()
                )));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(shape_err("non-finite parameters".into()));
            }
        }
        Ok(Self { layers, head })
    }

    /// An MLP with widths `[d_in, h1, …, d_out]`; hidden layers use `act`,
    /// the last layer is linear.
    pub fn mlp(widths: &[usize], act: Activation, head: LossHead, seed: u64) -> Result<Self> {
        if widths.len() < 3 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid MLP widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let last = i + 1 == n;
                let kind = match (last, act) {
                    (true, _) => LayerKind::Dense,
                    (false, Activation::Relu) => LayerKind::DenseRelu,
                    (false, Activation::Tanh) => LayerKind::DenseTanh,
                };
                let gain = if kind == LayerKind::DenseRelu { 2.0 } else { 1.0 };
                let std = (gain / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                Layer {
                    name: format!("fc{}", i + 1),
                    kind,
                    weight: Tensor::matrix(fan_in, fan_out, w),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Self::new(layers, head)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, i: usize) -> Result<&Layer> {
        self.layers.get(i).ok_or(Error::BlockIndex {
            index: i,
            count: self.layers.len(),
        })
    }

    pub fn head(&self) -> LossHead {
        self.head
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// `n_i` per layer (weights + bias).
    pub fn param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::num_params).collect()
    }

    /// Weight entries per layer; the quantity that is stored at reduced precision.
    pub fn weight_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.numel()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.param_counts().iter().sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(Layer::flat_params).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_params() {
            return Err(Error::DimensionMismatch {
                expected: self.total_params(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.num_params();
            layer.set_flat_params(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, inputs: &Tensor) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::LayerShape {
                layer: self.layers[0].name.clone(),
                detail: format!(
                    "expects {} input features, batch has {}",
                    self.input_dim(),
                    inputs.cols()
                ),
            });
        }
        Ok(())
    }

    /// Records layers `start..` on `graph`, feeding `input` into layer `start`.
    /// Returns every layer's output node.
    pub(crate) fn record_layers(
        &self,
        graph: &mut Graph,
        params: &[(Var, Var)],
        input: Var,
        start: usize,
        quant: Option<&ForwardQuant>,
    ) -> Result<Vec<Var>> {
        let mut h = input;
        let mut outs = Vec::with_capacity(self.layers.len() - start);
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let (mut w, b) = params[i];
            if let Some(s) = quant.and_then(|q| q.weights.get(i).copied().flatten()) {
                w = graph.fake_quant(w, s);
            }
            let z = graph.matmul(h, w).map_err(|e| Error::LayerShape {
                layer: layer.name.clone(),
                detail: e.to_string(),
            })?;
            let z = graph.add_bias(z, b)?;
            h = match layer.kind {
                LayerKind::Dense => z,
                LayerKind::DenseRelu => graph.relu(z),
                LayerKind::DenseTanh => graph.tanh(z),
            };
            if let Some(bits) = quant.and_then(|q| q.activation_bits.get(i).copied().flatten()) {
                let scheme = QuantScheme::fit(graph.value(h), bits, Default::default())?;
                h = graph.fake_quant(h, scheme);
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Mean loss node for `output` against `targets`.
    pub(crate) fn record_loss(
        &self,
        graph: &mut Graph,
        output: Var,
        targets: &Targets,
    ) -> Result<Var> {
        match (self.head, targets) {
            (LossHead::CrossEntropy, Targets::Classes(labels)) => {
                graph.softmax_cross_entropy(output, labels)
            }
            (LossHead::Mse, Targets::Values(y)) => {
                // (1/N) Σ_i ‖o_i − y_i‖²
                let n = y.rows() as f64;
                let y = graph.constant(y.clone());
                let d = graph.sub(output, y)?;
                let sq = graph.mul(d, d)?;
                let s = graph.sum(sq);
                Ok(graph.scale(s, 1.0 / n))
            }
            (head, _) => Err(Error::InvalidConfig(format!(
                "{head:?} head does not match the dataset's targets"
            ))),
        }
    }

    /// Puts every layer's parameters on `graph`; `trainable` selects which are leaves
    /// that require gradients.
    pub(crate) fn record_params(
        &self,
        graph: &mut Graph,
        trainable: impl Fn(usize) -> bool,
    ) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if trainable(i) {
                    (graph.param(l.weight.clone()), graph.param(l.bias.clone()))
                } else {
                    (graph.constant(l.weight.clone()), graph.constant(l.bias.clone()))
                }
            })
            .collect()
    }

    /// Output of every layer for `inputs`.
    pub fn forward(&self, inputs: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(inputs)?;
        let mut g = Graph::new();
        let params = self.record_params(&mut g, |_| false);
        let x = g.constant(inputs.clone());
        let outs = self.record_layers(&mut g, &params, x, 0, None)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Fraction of correctly classified rows; `None` for regression data.
    pub fn accuracy(&self, data: &Dataset) -> Result<Option<f64>> {
        let Targets::Classes(labels) = &data.targets else {
            return Ok(None);
        };
        let logits = self.forward(&data.inputs)?.pop().expect("at least one layer");
        Ok(Some(classification_accuracy(&logits, labels)))
    }
}

pub(crate) fn classification_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row_slice(r)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
