//! Quantization-aware fine-tuning with a straight-through estimator.
//!
//! Full-precision shadow weights are updated by momentum SGD. Every forward
//! pass quantizes them (and optionally the hidden activations) with schemes
//! refit to the current values; the backward pass treats rounding as the
//! identity inside the clamp range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::Graph;
use crate::error::{Error, Result};
use crate::model::{classification_accuracy, Dataset, ForwardQuant, Model, Targets};
use crate::quant::{weight_scheme, QuantScheme, RangePolicy, FULL_PRECISION_BITS};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub range_policy: RangePolicy,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            range_policy: RangePolicy::MinMax,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    /// Full-precision shadow weights after fine-tuning.
    pub model: Model,
    /// The deployable model: shadow weights snapped to their grids.
    pub quantized_model: Model,
    pub schemes: Vec<Option<QuantScheme>>,
    /// Full-batch quantized loss before fine-tuning and after each epoch.
    pub loss_history: Vec<f64>,
    pub quantized_loss: f64,
    pub quantized_accuracy: Option<f64>,
}

fn forward_quant(
    model: &Model,
    bits: &[u32],
    activation_bits: Option<&[u32]>,
    policy: RangePolicy,
) -> Result<ForwardQuant> {
    if bits.len() != model.num_layers() {
        return Err(Error::DimensionMismatch {
            expected: model.num_layers(),
            got: bits.len(),
        });
    }
    let weights = model
        .layers()
        .iter()
        .zip(bits)
        .map(|(l, &b)| weight_scheme(&l.weight, b, policy))
        .collect::<Result<Vec<_>>>()?;
    let mut act = vec![None; model.num_layers()];
    if let Some(ab) = activation_bits {
        if ab.len() + 1 != model.num_layers() {
            return Err(Error::DimensionMismatch {
                expected: model.num_layers() - 1,
                got: ab.len(),
            });
        }
        for (slot, &b) in act.iter_mut().zip(ab) {
            match b {
                FULL_PRECISION_BITS => {}
                1..=31 => *slot = Some(b),
                _ => return Err(Error::InvalidConfig(format!("unsupported activation bit width {b}"))),
            }
        }
    }
    Ok(ForwardQuant {
        weights,
        activation_bits: act,
    })
}

/// Quantized loss and optionally the gradient over all parameters (STE).
fn quantized_loss_grad(
    model: &Model,
    batch: &Dataset,
    quant: &ForwardQuant,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, crate::tensor::Tensor)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    model.check_input(&batch.inputs)?;
    let mut g = Graph::new();
    let params = model.record_params(&mut g, |_| with_grad);
    let x = g.constant(batch.inputs.clone());
    let outs = model.record_layers(&mut g, &params, x, 0, Some(quant))?;
    let out = *outs.last().expect("non-empty");
    let loss = model.record_loss(&mut g, out, &batch.targets)?;
    let grad = if with_grad {
        let wrt: Vec<_> = params.iter().flat_map(|&(w, b)| [w, b]).collect();
        g.backward(loss, &wrt)?
            .into_iter()
            .flat_map(|v| g.value(v).data().to_vec())
            .collect()
    } else {
        Vec::new()
    };
    Ok((g.value(loss).item(), grad, g.value(out).clone()))
}

/// Loss and accuracy of `model` evaluated with weights at `bits` and hidden
/// activations at `activation_bits`.
pub fn evaluate_quantized(
    model: &Model,
    data: &Dataset,
    bits: &[u32],
    activation_bits: Option<&[u32]>,
    policy: RangePolicy,
) -> Result<(f64, Option<f64>)> {
    let quant = forward_quant(model, bits, activation_bits, policy)?;
    let (loss, _, logits) = quantized_loss_grad(model, data, &quant, false)?;
    let acc = match &data.targets {
        Targets::Classes(labels) => Some(classification_accuracy(&logits, labels)),
        Targets::Values(_) => None,
    };
    Ok((loss, acc))
}

/// Fine-tunes every layer jointly under the assignment `bits`.
pub fn qat_finetune(
    model: &Model,
    data: &Dataset,
    bits: &[u32],
    activation_bits: Option<&[u32]>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} not in 1..={}",
            cfg.batch_size,
            data.len()
        )));
    }
    if !(cfg.learning_rate > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidConfig(
            "learning rate must be positive and momentum in [0, 1)".into(),
        ));
    }
    let mut model = model.clone();
    let mut rng = rng::rng(cfg.seed);
    let mut params = model.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();

    let (loss0, _) = evaluate_quantized(&model, data, bits, activation_bits, cfg.range_policy)?;
    let mut history = vec![loss0];
    let mut step = 0;
    for _ in 0..cfg.epochs {
        if cfg.batch_size < data.len() {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = data.subset(chunk);
            let quant = forward_quant(&model, bits, activation_bits, cfg.range_policy)?;
            let (loss, g, _) = quantized_loss_grad(&model, &batch, &quant, true)?;
            if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    stage: "fine-tuning",
                    step,
                    last_loss: history.last().copied(),
                });
            }
            for ((p, v), gi) in params.iter_mut().zip(&mut velocity).zip(&g) {
                *v = cfg.momentum * *v + gi;
                *p -= cfg.learning_rate * *v;
            }
            model.set_flat_params(&params)?;
        }
        let (loss, _) = evaluate_quantized(&model, data, bits, activation_bits, cfg.range_policy)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "fine-tuning",
                step,
                last_loss: history.last().copied(),
            });
        }
        history.push(loss);
    }

    let (quantized_loss, quantized_accuracy) =
        evaluate_quantized(&model, data, bits, activation_bits, cfg.range_policy)?;
    let quant = forward_quant(&model, bits, None, cfg.range_policy)?;
    let mut quantized_model = model.clone();
    for (layer, scheme) in quantized_model.layers_mut().iter_mut().zip(&quant.weights) {
        if let Some(s) = scheme {
            layer.weight = s.fake_quantize(&layer.weight);
        }
    }
    Ok(FinetuneResult {
        model,
        quantized_model,
        schemes: quant.weights,
        loss_history: history,
        quantized_loss,
        quantized_accuracy,
    })
}
