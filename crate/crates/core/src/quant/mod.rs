//! Uniform affine quantization.
//!
//! A tensor `X` with `k` bits over the range `[q0, qmax]` is mapped to
//!
//! ```text
//! X'  = clamp(X, q0, qmax)
//! X^I = round((X' - q0) / Δ),   Δ = (qmax - q0) / (2^k - 1)
//! Q(X) = Δ·X^I + q0
//! ```
//!
//! Rounding is half-to-even. Quantization is per tensor, and everything is
//! simulated in `f64`.

mod qat;

use serde::{Deserialize, Serialize};

pub use qat::{evaluate_quantized, qat_finetune, FinetuneConfig, FinetuneResult};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Bit width treated as full precision: quantization is skipped entirely.
pub const FULL_PRECISION_BITS: u32 = 32;

/// Largest bit width that is actually simulated on a grid.
pub const MAX_GRID_BITS: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeFields")]
pub struct QuantScheme {
    #[serde(rename = "k")]
    bits: u32,
    q0: f64,
    qmax: f64,
    #[serde(skip)]
    delta: f64,
}

impl QuantScheme {
    pub fn new(bits: u32, q0: f64, qmax: f64) -> Result<Self> {
        let invalid = Error::InvalidScheme { bits, q0, qmax };
        if !(1..=MAX_GRID_BITS).contains(&bits) || !q0.is_finite() || !qmax.is_finite() {
            return Err(invalid);
        }
        let delta = (qmax - q0) / Self::max_index_for(bits) as f64;
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(invalid);
        }
        Ok(Self {
            bits,
            q0,
            qmax,
            delta,
        })
    }

    /// Scheme whose range is chosen from `x` according to `policy`.
    pub fn fit(x: &Tensor, bits: u32, policy: RangePolicy) -> Result<Self> {
        let (lo, hi) = policy.range(x.data())?;
        // A constant tensor has no spread; anchor the grid at its value.
        let hi = if hi > lo { hi } else { lo + 1.0 };
        Self::new(bits, lo, hi)
    }

    fn max_index_for(bits: u32) -> u64 {
        (1u64 << bits) - 1
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn q0(&self) -> f64 {
        self.q0
    }

    pub fn qmax(&self) -> f64 {
        self.qmax
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn max_index(&self) -> u64 {
        Self::max_index_for(self.bits)
    }

    pub fn index(&self, x: f64) -> u64 {
        let clamped = x.clamp(self.q0, self.qmax);
        let j = ((clamped - self.q0) / self.delta).round_ties_even();
        (j.max(0.0) as u64).min(self.max_index())
    }

    pub fn grid_value(&self, j: u64) -> f64 {
        self.delta * j as f64 + self.q0
    }

    pub fn quantize_value(&self, x: f64) -> f64 {
        self.grid_value(self.index(x))
    }

    pub fn in_range(&self, x: f64) -> bool {
        self.q0 <= x && x <= self.qmax
    }

    /// `Q(X)` with the same shape as `x`.
    pub fn fake_quantize(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.quantize_value(v))
    }

    /// 1 where the straight-through estimator passes gradient, 0 elsewhere.
    pub fn ste_mask(&self, x: &Tensor) -> Tensor {
        x.map(|v| if self.in_range(v) { 1.0 } else { 0.0 })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeFields {
    k: u32,
    q0: f64,
    qmax: f64,
}

impl TryFrom<SchemeFields> for QuantScheme {
    type Error = Error;

    fn try_from(f: SchemeFields) -> Result<Self> {
        Self::new(f.k, f.q0, f.qmax)
    }
}

/// How the clamp range `[q0, qmax]` is picked for a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RangePolicy {
    #[default]
    MinMax,
    /// Symmetric percentile clipping: `[P(100 - p), P(p)]`, `50 < p ≤ 100`.
    Percentile { p: f64 },
}

impl RangePolicy {
    pub fn range(&self, values: &[f64]) -> Result<(f64, f64)> {
        if values.is_empty() {
            return Err(Error::Shape("cannot fit a range to an empty tensor".into()));
        }
        match *self {
            RangePolicy::MinMax => Ok(min_max(values)),
            RangePolicy::Percentile { p } => {
                if !(p > 50.0 && p <= 100.0) {
                    return Err(Error::InvalidConfig(format!(
                        "clip percentile {p} outside (50, 100]"
                    )));
                }
                if p == 100.0 {
                    return Ok(min_max(values));
                }
                let mut sorted = values.to_vec();
                sorted.sort_by(f64::total_cmp);
                Ok((percentile(&sorted, 100.0 - p), percentile(&sorted, p)))
            }
        }
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub scheme: QuantScheme,
    pub indices: Vec<u64>,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor {
        let data = self
            .indices
            .iter()
            .map(|&j| self.scheme.grid_value(j))
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape preserved by quantize")
    }
}

pub fn quantize(x: &Tensor, scheme: &QuantScheme) -> QuantizedTensor {
    QuantizedTensor {
        scheme: *scheme,
        indices: x.data().iter().map(|&v| scheme.index(v)).collect(),
        shape: x.shape().to_vec(),
    }
}

/// `‖Q(W) − W‖²`.
pub fn perturbation_l2(w: &Tensor, scheme: &QuantScheme) -> f64 {
    w.data()
        .iter()
        .map(|&x| {
            let d = scheme.quantize_value(x) - x;
            d * d
        })
        .sum()
}

/// Straight-through gradient: `upstream` where `x` lies in the clamp range, 0 outside.
pub fn ste_grad(upstream: &Tensor, x: &Tensor, scheme: &QuantScheme) -> Result<Tensor> {
    if upstream.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    Ok(upstream.zip_map(x, |g, v| if scheme.in_range(v) { g } else { 0.0 }))
}

/// Scheme for a layer's weights at `bits`, or `None` at full precision.
pub fn weight_scheme(w: &Tensor, bits: u32, policy: RangePolicy) -> Result<Option<QuantScheme>> {
    match bits {
        FULL_PRECISION_BITS => Ok(None),
        b if (1..=MAX_GRID_BITS).contains(&b) => QuantScheme::fit(w, b, policy).map(Some),
        b => Err(Error::InvalidConfig(format!("unsupported bit width {b}"))),
    }
}

/// Weight perturbation of a layer at `bits` (0 at full precision).
pub fn layer_perturbation(w: &Tensor, bits: u32, policy: RangePolicy) -> Result<f64> {
    Ok(match weight_scheme(w, bits, policy)? {
        Some(s) => perturbation_l2(w, &s),
        None => 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub bytes: u64,
    pub full_precision_bytes: u64,
    pub compression_ratio: f64,
}

/// Weight payload of `weight_counts[i]` values at `bits[i]` each.
///
/// Biases and quantization range parameters are not counted.
pub fn size_bytes(weight_counts: &[usize], bits: &[u32]) -> u64 {
    let total_bits: u64 = weight_counts
        .iter()
        .zip(bits)
        .map(|(&n, &b)| n as u64 * b as u64)
        .sum();
    total_bits.div_ceil(8)
}

pub fn model_size_bytes(model: &Model, bits: &[u32]) -> Result<SizeReport> {
    if bits.len() != model.num_layers() {
        return Err(Error::DimensionMismatch {
            expected: model.num_layers(),
            got: bits.len(),
        });
    }
    let counts = model.weight_counts();
    let bytes = size_bytes(&counts, bits);
    let full = size_bytes(&counts, &vec![FULL_PRECISION_BITS; counts.len()]);
    Ok(SizeReport {
        bytes,
        full_precision_bytes: full,
        compression_ratio: full as f64 / bytes as f64,
    })
}

/// Bit assignment file: `{layers: [{name, bits}], activation_bits?: [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentFile {
    pub layers: Vec<LayerBits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_bits: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerBits {
    pub name: String,
    pub bits: u32,
}

impl AssignmentFile {
    pub fn new(model: &Model, bits: &[u32]) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .zip(bits)
                .map(|(l, &b)| LayerBits {
                    name: l.name.clone(),
                    bits: b,
                })
                .collect(),
            activation_bits: None,
        }
    }

    pub fn bits(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.bits).collect()
    }

    /// Checks layer names and bit widths against `model`.
    pub fn check(&self, model: &Model) -> Result<()> {
        if self.layers.len() != model.num_layers() {
            return Err(Error::DimensionMismatch {
                expected: model.num_layers(),
                got: self.layers.len(),
            });
        }
        for (entry, layer) in self.layers.iter().zip(model.layers()) {
            if entry.name != layer.name {
                return Err(Error::InvalidConfig(format!(
                    "assignment names layer `{}` where the model has `{}`",
                    entry.name, layer.name
                )));
            }
        }
        let all_bits = self
            .layers
            .iter()
            .map(|l| l.bits)
            .chain(self.activation_bits.iter().flatten().copied());
        for b in all_bits {
            if !(1..=MAX_GRID_BITS).contains(&b) && b != FULL_PRECISION_BITS {
                return Err(Error::InvalidConfig(format!("unsupported bit width {b}")));
            }
        }
        if let Some(ab) = &self.activation_bits {
            if ab.len() != model.num_layers() - 1 {
                return Err(Error::InvalidConfig(format!(
                    "activation_bits needs {} entries (hidden layers), got {}",
                    model.num_layers() - 1,
                    ab.len()
                )));
            }
        }
        Ok(())
    }
}
