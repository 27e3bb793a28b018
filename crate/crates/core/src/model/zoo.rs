//! Named reference models and the datasets they are trained on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{make_synthetic, Activation, Dataset, LossHead, Model, SyntheticKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input width followed by every layer's output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub head: LossHead,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        Model::mlp(&self.widths, self.activation, self.head, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: SyntheticKind,
    pub n_samples: usize,
    pub n_features: usize,
    /// Classes, or output dimensions for regression.
    pub n_classes: usize,
}

impl DataSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        make_synthetic(self.kind, self.n_samples, self.n_features, self.n_classes, seed)
    }
}

pub const ZOO_NAMES: [&str; 3] = ["blobs-mlp", "separable-relu", "regression-mlp"];

/// Model and dataset specification of a zoo entry.
///
/// * `blobs-mlp`: 4-layer tanh classifier on overlapping 3-class blobs.
/// * `separable-relu`: 3-layer ReLU classifier on well-separated blobs;
///   trains to a near-zero gradient within a few hundred epochs.
/// * `regression-mlp`: 3-layer tanh regressor with a finite, non-zero minimum.
pub fn zoo(name: &str) -> Result<(ModelSpec, DataSpec)> {
    let (widths, activation, head, kind, n_samples, n_classes) = match name {
        "blobs-mlp" => (
            vec![4, 16, 16, 16, 3],
            Activation::Tanh,
            LossHead::CrossEntropy,
            SyntheticKind::GaussianBlobs { separation: 1.5 },
            300,
            3,
        ),
        "separable-relu" => (
            vec![2, 8, 8, 2],
            Activation::Relu,
            LossHead::CrossEntropy,
            SyntheticKind::GaussianBlobs { separation: 5.0 },
            200,
            2,
        ),
        "regression-mlp" => (
            vec![2, 5, 5, 1],
            Activation::Tanh,
            LossHead::Mse,
            SyntheticKind::Regression { noise: 0.1 },
            600,
            1,
        ),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown zoo model `{other}`; available: {}",
                ZOO_NAMES.join(", ")
            )))
        }
    };
    let data = DataSpec {
        kind,
        n_samples,
        n_features: widths[0],
        n_classes,
    };
    Ok((
        ModelSpec {
            widths,
            activation,
            head,
        },
        data,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_build() {
        for name in ZOO_NAMES {
            let (m, d) = zoo(name).unwrap();
            let model = m.build(0).unwrap();
            let data = d.generate(0).unwrap();
            assert_eq!(model.input_dim(), data.inputs.cols());
            assert!((3..=8).contains(&model.num_layers()));
        }
        assert!(zoo("resnet").is_err());
    }
}
