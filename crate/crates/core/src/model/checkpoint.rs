//! JSON checkpoints.
//!
//! ```json
//! {"format_version": 1,
//!  "layers": [{"name", "kind", "shape": [in, out], "weights": [...], "bias": [...]}],
//!  "loss_head": "cross_entropy" | "mse"}
//! ```
//!
//! Floats are written in shortest round-trip form, so save → load is bit-exact.
//! A quantized export adds `"scheme": {"k", "q0", "qmax"}` to quantized layers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, LossHead, Model};
use crate::quant::QuantScheme;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub layers: Vec<LayerRecord>,
    pub loss_head: LossHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<QuantScheme>,
}

impl CheckpointFile {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            layers: model
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    name: l.name.clone(),
                    kind: l.kind,
                    shape: [l.fan_in(), l.fan_out()],
                    weights: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                    scheme: None,
                })
                .collect(),
            loss_head: model.head(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|r| {
                let [fan_in, fan_out] = r.shape;
                let err = |detail: String| Error::LayerShape {
                    layer: r.name.clone(),
                    detail,
                };
                let weight = Tensor::new(vec![fan_in, fan_out], r.weights.clone())
                    .map_err(|e| err(e.to_string()))?;
                let bias = Tensor::new(vec![1, fan_out], r.bias.clone())
                    .map_err(|e| err(e.to_string()))?;
                Ok(Layer {
                    name: r.name.clone(),
                    kind: r.kind,
                    weight,
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(layers, self.loss_head)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(origin, text, &e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    CheckpointFile::from_model(model).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    CheckpointFile::read(path)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    #[test]
    fn truncated_text_is_a_located_parse_error() {
        let m = Model::mlp(&[2, 3, 2], Activation::Relu, LossHead::CrossEntropy, 0).unwrap();
        let json = CheckpointFile::from_model(&m).to_json();
        let cut = &json[..json.len() / 2];
        match CheckpointFile::parse(cut, Path::new("x.json")) {
            Err(Error::Parse { line, offset, .. }) => {
                assert!(line > 1);
                assert!(offset <= cut.len());
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_layer_is_named() {
        let m = Model::mlp(&[2, 3, 2], Activation::Relu, LossHead::CrossEntropy, 0).unwrap();
        let mut f = CheckpointFile::from_model(&m);
        f.layers[1].weights.pop();
        let err = f.to_model().unwrap_err();
        assert!(err.to_string().contains("fc2"), "{err}");
        f.format_version = 2;
        assert!(f.to_model().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"format_version":1,"layers":[],"loss_head":"mse","extra":1}"#;
        assert!(CheckpointFile::parse(text, Path::new("x")).is_err());
    }
}
