use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// `[N, outputs]` regression targets.
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(t) => Targets::Values(t.select_rows(idx)),
        }
    }
}

/// `N` inputs stored as the rows of a `[N, features]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{:?} inputs for {} targets",
                inputs.shape(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select(idx),
        }
    }

    /// The `i`-th example as a batch of one.
    pub fn example(&self, i: usize) -> Self {
        self.subset(&[i])
    }

    /// `n` distinct rows picked by a seeded shuffle, returned in ascending order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot sample {n} of {} examples",
                self.len()
            )));
        }
        if n == self.len() {
            return Ok(self.clone());
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut chosen = idx[..n].to_vec();
        chosen.sort_unstable();
        Ok(self.subset(&chosen))
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes(c) => c.iter().max().map(|m| m + 1),
            Targets::Values(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two interleaved half circles in the first two features; the rest is noise.
    TwoMoons { noise: f64 },
    /// Unit-variance clusters with means evenly spaced on a circle of radius `separation`.
    GaussianBlobs { separation: f64 },
    /// `y_k = sin(a_k · x)` plus Gaussian noise.
    Regression { noise: f64 },
}

/// Deterministic synthetic data. Example `i` belongs to class `i mod n_classes`,
/// so classes are balanced within one sample. For regression `n_classes` is the
/// number of targets.
pub fn make_synthetic(
    kind: SyntheticKind,
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    let classification = !matches!(kind, SyntheticKind::Regression { .. });
    if n_features == 0 || n_classes == 0 || n_samples == 0 {
        return Err(Error::InvalidConfig("dataset sizes must be positive".into()));
    }
    if classification && (n_classes < 2 || n_samples < n_classes) {
        return Err(Error::InvalidConfig(format!(
            "need n_samples ≥ n_classes ≥ 2, got {n_samples} samples and {n_classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut x = vec![0.0; n_samples * n_features];

    let targets = match kind {
        SyntheticKind::TwoMoons { noise } => {
            if n_classes != 2 || n_features < 2 {
                return Err(Error::InvalidConfig(
                    "two-moons needs 2 classes and at least 2 features".into(),
                ));
            }
            let mut labels = Vec::with_capacity(n_samples);
            for i in 0..n_samples {
                let c = i % 2;
                let row = &mut x[i * n_features..(i + 1) * n_features];
                // Evenly spaced angles keep the draw order-independent of the class.
                let t = PI * (i / 2) as f64 / n_samples.div_ceil(2).max(2) as f64;
                let (px, py) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                row[0] = px + noise * gauss();
                row[1] = py + noise * gauss();
                for v in &mut row[2..] {
                    *v = noise * gauss();
                }
                labels.push(c);
            }
            Targets::Classes(labels)
        }
        SyntheticKind::GaussianBlobs { separation } => {
            let means: Vec<Vec<f64>> = (0..n_classes)
                .map(|c| {
                    let angle = 2.0 * PI * c as f64 / n_classes as f64;
                    let mut m = vec![0.0; n_features];
                    m[0] = separation * angle.cos();
                    if n_features > 1 {
                        m[1] = separation * angle.sin();
                    } else {
                        m[0] = separation * c as f64;
                    }
                    m
                })
                .collect();
            let mut labels = Vec::with_capacity(n_samples);
            for i in 0..n_samples {
                let c = i % n_classes;
                for (f, v) in x[i * n_features..(i + 1) * n_features]
                    .iter_mut()
                    .enumerate()
                {
                    *v = means[c][f] + gauss();
                }
                labels.push(c);
            }
            Targets::Classes(labels)
        }
        SyntheticKind::Regression { noise } => {
            let a: Vec<f64> = (0..n_classes * n_features).map(|_| gauss()).collect();
            let mut y = vec![0.0; n_samples * n_classes];
            for i in 0..n_samples {
                let row = &mut x[i * n_features..(i + 1) * n_features];
                for v in row.iter_mut() {
                    *v = gauss();
                }
                for k in 0..n_classes {
                    let proj: f64 = row
                        .iter()
                        .zip(&a[k * n_features..(k + 1) * n_features])
                        .map(|(p, q)| p * q)
                        .sum();
                    y[i * n_classes + k] = proj.sin() + noise * gauss();
                }
            }
            Targets::Values(Tensor::matrix(n_samples, n_classes, y))
        }
    };
    Dataset::new(Tensor::matrix(n_samples, n_features, x), targets)
}
