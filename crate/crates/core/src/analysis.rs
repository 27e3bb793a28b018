//! Curvature experiments: trace versus top eigenvalue, equal-norm
//! perturbations along Hessian eigenvectors, and loss landscapes.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::ad::{
    assemble_dense, loss_and_grad, top_eigenpair, top_eigenpairs, Block, BlockObjective, BlockOperator,
    DenseOperator, EigenStatus, ModelObjective, PowerConfig,
};
use crate::error::{Error, Result};
use crate::model::{Dataset, Model};
use crate::quant::{weight_scheme, RangePolicy};
use crate::tensor::norm;
use crate::trace::{fmt_float, hutchinson_trace, ProbeConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticSummary {
    pub name: String,
    pub hessian_diagonal: Vec<f64>,
    pub top_eigenvalue: f64,
    pub power_iterations: usize,
    pub avg_trace: f64,
    pub avg_trace_stderr: f64,
    pub exact_avg_trace: f64,
    /// Loss increase for the equal-weight eigenvector mix of unit norm.
    pub loss_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1F2Report {
    pub functions: [QuadraticSummary; 2],
    pub perturbation_norm: f64,
    pub second_is_more_sensitive: bool,
}

/// `F₁ = 100x² + y²` and `F₂ = 100x² + 99y²`: equal top eigenvalue (200),
/// different traces, and the larger trace gives the larger loss increase.
pub fn f1f2_demo(probes: &ProbeConfig, power: &PowerConfig) -> Result<F1F2Report> {
    let summarize = |name: &str, diag: [f64; 2]| -> Result<QuadraticSummary> {
        let h = DenseOperator::diagonal(&diag);
        let top = top_eigenpair(&h, power)?;
        let est = hutchinson_trace(&h, probes)?;
        // Eigenvectors are the axes; an equal mix of unit norm is (1, 1)/√2.
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let f = |x: f64, y: f64| 0.5 * (diag[0] * x * x + diag[1] * y * y);
        Ok(QuadraticSummary {
            name: name.into(),
            hessian_diagonal: diag.to_vec(),
            top_eigenvalue: top.value,
            power_iterations: top.iterations,
            avg_trace: est.avg_trace,
            avg_trace_stderr: est.avg_stderr(),
            exact_avg_trace: (diag[0] + diag[1]) / 2.0,
            loss_increase: f(a, a) - f(0.0, 0.0),
        })
    };
    let f1 = summarize("F1", [200.0, 2.0])?;
    let f2 = summarize("F2", [200.0, 198.0])?;
    Ok(F1F2Report {
        second_is_more_sensitive: f2.loss_increase > f1.loss_increase,
        functions: [f1, f2],
        perturbation_norm: 1.0,
    })
}

/// Kendall-style comparison of two per-layer sensitivity metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingReport {
    /// Layers from most to least sensitive, tied layers grouped.
    pub trace_order: Vec<Vec<usize>>,
    pub eigenvalue_order: Vec<Vec<usize>>,
    /// Pairs whose relative order (greater, equal, less) differs between metrics.
    pub kendall_tau_distance: usize,
    pub discordant_pairs: Vec<(usize, usize)>,
    pub disagreeing_layers: Vec<usize>,
}

/// Values within `rel_tol` of each other (relative to the larger magnitude) count as tied.
pub fn ordering_compare(avg_traces: &[f64], top_eigenvalues: &[f64], rel_tol: f64) -> Result<OrderingReport> {
    if avg_traces.len() != top_eigenvalues.len() {
        return Err(Error::DimensionMismatch {
            expected: avg_traces.len(),
            got: top_eigenvalues.len(),
        });
    }
    let cmp = |v: &[f64], i: usize, j: usize| -> std::cmp::Ordering {
        let scale = v[i].abs().max(v[j].abs());
        if (v[i] - v[j]).abs() <= rel_tol * scale {
            std::cmp::Ordering::Equal
        } else {
            v[i].total_cmp(&v[j])
        }
    };
    let n = avg_traces.len();
    let mut discordant = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if cmp(avg_traces, i, j) != cmp(top_eigenvalues, i, j) {
                discordant.push((i, j));
            }
        }
    }
    let mut disagreeing: Vec<usize> = discordant.iter().flat_map(|&(i, j)| [i, j]).collect();
    disagreeing.sort_unstable();
    disagreeing.dedup();
    Ok(OrderingReport {
        trace_order: tie_groups(avg_traces, &cmp),
        eigenvalue_order: tie_groups(top_eigenvalues, &cmp),
        kendall_tau_distance: discordant.len(),
        discordant_pairs: discordant,
        disagreeing_layers: disagreeing,
    })
}

fn tie_groups(v: &[f64], cmp: &dyn Fn(&[f64], usize, usize) -> std::cmp::Ordering) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if cmp(v, g[0], i).is_eq() => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Config {
    /// Blocks up to this many parameters use a dense eigendecomposition.
    pub dense_limit: usize,
    /// Eigenpairs used for larger blocks.
    pub top_r: usize,
    pub power: PowerConfig,
    /// Trace estimation for blocks that are not decomposed densely.
    pub probes: ProbeConfig,
}

impl Default for Lemma1Config {
    fn default() -> Self {
        Self {
            dense_limit: 500,
            top_r: 8,
            power: PowerConfig::default(),
            probes: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockPerturbation {
    pub block: usize,
    pub name: String,
    pub dim: usize,
    pub avg_trace: f64,
    /// True when `avg_trace` comes from the full spectrum rather than probes.
    pub exact_trace: bool,
    pub eigenvectors_used: usize,
    /// Weight on each eigenvector.
    pub alpha: f64,
    pub perturbation_norm: f64,
    /// `½ ΔᵀHΔ`.
    pub predicted_increase: f64,
    pub loss_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairOutcome {
    pub first: BlockPerturbation,
    pub second: BlockPerturbation,
    /// The block with the lower average trace did not suffer the larger increase.
    pub ordering_consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub base_loss: f64,
    pub eigen_mix: PairOutcome,
    /// Same comparison with `Q(W) − W` rescaled to the same norm (weights only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantization_shaped: Option<PairOutcome>,
}

fn ordering_consistent(a: &BlockPerturbation, b: &BlockPerturbation) -> bool {
    use std::cmp::Ordering::*;
    match a.avg_trace.total_cmp(&b.avg_trace) {
        Less => a.loss_increase <= b.loss_increase,
        Greater => a.loss_increase >= b.loss_increase,
        Equal => true,
    }
}

struct Spectrum {
    vectors: Vec<Vec<f64>>,
    avg_trace: f64,
    exact: bool,
}

fn spectrum<O: BlockObjective + ?Sized>(obj: &O, block: usize, cfg: &Lemma1Config) -> Result<Spectrum> {
    let op = BlockOperator::new(obj, block)?;
    let n = obj.block_dim(block);
    if n <= cfg.dense_limit {
        let dense = assemble_dense(&op)?;
        let eig = dense.symmetric_eigen();
        Ok(Spectrum {
            avg_trace: eig.values.iter().sum::<f64>() / n as f64,
            vectors: eig.vectors,
            exact: true,
        })
    } else {
        let pairs = top_eigenpairs(&op, cfg.top_r.min(n), &cfg.power)?;
        let est = hutchinson_trace(&op, &cfg.probes)?;
        Ok(Spectrum {
            vectors: pairs.into_iter().map(|p| p.vector).collect(),
            avg_trace: est.avg_trace,
            exact: false,
        })
    }
}

fn perturb<O: BlockObjective + ?Sized>(
    obj: &O,
    block: usize,
    base_loss: f64,
    direction: Vec<f64>,
    target_norm: f64,
    alpha: f64,
    spec: &Spectrum,
) -> Result<BlockPerturbation> {
    let scale = target_norm / norm(&direction);
    let delta: Vec<f64> = direction.iter().map(|d| d * scale).collect();
    let hd = obj.block_hvp(block, &delta)?;
    let predicted = 0.5 * crate::tensor::dot(&delta, &hd);
    let params: Vec<f64> = obj
        .block_params(block)
        .iter()
        .zip(&delta)
        .map(|(p, d)| p + d)
        .collect();
    Ok(BlockPerturbation {
        block,
        name: obj.block_name(block),
        dim: obj.block_dim(block),
        avg_trace: spec.avg_trace,
        exact_trace: spec.exact,
        eigenvectors_used: spec.vectors.len(),
        alpha: alpha * scale,
        perturbation_norm: norm(&delta),
        predicted_increase: predicted,
        loss_increase: obj.loss_with_block(block, &params)? - base_loss,
    })
}

fn eigen_mix<O: BlockObjective + ?Sized>(
    obj: &O,
    block: usize,
    base_loss: f64,
    target_norm: f64,
    spec: &Spectrum,
) -> Result<BlockPerturbation> {
    let n = obj.block_dim(block);
    let alpha = target_norm / (spec.vectors.len() as f64).sqrt();
    let mut dir = vec![0.0; n];
    for v in &spec.vectors {
        for (d, x) in dir.iter_mut().zip(v) {
            *d += alpha * x;
        }
    }
    perturb(obj, block, base_loss, dir, target_norm, alpha, spec)
}

/// Perturbs blocks `i` and `j` by `α Σ_k v_k` over their Hessian
/// eigenvectors, with `α` set so both perturbations have norm
/// `perturbation_norm`, and compares the loss increases.
pub fn lemma1_check<O: BlockObjective + ?Sized>(
    obj: &O,
    i: usize,
    j: usize,
    perturbation_norm: f64,
    cfg: &Lemma1Config,
) -> Result<Lemma1Report> {
    obj.check_block(i)?;
    obj.check_block(j)?;
    if !(perturbation_norm > 0.0 && perturbation_norm.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "perturbation norm {perturbation_norm} must be positive"
        )));
    }
    let base = obj.loss()?;
    let si = spectrum(obj, i, cfg)?;
    let sj = spectrum(obj, j, cfg)?;
    let first = eigen_mix(obj, i, base, perturbation_norm, &si)?;
    let second = eigen_mix(obj, j, base, perturbation_norm, &sj)?;
    Ok(Lemma1Report {
        base_loss: base,
        eigen_mix: PairOutcome {
            ordering_consistent: ordering_consistent(&first, &second),
            first,
            second,
        },
        quantization_shaped: None,
    })
}

/// Lemma-1 check on two layers of a trained model. Refuses models whose
/// full-batch gradient norm exceeds `grad_tol`. With `quant_bits`, also
/// compares quantization-shaped perturbations of the weights.
pub fn lemma1_model(
    model: &Model,
    data: &Dataset,
    layers: (usize, usize),
    perturbation_norm: f64,
    grad_tol: f64,
    quant_bits: Option<u32>,
    cfg: &Lemma1Config,
) -> Result<Lemma1Report> {
    let (_, g) = loss_and_grad(model, data, Block::All)?;
    let grad_norm = norm(&g);
    if !(grad_norm <= grad_tol) {
        return Err(Error::NotConverged {
            grad_norm,
            threshold: grad_tol,
        });
    }
    let obj = ModelObjective::new(model.clone(), data.clone())?;
    let mut report = lemma1_check(&obj, layers.0, layers.1, perturbation_norm, cfg)?;
    if let Some(bits) = quant_bits {
        let shaped = |block: usize, eig: &BlockPerturbation| -> Result<BlockPerturbation> {
            let layer = model.layer(block)?;
            let scheme = weight_scheme(&layer.weight, bits, RangePolicy::MinMax)?.ok_or_else(|| {
                Error::InvalidConfig("quantization-shaped perturbation needs fewer than 32 bits".into())
            })?;
            let q = scheme.fake_quantize(&layer.weight);
            let mut dir: Vec<f64> = q.data().iter().zip(layer.weight.data()).map(|(a, b)| a - b).collect();
            dir.extend(std::iter::repeat_n(0.0, layer.fan_out()));
            if norm(&dir) == 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "layer `{}` is already on the {bits}-bit grid",
                    layer.name
                )));
            }
            let spec = Spectrum {
                vectors: Vec::new(),
                avg_trace: eig.avg_trace,
                exact: eig.exact_trace,
            };
            let mut p = perturb(&obj, block, report.base_loss, dir, perturbation_norm, 0.0, &spec)?;
            p.alpha = 0.0;
            Ok(p)
        };
        let first = shaped(layers.0, &report.eigen_mix.first)?;
        let second = shaped(layers.1, &report.eigen_mix.second)?;
        report.quantization_shaped = Some(PairOutcome {
            ordering_consistent: ordering_consistent(&first, &second),
            first,
            second,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeGrid {
    pub block: usize,
    pub name: String,
    pub eigenvalues: [f64; 2],
    #[serde(skip)]
    pub directions: [Vec<f64>; 2],
    /// Perturbation magnitudes along each direction, symmetric about 0.
    pub eps: Vec<f64>,
    /// `losses[a][b]` at `eps[a]·v₁ + eps[b]·v₂`.
    pub losses: Vec<Vec<f64>>,
    pub base_loss: f64,
}

impl LandscapeGrid {
    /// Five-point discrete Laplacian at the center.
    pub fn center_laplacian(&self) -> f64 {
        let c = self.eps.len() / 2;
        let h = self.eps[c + 1] - self.eps[c];
        let l = &self.losses;
        (l[c + 1][c] + l[c - 1][c] + l[c][c + 1] + l[c][c - 1] - 4.0 * l[c][c]) / (h * h)
    }
}

/// Loss on a `points × points` grid spanned by the top two Hessian
/// eigenvectors of `block`, with magnitudes in `[−radius, radius]`.
pub fn loss_landscape_grid<O: BlockObjective + ?Sized>(
    obj: &O,
    block: usize,
    radius: f64,
    points: usize,
    power: &PowerConfig,
) -> Result<LandscapeGrid> {
    obj.check_block(block)?;
    if points < 3 || points.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "grid needs an odd number of points ≥ 3, got {points}"
        )));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidConfig(format!("grid radius {radius} must be positive")));
    }
    if obj.block_dim(block) < 2 {
        return Err(Error::InvalidConfig("landscape needs a block of at least 2 parameters".into()));
    }
    let op = BlockOperator::new(obj, block)?;
    let pairs = top_eigenpairs(&op, 2, power)?;
    if let Some(p) = pairs.iter().find(|p| p.status == EigenStatus::MaxIterations) {
        return Err(Error::EigenNotConverged {
            block: obj.block_name(block),
            iterations: p.iterations,
        });
    }
    let [p1, p2]: [_; 2] = pairs.try_into().expect("two eigenpairs");
    let half = (points - 1) as f64;
    let eps: Vec<f64> = (0..points)
        .map(|i| radius * (2.0 * i as f64 - half) / half)
        .collect();
    let base = obj.block_params(block);
    let cells: Vec<(usize, usize)> = (0..points).flat_map(|a| (0..points).map(move |b| (a, b))).collect();
    let values = cells
        .par_iter()
        .map(|&(a, b)| {
            let params: Vec<f64> = base
                .iter()
                .zip(p1.vector.iter().zip(&p2.vector))
                .map(|(w, (x, y))| w + eps[a] * x + eps[b] * y)
                .collect();
            obj.loss_with_block(block, &params)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid {
        block,
        name: obj.block_name(block),
        eigenvalues: [p1.value, p2.value],
        directions: [p1.vector, p2.vector],
        losses: values.chunks(points).map(<[f64]>::to_vec).collect(),
        eps,
        base_loss: obj.loss()?,
    })
}

pub fn write_landscape_csv<W: Write>(grid: &LandscapeGrid, mut out: W) -> Result<()> {
    let io = |e| Error::io("<landscape csv>", e);
    writeln!(out, "eps1,eps2,loss").map_err(io)?;
    for (a, row) in grid.losses.iter().enumerate() {
        for (b, loss) in row.iter().enumerate() {
            writeln!(out, "{},{},{}", fmt_float(grid.eps[a]), fmt_float(grid.eps[b]), fmt_float(*loss))
                .map_err(io)?;
        }
    }
    Ok(())
}
