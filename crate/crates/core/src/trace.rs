//! Hutchinson trace estimation of Hessian blocks.
//!
//! `Tr(H) ≈ (1/m) Σ_k z_kᵀ H z_k` with i.i.d. Rademacher or Gaussian probes.
//! Probe `k` is drawn from a stream seeded by `(seed, k)`, and samples are
//! reduced in probe order, so the estimate does not depend on how many
//! threads evaluate the probes.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{hvp_activations, BlockObjective, BlockOperator, HvpOperator, ModelObjective};
use crate::error::{Error, Result};
use crate::model::{Dataset, Model};
use crate::rng;
use crate::tensor::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDistribution {
    #[default]
    Rademacher,
    Gaussian,
}

impl ProbeDistribution {
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        match self {
            ProbeDistribution::Rademacher => (0..n)
                .map(|_| if rand::Rng::random::<bool>(&mut r) { 1.0 } else { -1.0 })
                .collect(),
            ProbeDistribution::Gaussian => (0..n).map(|_| StandardNormal.sample(&mut r)).collect(),
        }
    }
}

impl std::str::FromStr for ProbeDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rademacher" => Ok(Self::Rademacher),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::InvalidConfig(format!(
                "unknown probe distribution `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub distribution: ProbeDistribution,
    pub max_probes: usize,
    /// Adaptive stop once `stderr ≤ rel_tol · |mean|`; `None` always runs `max_probes`.
    #[serde(default)]
    pub rel_tol: Option<f64>,
    #[serde(default = "default_min_probes")]
    pub min_probes: usize,
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_min_probes() -> usize {
    2
}

fn default_threads() -> usize {
    1
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            distribution: ProbeDistribution::Rademacher,
            max_probes: 100,
            rel_tol: Some(0.05),
            min_probes: default_min_probes(),
            seed: 0,
            threads: 1,
        }
    }
}

impl ProbeConfig {
    /// Exactly `m` probes, no early stop.
    pub fn fixed(m: usize, seed: u64) -> Self {
        Self {
            max_probes: m,
            rel_tol: None,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_probes == 0 {
            return Err(Error::InvalidConfig("max_probes must be at least 1".into()));
        }
        if let Some(r) = self.rel_tol {
            if !(r > 0.0) {
                return Err(Error::InvalidConfig(format!("rel_tol {r} must be positive")));
            }
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEstimate {
    /// `z_kᵀ H z_k` per probe, in probe order.
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Unbiased sample variance of the samples (0 for a single probe).
    pub variance: f64,
    pub stderr: f64,
    pub probes: usize,
    /// Dimension of the Hessian block.
    pub dim: usize,
    /// Divisor for `avg_trace`: `n_i` for weights, per-input activation size for activations.
    pub normalizer: usize,
    pub avg_trace: f64,
}

impl TraceEstimate {
    pub fn from_samples(samples: Vec<f64>, dim: usize, normalizer: usize) -> Self {
        let (mean, variance, stderr) = sample_stats(&samples);
        Self {
            probes: samples.len(),
            samples,
            mean,
            variance,
            stderr,
            dim,
            normalizer,
            avg_trace: mean / normalizer as f64,
        }
    }

    /// Standard error of `avg_trace`.
    pub fn avg_stderr(&self) -> f64 {
        self.stderr / self.normalizer as f64
    }

    pub fn is_negative(&self) -> bool {
        self.mean < 0.0
    }
}

/// `(mean, variance, stderr)`; the mean is a left-to-right sum divided by `m`.
fn sample_stats(samples: &[f64]) -> (f64, f64, f64) {
    let m = samples.len();
    let mean = samples.iter().sum::<f64>() / m as f64;
    if m < 2 {
        return (mean, 0.0, 0.0);
    }
    let ss: f64 = samples.iter().map(|x| (x - mean).powi(2)).sum();
    let variance = ss / (m - 1) as f64;
    (mean, variance, (variance / m as f64).sqrt())
}

/// Runs probes `0, 1, …` through `sample` until the stopping rule fires.
///
/// `sample(k, z)` returns `zᵀHz` for probe vector `z`.
pub fn hutchinson_with<F>(dim: usize, normalizer: usize, cfg: &ProbeConfig, sample: F) -> Result<TraceEstimate>
where
    F: Fn(usize, &[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::Shape("trace of a 0-dimensional block".into()));
    }
    let run = |k: usize| -> Result<f64> {
        let z = cfg.distribution.sample(dim, rng::indexed(cfg.seed, k as u64));
        sample(k, &z).map_err(|e| Error::Oracle {
            probe: k,
            source: Box::new(e),
        })
    };
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut samples = Vec::with_capacity(cfg.max_probes);
    let mut next = 0;
    while next < cfg.max_probes {
        let end = (next + cfg.threads).min(cfg.max_probes);
        let chunk: Vec<Result<f64>> = match &pool {
            Some(p) => p.install(|| (next..end).into_par_iter().map(run).collect()),
            None => (next..end).map(run).collect(),
        };
        for r in chunk {
            samples.push(r?);
            if should_stop(&samples, cfg) {
                return Ok(TraceEstimate::from_samples(samples, dim, normalizer));
            }
        }
        next = end;
    }
    Ok(TraceEstimate::from_samples(samples, dim, normalizer))
}

fn should_stop(samples: &[f64], cfg: &ProbeConfig) -> bool {
    let Some(rho) = cfg.rel_tol else {
        return false;
    };
    if samples.len() < cfg.min_probes.max(2) {
        return false;
    }
    let (mean, _, stderr) = sample_stats(samples);
    stderr <= rho * mean.abs()
}

/// Hutchinson estimate of `Tr(H)` for a matrix-free operator.
pub fn hutchinson_trace<O: HvpOperator + ?Sized>(op: &O, cfg: &ProbeConfig) -> Result<TraceEstimate> {
    let n = op.dim();
    hutchinson_with(n, n, cfg, |_, z| op.apply(z).map(|hz| dot(z, &hz)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Weight,
    Activation,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Weight => "weight",
            TraceKind::Activation => "activation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTrace {
    pub layer_index: usize,
    pub layer_name: String,
    pub kind: TraceKind,
    pub estimate: TraceEstimate,
}

/// One weight-Hessian trace per block; block `b` uses probe seed `(seed, b)`.
pub fn block_avg_traces<O: BlockObjective + ?Sized>(obj: &O, cfg: &ProbeConfig) -> Result<Vec<LayerTrace>> {
    (0..obj.num_blocks())
        .map(|b| {
            let op = BlockOperator::new(obj, b)?;
            let estimate = hutchinson_trace(&op, &cfg.with_seed(rng::indexed(cfg.seed, b as u64)))?;
            Ok(LayerTrace {
                layer_index: b,
                layer_name: obj.block_name(b),
                kind: TraceKind::Weight,
                estimate,
            })
        })
        .collect()
}

/// The fixed sub-sampled batch that [`layer_avg_traces`] uses for probe seed `seed`.
pub fn trace_batch(data: &Dataset, batch_size: usize, seed: u64) -> Result<Dataset> {
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::InvalidConfig(format!(
            "trace batch size {batch_size} not in 1..={}",
            data.len()
        )));
    }
    data.sample(batch_size, rng::substream(seed, "trace-batch"))
}

/// Average weight-Hessian trace per layer on a fixed sub-sampled batch of
/// `batch_size` points.
pub fn layer_avg_traces(
    model: &Model,
    data: &Dataset,
    batch_size: usize,
    cfg: &ProbeConfig,
) -> Result<Vec<LayerTrace>> {
    let batch = trace_batch(data, batch_size, cfg.seed)?;
    let obj = ModelObjective::new(model.clone(), batch)?;
    block_avg_traces(&obj, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationTraces {
    pub traces: Vec<LayerTrace>,
    /// Layers without a quantizable activation, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Average activation-Hessian trace per hidden layer over `n_inputs` inputs.
///
/// The Hessian with respect to the concatenated activations of all inputs is
/// block diagonal, so each probe sample is `(1/N) Σ_i z_iᵀ H_{a_j(x_i)} z_i`,
/// evaluated one input at a time. `avg_trace` divides by the per-input
/// activation size.
pub fn activation_avg_traces(
    model: &Model,
    data: &Dataset,
    n_inputs: usize,
    cfg: &ProbeConfig,
) -> Result<ActivationTraces> {
    if n_inputs == 0 || n_inputs > data.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot use {n_inputs} inputs from a dataset of {}",
            data.len()
        )));
    }
    let inputs = data.sample(n_inputs, rng::substream(cfg.seed, "activation-inputs"))?;
    let examples: Vec<Dataset> = (0..n_inputs).map(|i| inputs.example(i)).collect();
    let last = model.num_layers() - 1;
    let mut traces = Vec::with_capacity(last);
    for j in 0..last {
        let width = model.layers()[j].fan_out();
        let layer_cfg = cfg.with_seed(rng::indexed(rng::substream(cfg.seed, "activation"), j as u64));
        let estimate = hutchinson_with(n_inputs * width, width, &layer_cfg, |_, z| {
            let mut acc = 0.0;
            for (i, ex) in examples.iter().enumerate() {
                let zi = &z[i * width..(i + 1) * width];
                acc += dot(zi, &hvp_activations(model, ex, j, zi)?);
            }
            Ok(acc / n_inputs as f64)
        })?;
        traces.push(LayerTrace {
            layer_index: j,
            layer_name: model.layers()[j].name.clone(),
            kind: TraceKind::Activation,
            estimate,
        });
    }
    Ok(ActivationTraces {
        traces,
        skipped: vec![(
            last,
            format!(
                "`{}` output feeds the loss head directly",
                model.layers()[last].name
            ),
        )],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub probes: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Running mean and standard error after each probe.
pub fn convergence_report(est: &TraceEstimate) -> Vec<ConvergenceRow> {
    (1..=est.samples.len())
        .map(|m| {
            let (mean, _, stderr) = sample_stats(&est.samples[..m]);
            ConvergenceRow {
                probes: m,
                mean,
                stderr,
            }
        })
        .collect()
}

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], mut out: W) -> Result<()> {
    let io = |e| Error::io("<convergence csv>", e);
    writeln!(out, "m,running_mean,stderr").map_err(io)?;
    for r in rows {
        writeln!(out, "{},{},{}", r.probes, fmt_float(r.mean), fmt_float(r.stderr)).map_err(io)?;
    }
    Ok(())
}

/// Shortest round-trip decimal form.
pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        serde_json::to_string(&x).expect("finite float")
    } else {
        x.to_string()
    }
}

pub const TRACE_CSV_HEADER: &str =
    "layer_index,layer_name,n_i,trace_mean,trace_stderr,avg_trace,probes_used,kind";

pub fn write_trace_csv<W: Write>(traces: &[LayerTrace], mut out: W) -> Result<()> {
    let io = |e| Error::io("<trace csv>", e);
    writeln!(out, "{TRACE_CSV_HEADER}").map_err(io)?;
    for t in traces {
        if t.layer_name.contains([',', '"', '\n']) {
            return Err(Error::InvalidConfig(format!(
                "layer name `{}` cannot be written to CSV",
                t.layer_name
            )));
        }
        let e = &t.estimate;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t.layer_index,
            t.layer_name,
            e.normalizer,
            fmt_float(e.mean),
            fmt_float(e.stderr),
            fmt_float(e.avg_trace),
            e.probes,
            t.kind.as_str()
        )
        .map_err(io)?;
    }
    Ok(())
}

/// One row of a trace CSV as read back from disk.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct TraceRow {
    pub layer_index: usize,
    pub layer_name: String,
    pub n_i: usize,
    pub trace_mean: f64,
    pub trace_stderr: f64,
    pub avg_trace: f64,
    pub probes_used: usize,
    pub kind: TraceKind,
}

impl TraceRow {
    pub fn avg_stderr(&self) -> f64 {
        self.trace_stderr / self.n_i as f64
    }
}

pub fn read_trace_csv<R: Read>(input: R, origin: &std::path::Path) -> Result<Vec<TraceRow>> {
    let mut text = String::new();
    let mut input = input;
    input
        .read_to_string(&mut text)
        .map_err(|e| Error::io(origin, e))?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        column: 1,
        offset: text.lines().take(line - 1).map(|l| l.len() + 1).sum(),
        message,
    };
    match lines.next() {
        Some((_, h)) if h.trim_end() == TRACE_CSV_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{TRACE_CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(lineno, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("field {}: {e}", k + 1)))
        };
        let int = |k: usize| -> Result<usize> {
            f[k].parse::<usize>()
                .map_err(|e| parse_err(lineno, format!("field {}: {e}", k + 1)))
        };
        let kind = match f[7] {
            "weight" => TraceKind::Weight,
            "activation" => TraceKind::Activation,
            other => return Err(parse_err(lineno, format!("unknown kind `{other}`"))),
        };
        rows.push(TraceRow {
            layer_index: int(0)?,
            layer_name: f[1].to_string(),
            n_i: int(2)?,
            trace_mean: num(3)?,
            trace_stderr: num(4)?,
            avg_trace: num(5)?,
            probes_used: int(6)?,
            kind,
        });
    }
    Ok(rows)
}
