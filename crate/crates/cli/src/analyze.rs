//! `analyze` subcommands: theory checks that run on a trained checkpoint or on
//! built-in quadratics.

use std::fmt::Write as _;
use std::fs;

use hessquant::ad::{top_eigenpair, BlockOperator, ModelObjective, PowerConfig};
use hessquant::analysis::{
    f1f2_demo, lemma1_model, loss_landscape_grid, ordering_compare, write_landscape_csv, F1F2Report, Lemma1Config,
    Lemma1Report, OrderingReport,
};
use hessquant::model::load_checkpoint;
use hessquant::planner::{cardinality_b, cardinality_c, cardinality_layerwise, cardinality_unconstrained};
use hessquant::trace::{fmt_float, trace_batch, ProbeConfig};
use serde::Serialize;

use crate::config::Run;
use crate::error::{CliError, Result};
use crate::stages::{weight_traces, write_json, CHECKPOINT};

pub fn f1f2(seed: u64) -> Result<(F1F2Report, String)> {
    let rep = f1f2_demo(&ProbeConfig::fixed(50, seed), &PowerConfig::default())?;
    let mut t = String::new();
    writeln!(t, "{:<4} {:>10} {:>10} {:>10} {:>10} {:>14}", "fn", "top_eig", "avg_trace", "stderr", "exact", "loss_increase").unwrap();
    for f in &rep.functions {
        writeln!(
            t,
            "{:<4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>14.6}",
            f.name, f.top_eigenvalue, f.avg_trace, f.avg_trace_stderr, f.exact_avg_trace, f.loss_increase
        )
        .unwrap();
    }
    let [a, b] = &rep.functions;
    let cmp = ordering_compare(&[a.avg_trace, b.avg_trace], &[a.top_eigenvalue, b.top_eigenvalue], 1e-8)?;
    writeln!(t, "perturbation norm {}", fmt_float(rep.perturbation_norm)).unwrap();
    writeln!(t, "eigenvalue order {:?}, trace order {:?}", cmp.eigenvalue_order, cmp.trace_order).unwrap();
    writeln!(
        t,
        "{} is more sensitive: {}",
        b.name,
        if rep.second_is_more_sensitive { "yes" } else { "no" }
    )
    .unwrap();
    Ok((rep, t))
}

pub fn cardinality(layers: u32, menu: u32) -> Result<String> {
    if layers == 0 || menu == 0 {
        return Err(CliError::Config("layers and menu size must be positive".into()));
    }
    let mut t = String::new();
    writeln!(t, "layers {layers}, menu size {menu}").unwrap();
    writeln!(t, "admissible assignments      {}", cardinality_b(layers.into(), menu.into())).unwrap();
    writeln!(t, "unconstrained assignments   {}", cardinality_unconstrained(layers, menu.into())).unwrap();
    writeln!(t, "fine-tuning orders          {}", cardinality_c(layers as usize)).unwrap();
    writeln!(t, "layer-wise orders           {}", cardinality_layerwise(layers.into())).unwrap();
    Ok(t)
}

fn checkpoint(run: &Run) -> Result<hessquant::model::Model> {
    let path = run.artifact(CHECKPOINT);
    if !path.is_file() {
        return Err(CliError::MissingArtifact {
            stage: "analyze",
            producer: "train",
            path,
        });
    }
    Ok(load_checkpoint(&path)?)
}

pub fn lemma1(run: &Run, pair: (usize, usize), norm: f64, quant_bits: Option<u32>) -> Result<(Lemma1Report, String)> {
    let model = checkpoint(run)?;
    let data = run.config.dataset()?;
    let cfg = Lemma1Config {
        probes: run.config.probe_config()?,
        ..Default::default()
    };
    let rep = lemma1_model(&model, &data, pair, norm, run.config.train.grad_tol, quant_bits, &cfg)?;
    write_json(&run.artifact("lemma1.json"), &rep)?;
    let mut t = String::new();
    writeln!(t, "base loss {}", fmt_float(rep.base_loss)).unwrap();
    writeln!(t, "{:<14} {:<8} {:>12} {:>12} {:>14} {:>14}", "perturbation", "layer", "avg_trace", "norm", "predicted", "loss_increase").unwrap();
    let mut outcomes = vec![("eigen-mix", &rep.eigen_mix)];
    if let Some(q) = &rep.quantization_shaped {
        outcomes.push(("quantization", q));
    }
    for (label, o) in outcomes {
        for p in [&o.first, &o.second] {
            writeln!(
                t,
                "{:<14} {:<8} {:>12.6e} {:>12.6e} {:>14.6e} {:>14.6e}",
                label, p.name, p.avg_trace, p.perturbation_norm, p.predicted_increase, p.loss_increase
            )
            .unwrap();
        }
        writeln!(t, "{label}: ordering consistent: {}", o.ordering_consistent).unwrap();
    }
    Ok((rep, t))
}

pub fn landscape(run: &Run, layer: usize, radius: f64, points: usize) -> Result<String> {
    let model = checkpoint(run)?;
    let name = model.layer(layer)?.name.clone();
    let obj = ModelObjective::new(model, run.config.dataset()?)?;
    let power = PowerConfig {
        seed: run.config.seed_for("landscape"),
        ..Default::default()
    };
    let grid = loss_landscape_grid(&obj, layer, radius, points, &power)?;
    let path = run.artifact(&format!("landscape_{name}.csv"));
    let mut buf = Vec::new();
    write_landscape_csv(&grid, &mut buf)?;
    fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
    Ok(format!(
        "layer {name}: top eigenvalues {} and {}, center Laplacian {}, grid written to {}\n",
        fmt_float(grid.eigenvalues[0]),
        fmt_float(grid.eigenvalues[1]),
        fmt_float(grid.center_laplacian()),
        path.display()
    ))
}

#[derive(Debug, Serialize)]
pub struct LayerSensitivity {
    pub layer: String,
    pub avg_trace: f64,
    pub top_eigenvalue: f64,
    pub eigen_converged: bool,
}

#[derive(Debug, Serialize)]
pub struct OrderingAnalysis {
    pub layers: Vec<LayerSensitivity>,
    pub comparison: OrderingReport,
}

/// Trace ordering from `traces.csv` against top-eigenvalue ordering on the
/// same sub-sampled batch.
pub fn ordering(run: &Run) -> Result<(OrderingAnalysis, String)> {
    let model = checkpoint(run)?;
    let rows = weight_traces(run, &model, "analyze")?;
    let data = run.config.dataset()?;
    let probes = run.config.probe_config()?;
    let batch = run.config.trace.batch_size.unwrap_or(data.len().min(256));
    let obj = ModelObjective::new(model, trace_batch(&data, batch, probes.seed)?)?;
    let power = PowerConfig {
        seed: run.config.seed_for("ordering"),
        ..Default::default()
    };
    let mut layers = Vec::with_capacity(rows.len());
    for (b, row) in rows.iter().enumerate() {
        let pair = top_eigenpair(&BlockOperator::new(&obj, b)?, &power)?;
        layers.push(LayerSensitivity {
            layer: row.layer_name.clone(),
            avg_trace: row.avg_trace,
            top_eigenvalue: pair.value,
            eigen_converged: pair.converged(),
        });
    }
    let traces: Vec<f64> = layers.iter().map(|l| l.avg_trace).collect();
    let tops: Vec<f64> = layers.iter().map(|l| l.top_eigenvalue).collect();
    let comparison = ordering_compare(&traces, &tops, 1e-8)?;
    let report = OrderingAnalysis { layers, comparison };
    write_json(&run.artifact("ordering.json"), &report)?;

    let mut t = String::new();
    writeln!(t, "{:<8} {:>14} {:>14}", "layer", "avg_trace", "top_eig").unwrap();
    for l in &report.layers {
        let flag = if l.eigen_converged { "" } else { " (not converged)" };
        writeln!(t, "{:<8} {:>14.6e} {:>14.6e}{flag}", l.layer, l.avg_trace, l.top_eigenvalue).unwrap();
    }
    let c = &report.comparison;
    writeln!(t, "trace order {:?}", c.trace_order).unwrap();
    writeln!(t, "eigenvalue order {:?}", c.eigenvalue_order).unwrap();
    writeln!(t, "Kendall tau distance {}, disagreeing layers {:?}", c.kendall_tau_distance, c.disagreeing_layers).unwrap();
    Ok((report, t))
}
