//! Human-readable digest of a run's artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hessquant::trace::{fmt_float, read_trace_csv, TraceKind, TraceRow};
use serde::Deserialize;

use crate::config::Run;
use crate::error::{CliError, Result};
use crate::stages::{
    read_json, EvalReport, FinetuneReport, PlanReport, Summary, TrainReport, FINETUNE_REPORT, FRONTIER,
    PLAN_REPORT, QUANTIZE_REPORT, SUMMARY, TRACES, TRAIN_REPORT,
};

#[derive(Debug, Deserialize)]
struct FrontierRow {
    assignment_id: usize,
    bits: String,
    size_bytes: u64,
    omega: f64,
    dominated: bool,
    chosen: bool,
}

fn read_frontier(path: &Path) -> Result<Vec<FrontierRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| artifact_error(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| artifact_error(path, e))
}

fn artifact_error(path: &Path, e: csv::Error) -> CliError {
    let message = match e.position() {
        Some(p) => format!("line {}: {e}", p.line()),
        None => e.to_string(),
    };
    CliError::Artifact {
        path: path.to_path_buf(),
        message,
    }
}

fn optional<T>(path: &Path, read: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.is_file() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

fn acc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".into(), |a| format!("{:.2}%", 100.0 * a))
}

fn trace_table(t: &mut String, rows: &[TraceRow], bits: Option<&[u32]>, omega: Option<&[f64]>) {
    writeln!(
        t,
        "{:<8} {:<10} {:>6} {:>13} {:>11} {:>6} {:>5} {:>12}",
        "layer", "kind", "n_i", "avg_trace", "stderr", "probes", "bits", "omega_i"
    )
    .unwrap();
    let mut weight_index = 0;
    for r in rows {
        let (b, o) = if r.kind == TraceKind::Weight {
            let i = weight_index;
            weight_index += 1;
            (
                bits.and_then(|b| b.get(i)).map_or("-".into(), u32::to_string),
                omega.and_then(|o| o.get(i)).map_or("-".into(), |o| format!("{o:.4e}")),
            )
        } else {
            ("-".into(), "-".into())
        };
        writeln!(
            t,
            "{:<8} {:<10} {:>6} {:>13.6e} {:>11.3e} {:>6} {:>5} {:>12}",
            r.layer_name,
            r.kind.as_str(),
            r.n_i,
            r.avg_trace,
            r.avg_stderr(),
            r.probes_used,
            b,
            o
        )
        .unwrap();
    }
}

pub fn report(run: &Run) -> Result<String> {
    let train: Option<TrainReport> = optional(&run.artifact(TRAIN_REPORT), read_json)?;
    let Some(train) = train else {
        return Err(CliError::MissingArtifact {
            stage: "report",
            producer: "train",
            path: run.artifact(TRAIN_REPORT),
        });
    };
    let traces = optional(&run.artifact(TRACES), |p| {
        let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
        Ok(read_trace_csv(f, p)?)
    })?;
    let plan: Option<PlanReport> = optional(&run.artifact(PLAN_REPORT), read_json)?;
    let frontier = optional(&run.artifact(FRONTIER), read_frontier)?;
    let ptq: Option<EvalReport> = optional(&run.artifact(QUANTIZE_REPORT), read_json)?;
    let ft: Option<FinetuneReport> = optional(&run.artifact(FINETUNE_REPORT), read_json)?;
    let summary: Option<Summary> = optional(&run.artifact(SUMMARY), read_json)?;

    let mut t = String::new();
    writeln!(t, "experiment {} (seed {})", run.config.experiment, run.config.seed).unwrap();
    writeln!(
        t,
        "training: loss {:.6}, accuracy {}, gradient norm {:.3e} (tolerance {:.1e}), converged {}",
        train.loss,
        acc(train.accuracy),
        train.local_min.grad_norm,
        train.grad_tol,
        if train.converged { "yes" } else { "no" }
    )
    .unwrap();
    writeln!(
        t,
        "curvature probes: min Rayleigh quotient {:.3e} over {} random directions",
        train.local_min.min_rayleigh,
        train.local_min.rayleigh_quotients.len()
    )
    .unwrap();

    if let Some(rows) = &traces {
        writeln!(t).unwrap();
        trace_table(
            &mut t,
            rows,
            plan.as_ref().map(|p| p.bits.as_slice()),
            plan.as_ref().map(|p| p.per_layer_omega.as_slice()),
        );
    }
    if let Some(p) = &plan {
        writeln!(t).unwrap();
        writeln!(
            t,
            "plan: menu {:?}, target {} bytes, chosen {:?}",
            p.menu, p.target_bytes, p.bits
        )
        .unwrap();
        writeln!(
            t,
            "      size {} of {} bytes (compression {:.2}x), omega {}",
            p.size_bytes,
            p.full_precision_bytes,
            p.compression_ratio,
            fmt_float(p.omega)
        )
        .unwrap();
        writeln!(
            t,
            "      {} admissible candidates, {} on the frontier{}",
            p.candidates,
            p.non_dominated,
            if p.truncated { " (enumeration truncated)" } else { "" }
        )
        .unwrap();
    }
    if let Some(rows) = &frontier {
        let front: Vec<&FrontierRow> = rows.iter().filter(|r| !r.dominated).collect();
        writeln!(t).unwrap();
        writeln!(t, "{:>6} {:<16} {:>10} {:>14}", "id", "bits", "size", "omega").unwrap();
        for r in front {
            writeln!(
                t,
                "{:>6} {:<16} {:>10} {:>14.6e} {}",
                r.assignment_id,
                r.bits.replace(';', ","),
                r.size_bytes,
                r.omega,
                if r.chosen { "chosen" } else { "" }
            )
            .unwrap();
        }
    }
    writeln!(t).unwrap();
    writeln!(t, "{:<22} {:>12} {:>10}", "model", "loss", "accuracy").unwrap();
    writeln!(t, "{:<22} {:>12.6} {:>10}", "full precision", train.loss, acc(train.accuracy)).unwrap();
    if let Some(q) = &ptq {
        writeln!(t, "{:<22} {:>12.6} {:>10}", "quantized", q.loss, acc(q.accuracy)).unwrap();
    }
    if let Some(f) = &ft {
        writeln!(t, "{:<22} {:>12.6} {:>10}", "quantized, fine-tuned", f.loss, acc(f.accuracy)).unwrap();
    }
    if summary.is_none() {
        writeln!(t, "(no summary yet; run `pipeline` for the full set of artifacts)").unwrap();
    }
    Ok(t)
}
