//! Pipeline stages. Each stage reads its inputs from the output directory and
//! writes its artifacts there, so running the stages one by one is the same as
//! running the pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use hessquant::ad::eval_loss;
use hessquant::model::{load_checkpoint, save_checkpoint, train_sgd, verify_local_min, CheckpointFile, Model};
use hessquant::planner::{pareto_select, write_frontier_csv, OrderingMode, PlanRequest, Selection, SensitivityOrder};
use hessquant::quant::{evaluate_quantized, model_size_bytes, qat_finetune, weight_scheme, AssignmentFile};
use hessquant::trace::{
    activation_avg_traces, layer_avg_traces, read_trace_csv, write_trace_csv, TraceKind, TraceRow,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Run;
use crate::error::{CliError, Result};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_REPORT: &str = "train.json";
pub const TRACES: &str = "traces.csv";
pub const FRONTIER: &str = "frontier.csv";
pub const ASSIGNMENT: &str = "assignment.json";
pub const PLAN_REPORT: &str = "plan.json";
pub const QUANTIZED_CHECKPOINT: &str = "quantized_checkpoint.json";
pub const QUANTIZE_REPORT: &str = "quantize.json";
pub const FINETUNED_CHECKPOINT: &str = "finetuned_checkpoint.json";
pub const FINETUNE_REPORT: &str = "finetune.json";
pub const SUMMARY: &str = "summary.json";
pub const STAGE_MARKER: &str = "stage.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalMinSummary {
    pub grad_norm: f64,
    pub gradient_ok: bool,
    pub min_rayleigh: f64,
    pub rayleigh_quotients: Vec<f64>,
    pub psd_check_is_probabilistic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub newton_steps_run: usize,
    pub converged: bool,
    pub grad_tol: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub local_min: LocalMinSummary,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanReport {
    pub target_bytes: u64,
    pub full_precision_bytes: u64,
    pub menu: Vec<u32>,
    pub ordering: OrderingMode,
    /// Layer indices from most to least sensitive.
    pub sensitivity_order: Vec<usize>,
    pub bits: Vec<u32>,
    pub size_bytes: u64,
    pub compression_ratio: f64,
    pub omega: f64,
    pub per_layer_omega: Vec<f64>,
    pub candidates: usize,
    pub non_dominated: usize,
    pub truncated: bool,
    pub negative_traces: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub bits: Vec<u32>,
    pub activation_bits: Option<Vec<u32>>,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneReport {
    pub bits: Vec<u32>,
    pub activation_bits: Option<Vec<u32>>,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// End-of-pipeline summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub experiment: String,
    pub seed: u64,
    pub converged: bool,
    pub baseline_loss: f64,
    pub baseline_accuracy: Option<f64>,
    /// Quantized model before any fine-tuning.
    pub post_training_loss: f64,
    pub post_training_accuracy: Option<f64>,
    pub finetuned: bool,
    /// Final quantized model: fine-tuned when fine-tuning ran.
    pub quantized_loss: f64,
    pub quantized_accuracy: Option<f64>,
    pub bits: Vec<u32>,
    pub activation_bits: Option<Vec<u32>>,
    pub size_bytes: u64,
    pub full_precision_bytes: u64,
    pub compression_ratio: f64,
    pub omega: f64,
}

/// Which stages finished and which one failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageMarker {
    pub completed: Vec<String>,
    pub failed: Option<FailedStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailedStage {
    pub stage: String,
    pub error: String,
    pub exit_code: u8,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| hessquant::Error::json(path, &text, &e).into())
}

/// `path` if it exists, or a dependency error naming the stage that makes it.
fn require(run: &Run, name: &str, stage: &'static str, producer: &'static str) -> Result<PathBuf> {
    let path = run.artifact(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { stage, producer, path })
    }
}

fn ensure_out_dir(run: &Run) -> Result<()> {
    fs::create_dir_all(&run.out_dir).map_err(|e| CliError::io(&run.out_dir, e))
}

fn trained_model(run: &Run, stage: &'static str) -> Result<Model> {
    Ok(load_checkpoint(&require(run, CHECKPOINT, stage, "train")?)?)
}

fn assignment(run: &Run, model: &Model, stage: &'static str) -> Result<(Vec<u32>, Option<Vec<u32>>)> {
    let file: AssignmentFile = read_json(&require(run, ASSIGNMENT, stage, "plan")?)?;
    file.check(model)?;
    let activation_bits = run
        .config
        .activation_bits
        .clone()
        .or(file.activation_bits.clone());
    Ok((file.bits(), activation_bits))
}

pub fn train(run: &Run) -> Result<TrainReport> {
    ensure_out_dir(run)?;
    let cfg = &run.config;
    let data = cfg.dataset()?;
    let tc = cfg.train_config();
    let out = train_sgd(&cfg.initial_model(&run.base_dir)?, &data, &tc)?;
    let lm = verify_local_min(&out.model, &data, tc.grad_tol, cfg.verify.probe_dirs, cfg.seed_for("verify"))?;
    let report = TrainReport {
        epochs_run: out.epochs_run,
        newton_steps_run: out.newton_steps_run,
        converged: out.converged,
        grad_tol: tc.grad_tol,
        loss: eval_loss(&out.model, &data)?,
        accuracy: out.model.accuracy(&data)?,
        local_min: LocalMinSummary {
            grad_norm: lm.grad_norm,
            gradient_ok: lm.gradient_ok,
            min_rayleigh: lm.min_rayleigh,
            rayleigh_quotients: lm.rayleigh_quotients,
            psd_check_is_probabilistic: lm.psd_check_is_probabilistic,
        },
        loss_history: out.loss_history,
    };
    save_checkpoint(&out.model, &run.artifact(CHECKPOINT))?;
    write_json(&run.artifact(TRAIN_REPORT), &report)?;
    Ok(report)
}

/// Weight traces for every layer, followed by activation traces when configured.
pub fn trace(run: &Run) -> Result<Vec<TraceRow>> {
    let model = trained_model(run, "trace")?;
    let cfg = &run.config;
    let data = cfg.dataset()?;
    let probes = cfg.probe_config()?;
    let batch = cfg.trace.batch_size.unwrap_or(data.len().min(256));
    let mut traces = layer_avg_traces(&model, &data, batch, &probes)?;
    if let Some(n) = cfg.trace.activation_inputs {
        let act = activation_avg_traces(&model, &data, n, &probes)?;
        for (layer, why) in &act.skipped {
            eprintln!("note: no activation trace for layer {layer}: {why}");
        }
        traces.extend(act.traces);
    }
    let path = run.artifact(TRACES);
    let mut buf = Vec::new();
    write_trace_csv(&traces, &mut buf)?;
    fs::write(&path, &buf).map_err(|e| CliError::io(&path, e))?;
    Ok(read_trace_csv(&buf[..], &path)?)
}

/// Weight-trace rows of `traces.csv`, checked against the model's layers.
pub fn weight_traces(run: &Run, model: &Model, stage: &'static str) -> Result<Vec<TraceRow>> {
    let path = require(run, TRACES, stage, "trace")?;
    let file = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let rows: Vec<TraceRow> = read_trace_csv(file, &path)?
        .into_iter()
        .filter(|r| r.kind == TraceKind::Weight)
        .collect();
    let names: Vec<&str> = model.layers().iter().map(|l| l.name.as_str()).collect();
    let found: Vec<&str> = rows.iter().map(|r| r.layer_name.as_str()).collect();
    let indices_ok = rows.iter().enumerate().all(|(i, r)| r.layer_index == i);
    if names != found || !indices_ok {
        return Err(CliError::Artifact {
            path,
            message: format!("weight traces for layers {found:?} do not match the model's layers {names:?}"),
        });
    }
    Ok(rows)
}

pub fn select(run: &Run, model: &Model, rows: &[TraceRow]) -> Result<(Selection, SensitivityOrder, u64)> {
    let cfg = &run.config;
    let traces: Vec<f64> = rows.iter().map(|r| r.avg_trace).collect();
    let stderr: Vec<f64> = rows.iter().map(TraceRow::avg_stderr).collect();
    let order = SensitivityOrder::new(&traces, Some(&stderr), cfg.plan.ordering)?;
    let full = model_size_bytes(model, &vec![32; model.num_layers()])?.full_precision_bytes;
    let target = cfg.target_bytes(full);
    let menu = cfg.menu()?;
    let req = PlanRequest {
        menu: &menu,
        target_bytes: target,
        policy: cfg.plan.range_policy,
        limit: cfg.plan.limit,
    };
    Ok((pareto_select(model, &order, &req)?, order, target))
}

pub fn plan(run: &Run) -> Result<PlanReport> {
    let model = trained_model(run, "plan")?;
    let rows = weight_traces(run, &model, "plan")?;
    let (sel, order, target) = select(run, &model, &rows)?;
    if sel.negative_traces {
        eprintln!("note: some average traces are negative; the ordering uses the raw signed values");
    }
    if sel.truncated {
        eprintln!("note: enumeration stopped at the configured limit");
    }
    let size = model_size_bytes(&model, &sel.chosen.bits)?;
    let path = run.artifact(FRONTIER);
    let mut buf = Vec::new();
    write_frontier_csv(&sel.frontier, &mut buf)?;
    fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
    let mut file = AssignmentFile::new(&model, &sel.chosen.bits);
    file.activation_bits = run.config.activation_bits.clone();
    write_json(&run.artifact(ASSIGNMENT), &file)?;
    let report = PlanReport {
        target_bytes: target,
        full_precision_bytes: size.full_precision_bytes,
        menu: run.config.plan.bits.clone(),
        ordering: run.config.plan.ordering,
        sensitivity_order: order.sensitivity_order().to_vec(),
        bits: sel.chosen.bits.clone(),
        size_bytes: size.bytes,
        compression_ratio: size.compression_ratio,
        omega: sel.chosen.omega,
        per_layer_omega: sel.chosen.per_layer_omega.clone(),
        candidates: sel.frontier.len(),
        non_dominated: sel.frontier.iter().filter(|p| !p.dominated).count(),
        truncated: sel.truncated,
        negative_traces: sel.negative_traces,
    };
    write_json(&run.artifact(PLAN_REPORT), &report)?;
    Ok(report)
}

/// Checkpoint of `model` with weights snapped to `bits` and the schemes recorded.
pub fn quantized_export(model: &Model, bits: &[u32], run: &Run) -> Result<CheckpointFile> {
    let mut file = CheckpointFile::from_model(model);
    for ((record, layer), &b) in file.layers.iter_mut().zip(model.layers()).zip(bits) {
        if let Some(s) = weight_scheme(&layer.weight, b, run.config.plan.range_policy)? {
            record.weights = s.fake_quantize(&layer.weight).into_data();
            record.scheme = Some(s);
        }
    }
    Ok(file)
}

pub fn quantize(run: &Run) -> Result<EvalReport> {
    let model = trained_model(run, "quantize")?;
    let (bits, activation_bits) = assignment(run, &model, "quantize")?;
    let data = run.config.dataset()?;
    let policy = run.config.plan.range_policy;
    let (loss, accuracy) = evaluate_quantized(&model, &data, &bits, activation_bits.as_deref(), policy)?;
    quantized_export(&model, &bits, run)?.write(&run.artifact(QUANTIZED_CHECKPOINT))?;
    let report = EvalReport {
        bits,
        activation_bits,
        loss,
        accuracy,
    };
    write_json(&run.artifact(QUANTIZE_REPORT), &report)?;
    Ok(report)
}

pub fn finetune(run: &Run) -> Result<FinetuneReport> {
    let model = trained_model(run, "finetune")?;
    let (bits, activation_bits) = assignment(run, &model, "finetune")?;
    let data = run.config.dataset()?;
    let mut cfg = run.config.clone();
    cfg.finetune.get_or_insert_with(Default::default);
    let ft = cfg.finetune_config().expect("set above");
    let out = qat_finetune(&model, &data, &bits, activation_bits.as_deref(), &ft)?;
    let mut file = CheckpointFile::from_model(&out.quantized_model);
    for (record, scheme) in file.layers.iter_mut().zip(&out.schemes) {
        record.scheme = *scheme;
    }
    file.write(&run.artifact(FINETUNED_CHECKPOINT))?;
    let report = FinetuneReport {
        bits,
        activation_bits,
        epochs: ft.epochs,
        loss_history: out.loss_history,
        loss: out.quantized_loss,
        accuracy: out.quantized_accuracy,
    };
    write_json(&run.artifact(FINETUNE_REPORT), &report)?;
    Ok(report)
}

pub fn summarize(run: &Run) -> Result<Summary> {
    let train: TrainReport = read_json(&require(run, TRAIN_REPORT, "summary", "train")?)?;
    let plan: PlanReport = read_json(&require(run, PLAN_REPORT, "summary", "plan")?)?;
    let ptq: EvalReport = read_json(&require(run, QUANTIZE_REPORT, "summary", "quantize")?)?;
    let ft: Option<FinetuneReport> = match run.config.finetune {
        Some(_) => Some(read_json(&require(run, FINETUNE_REPORT, "summary", "finetune")?)?),
        None => None,
    };
    let (quantized_loss, quantized_accuracy) = match &ft {
        Some(f) => (f.loss, f.accuracy),
        None => (ptq.loss, ptq.accuracy),
    };
    let summary = Summary {
        experiment: run.config.experiment.clone(),
        seed: run.config.seed,
        converged: train.converged,
        baseline_loss: train.loss,
        baseline_accuracy: train.accuracy,
        post_training_loss: ptq.loss,
        post_training_accuracy: ptq.accuracy,
        finetuned: ft.is_some(),
        quantized_loss,
        quantized_accuracy,
        bits: plan.bits,
        activation_bits: ptq.activation_bits,
        size_bytes: plan.size_bytes,
        full_precision_bytes: plan.full_precision_bytes,
        compression_ratio: plan.compression_ratio,
        omega: plan.omega,
    };
    write_json(&run.artifact(SUMMARY), &summary)?;
    Ok(summary)
}

/// Runs every stage in order, recording progress in the stage marker. On
/// failure the artifacts of completed stages are kept.
pub fn pipeline(run: &Run) -> Result<Summary> {
    ensure_out_dir(run)?;
    let marker = run.artifact(STAGE_MARKER);
    let mut state = StageMarker {
        completed: Vec::new(),
        failed: None,
    };
    write_json(&marker, &state)?;
    type Stage = fn(&Run) -> Result<()>;
    let mut stages: Vec<(&str, Stage)> = vec![
        ("train", |r| train(r).map(drop)),
        ("trace", |r| trace(r).map(drop)),
        ("plan", |r| plan(r).map(drop)),
        ("quantize", |r| quantize(r).map(drop)),
    ];
    if run.config.finetune.is_some() {
        stages.push(("finetune", |r| finetune(r).map(drop)));
    }
    stages.push(("summary", |r| summarize(r).map(drop)));
    for (name, stage) in stages {
        if let Err(e) = stage(run) {
            state.failed = Some(FailedStage {
                stage: name.into(),
                error: e.to_string(),
                exit_code: e.exit_code(),
            });
            write_json(&marker, &state)?;
            return Err(e);
        }
        state.completed.push(name.into());
        write_json(&marker, &state)?;
    }
    read_json(&run.artifact(SUMMARY))
}
