//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hessquant::ad::{
    assemble_dense, hvp_activations, hvp_activations_batch, hvp_weights, DenseOperator, FnOperator, PowerConfig,
    QuadraticBlock, QuadraticObjective,
};
use hessquant::analysis::{f1f2_demo, lemma1_check, Lemma1Config};
use hessquant::model::{
    make_synthetic, train_sgd, Activation, Layer, LayerKind, LossHead, Model, SyntheticKind, TrainConfig,
};
use hessquant::planner::{
    admissible_set, cardinality_b, cardinality_unconstrained, pareto_select, BitMenu, OrderingMode, PlanRequest,
    SensitivityOrder,
};
use hessquant::quant::{
    perturbation_l2, qat_finetune, quantize, size_bytes, QuantScheme, RangePolicy,
};
use hessquant::trace::{convergence_report, hutchinson_trace, layer_avg_traces, ProbeConfig, ProbeDistribution};
use hessquant::{rng, Tensor};
use hessquant_cli::config::{Overrides, Run};
use hessquant_cli::stages;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_1() -> Outcome {
    let b = cardinality_b(50, 4);
    check(b.to_string() == "23426", || format!("|B|(50,4) = {b}"))?;
    let u = cardinality_unconstrained(50, 4);
    check(u.to_string() == "1267650600228229401496703205376", || format!("4^50 = {u}"))?;
    Ok(format!("|B| = {b}, 4^50 = {u}"))
}

fn criterion_2() -> Outcome {
    let rep = f1f2_demo(&ProbeConfig::fixed(50, 0), &PowerConfig::default()).map_err(|e| e.to_string())?;
    for (f, exact) in rep.functions.iter().zip([101.0, 199.0]) {
        check((f.top_eigenvalue - 200.0).abs() <= 1e-8, || format!("{} top eigenvalue {}", f.name, f.top_eigenvalue))?;
        check((f.avg_trace - exact).abs() <= f.avg_trace_stderr, || {
            format!("{} avg trace {} ± {} vs {exact}", f.name, f.avg_trace, f.avg_trace_stderr)
        })?;
    }
    let [f1, f2] = &rep.functions;
    check(f2.loss_increase > f1.loss_increase, || {
        format!("loss increases {} and {}", f1.loss_increase, f2.loss_increase)
    })?;
    Ok(format!(
        "top eigenvalues {} and {}, avg traces {} and {}, loss increases {} < {}",
        f1.top_eigenvalue, f2.top_eigenvalue, f1.avg_trace, f2.avg_trace, f1.loss_increase, f2.loss_increase
    ))
}

fn random_symmetric(n: usize, seed: u64) -> DenseOperator {
    let mut r = rng::rng(seed);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = r.random_range(-1.0..1.0);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    DenseOperator::new(n, a).unwrap()
}

fn criterion_3() -> Outcome {
    let mut r = rng::rng(3);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let n = r.random_range(2..=64);
        let a = random_symmetric(n, 100 + case);
        let exact = (0..n).map(|i| a.get(i, i)).sum::<f64>();
        let est = hutchinson_trace(&a, &ProbeConfig::fixed(100, case)).map_err(|e| e.to_string())?;
        let z = (est.mean - exact).abs() / est.stderr;
        worst = worst.max(z);
        check(z <= 3.0, || format!("matrix {case} (n={n}): {} vs {exact}, {z:.2} stderr", est.mean))?;
    }
    for n in [1, 7, 64] {
        let est = hutchinson_trace(&DenseOperator::identity(n), &ProbeConfig::fixed(30, 5)).map_err(|e| e.to_string())?;
        check(est.mean == n as f64 && est.variance == 0.0, || {
            format!("identity {n}: mean {} variance {}", est.mean, est.variance)
        })?;
    }
    // Least-squares slope of mean ln(stderr) against ln(m) with Gaussian probes.
    let op = random_symmetric(32, 7);
    let ms = [8usize, 16, 32, 64, 128, 256, 512];
    let seeds = 20;
    let mut mean_log = vec![0.0; ms.len()];
    for s in 0..seeds {
        let cfg = ProbeConfig {
            distribution: ProbeDistribution::Gaussian,
            ..ProbeConfig::fixed(512, s)
        };
        let rows = convergence_report(&hutchinson_trace(&op, &cfg).map_err(|e| e.to_string())?);
        for (k, &m) in ms.iter().enumerate() {
            mean_log[k] += rows[m - 1].stderr.ln() / seeds as f64;
        }
    }
    let xs: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let xm = xs.iter().sum::<f64>() / xs.len() as f64;
    let ym = mean_log.iter().sum::<f64>() / xs.len() as f64;
    let slope = xs.iter().zip(&mean_log).map(|(x, y)| (x - xm) * (y - ym)).sum::<f64>()
        / xs.iter().map(|x| (x - xm).powi(2)).sum::<f64>();
    check((slope + 0.5).abs() <= 0.15, || format!("stderr slope {slope:.3}"))?;
    Ok(format!("worst deviation {worst:.2} stderr, identity exact, slope {slope:.3}"))
}

fn criterion_4() -> Outcome {
    let data = make_synthetic(SyntheticKind::GaussianBlobs { separation: 2.0 }, 60, 4, 3, 4).unwrap();
    let init = Model::mlp(&[4, 10, 10, 3], Activation::Tanh, LossHead::CrossEntropy, 4).unwrap();
    check(init.total_params() <= 300, || format!("{} parameters", init.total_params()))?;
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 100,
        batch_size: 20,
        ..Default::default()
    };
    let m = train_sgd(&init, &data, &cfg).map_err(|e| e.to_string())?.model;
    let x = m.flat_params();
    let f = |p: &[f64]| common::reference_loss(&m, p, &data);
    let probes = ProbeConfig {
        max_probes: 20_000,
        rel_tol: Some(0.002),
        seed: 11,
        ..Default::default()
    };
    let traces = layer_avg_traces(&m, &data, data.len(), &probes).map_err(|e| e.to_string())?;
    let mut worst_entry = 0.0f64;
    let mut worst_trace = 0.0f64;
    for layer in 0..m.num_layers() {
        let n = m.layers()[layer].num_params();
        let off = common::layer_offset(&m, layer);
        let fd = common::fd_hessian(&f, &x, &(off..off + n).collect::<Vec<_>>(), 1e-2);
        let h = assemble_dense(&FnOperator::new(n, |v: &[f64]| hvp_weights(&m, &data, layer, v)))
            .map_err(|e| e.to_string())?;
        let scale = fd.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        for r in 0..n {
            for c in 0..n {
                let err = (h.get(r, c) - fd[r][c]).abs() / fd[r][c].abs().max(ENTRY_FLOOR * scale);
                worst_entry = worst_entry.max(err);
            }
        }
        let t = traces[layer].estimate.mean;
        worst_trace = worst_trace.max(rel(t, h.trace()));
    }
    check(worst_entry < 1e-4, || format!("worst entrywise relative error {worst_entry:.2e}"))?;
    check(worst_trace <= 0.02, || format!("worst trace error {:.2}%", 100.0 * worst_trace))?;
    Ok(format!(
        "{} parameters, worst entrywise relative error {worst_entry:.2e}, worst trace error {:.2}%",
        m.total_params(),
        100.0 * worst_trace
    ))
}

/// Guards the relative error against entries that are exactly zero.
const ENTRY_FLOOR: f64 = 1e-12;

fn criterion_5() -> Outcome {
    let data = make_synthetic(SyntheticKind::GaussianBlobs { separation: 2.0 }, 40, 3, 3, 5).unwrap();
    let init = Model::mlp(&[3, 8, 8, 3], Activation::Tanh, LossHead::CrossEntropy, 5).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 50,
        batch_size: 10,
        ..Default::default()
    };
    let m = train_sgd(&init, &data, &cfg).map_err(|e| e.to_string())?.model;
    let pair = data.subset(&[3, 17]);
    let mut worst = 0.0f64;
    for j in 0..m.num_layers() - 1 {
        let w = m.layers()[j].fan_out();
        let concat = assemble_dense(&FnOperator::new(2 * w, |v: &[f64]| hvp_activations_batch(&m, &pair, j, v)))
            .map_err(|e| e.to_string())?;
        let per_input = (0..2)
            .map(|i| {
                let ex = pair.example(i);
                assemble_dense(&FnOperator::new(w, |v: &[f64]| hvp_activations(&m, &ex, j, v))).map(|h| h.trace())
            })
            .sum::<Result<f64, _>>()
            .map_err(|e| e.to_string())?
            / 2.0;
        worst = worst.max(rel(per_input, concat.trace()));
    }
    check(worst < 1e-10, || format!("relative error {worst:.2e}"))?;
    Ok(format!("activation widths 8 and 8, worst relative error {worst:.2e}"))
}

/// `Qᵀ diag(λ) Q` for a random orthogonal `Q`.
fn rotated(eigs: &[f64], seed: u64) -> DenseOperator {
    let n = eigs.len();
    let mut r = rng::rng(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 1e-6 {
            q.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    let mut a = vec![0.0; n * n];
    for (k, u) in q.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] += eigs[k] * u[i] * u[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
    }
    DenseOperator::new(n, a).unwrap()
}

fn criterion_6() -> Outcome {
    let mut r = rng::rng(6);
    let mut cases: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![200.0, 2.0], vec![200.0, 198.0])];
    for _ in 0..20 {
        let n1 = r.random_range(2..9);
        let n2 = r.random_range(2..9);
        cases.push((
            (0..n1).map(|_| r.random_range(0.0..10.0)).collect(),
            (0..n2).map(|_| r.random_range(0.0..10.0)).collect(),
        ));
    }
    let mut worst = 0.0f64;
    for (case, (e1, e2)) in cases.iter().enumerate() {
        let blocks = [(e1, 2 * case as u64), (e2, 2 * case as u64 + 1)]
            .iter()
            .map(|(e, s)| QuadraticBlock::at_minimum(format!("b{s}"), rotated(e, *s), vec![0.0; e.len()]))
            .collect();
        let obj = QuadraticObjective::new(blocks, 0.5).map_err(|e| e.to_string())?;
        let norm = r.random_range(0.01..2.0);
        let rep = lemma1_check(&obj, 0, 1, norm, &Lemma1Config::default()).map_err(|e| e.to_string())?;
        let (p, q) = (&rep.eigen_mix.first, &rep.eigen_mix.second);
        worst = worst.max(rel(p.perturbation_norm, q.perturbation_norm));
        for (pert, eigs) in [(p, e1), (q, e2)] {
            let alpha = norm / (eigs.len() as f64).sqrt();
            let closed = alpha * alpha / 2.0 * eigs.iter().sum::<f64>();
            worst = worst.max(rel(pert.loss_increase, closed));
        }
        let avg = |e: &Vec<f64>| e.iter().sum::<f64>() / e.len() as f64;
        check((p.loss_increase < q.loss_increase) == (avg(e1) < avg(e2)), || {
            format!("case {case}: increases {} and {}", p.loss_increase, q.loss_increase)
        })?;
        check(rep.eigen_mix.ordering_consistent, || format!("case {case}: ordering inconsistent"))?;
    }
    check(worst <= 1e-10, || format!("worst relative error {worst:.2e}"))?;
    Ok(format!("{} quadratics, worst relative error {worst:.2e}", cases.len()))
}

fn all_assignments(layers: usize, menu: &[u32]) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..layers {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<u32>| {
                menu.iter().map(move |&b| {
                    let mut p = prefix.clone();
                    p.push(b);
                    p
                })
            })
            .collect();
    }
    out
}

/// Ω recomputed from min/max quantization of each weight matrix.
fn reference_omega(model: &Model, traces: &[f64], bits: &[u32]) -> f64 {
    bits.iter()
        .enumerate()
        .map(|(i, &b)| {
            let w = &model.layers()[i].weight;
            let lo = w.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = w.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            traces[i] * perturbation_l2(w, &QuantScheme::new(b, lo, hi).unwrap())
        })
        .sum()
}

/// Dense layers with uniform random weights; one layer is allowed.
fn random_model(widths: &[usize], r: &mut impl Rng) -> Model {
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Layer {
            name: format!("fc{}", i + 1),
            kind: LayerKind::DenseTanh,
            weight: Tensor::matrix(w[0], w[1], (0..w[0] * w[1]).map(|_| r.random_range(-1.0..1.0)).collect()),
            bias: Tensor::zeros(&[1, w[1]]),
        })
        .collect();
    Model::new(layers, LossHead::Mse).unwrap()
}

fn criterion_7() -> Outcome {
    let mut r = rng::rng(7);
    let mut instances = 0;
    let mut counted = 0;
    for layers in 1..=5usize {
        for m in 1..=3usize {
            for _ in 0..10 {
                let traces: Vec<f64> = (0..layers).map(|_| r.random_range(0.01..5.0)).collect();
                let mut menu: Vec<u32> = Vec::new();
                while menu.len() < m {
                    let b = r.random_range(1..=8);
                    if !menu.contains(&b) {
                        menu.push(b);
                    }
                }
                let bit_menu = BitMenu::new(menu.clone()).unwrap();
                let order = SensitivityOrder::new(&traces, None, OrderingMode::Strict).unwrap();
                let admitted: Vec<Vec<u32>> =
                    all_assignments(layers, &menu).into_iter().filter(|b| order.admits(b)).collect();
                let set = admissible_set(&order, &bit_menu, None);
                check(
                    set.assignments.len() == admitted.len()
                        && cardinality_b(layers as u64, m as u64).to_string() == admitted.len().to_string(),
                    || format!("L={layers} m={m}: {} enumerated, {} admitted", set.assignments.len(), admitted.len()),
                )?;
                counted += 1;
                // A model has at least two layers, so one-layer menus only check the count.
                if layers < 2 {
                    continue;
                }
                let widths: Vec<usize> = (0..=layers).map(|_| r.random_range(2..5)).collect();
                let model = random_model(&widths, &mut r);
                let counts = model.weight_counts();
                let lo = size_bytes(&counts, &vec![bit_menu.min(); layers]);
                let hi = size_bytes(&counts, &vec![bit_menu.max(); layers]);
                let target = r.random_range(lo..=hi);
                let best = admitted
                    .iter()
                    .filter(|b| size_bytes(&counts, b) <= target)
                    .map(|b| (reference_omega(&model, &traces, b), size_bytes(&counts, b), b.clone()))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
                    .unwrap();
                let req = PlanRequest {
                    menu: &bit_menu,
                    target_bytes: target,
                    policy: RangePolicy::MinMax,
                    limit: None,
                };
                let sel = pareto_select(&model, &order, &req).map_err(|e| e.to_string())?;
                let chosen = &sel.chosen;
                let same = chosen.bits == best.2;
                let tie = (chosen.omega - best.0).abs() <= 1e-12 * best.0.abs().max(1e-300);
                check(same || tie, || {
                    format!("L={layers} m={m}: chose {:?} (Ω {}), brute force {:?} (Ω {})", chosen.bits, chosen.omega, best.2, best.0)
                })?;
                instances += 1;
            }
        }
    }
    Ok(format!(
        "{counted} admissible sets match the cardinality, {instances} selections match exhaustive search"
    ))
}

fn criterion_8() -> Outcome {
    let s = QuantScheme::new(2, -1.0, 1.0).unwrap();
    check(s.delta() == 2.0 / 3.0, || format!("Δ = {}", s.delta()))?;
    let q = quantize(&Tensor::row(vec![-1.5, -0.2, 0.3, 2.0]), &s);
    check(q.indices == vec![0, 1, 2, 3], || format!("indices {:?}", q.indices))?;
    let grid = [-1.0, 2.0 / 3.0 - 1.0, 2.0 * (2.0 / 3.0) - 1.0, 1.0];
    check(q.dequantize().data() == grid, || format!("values {:?}", q.dequantize().data()))?;

    let mut r = rng::rng(8);
    let mut values = 0;
    for _ in 0..1000 {
        let bits = r.random_range(1..=16);
        let q0 = r.random_range(-5.0..5.0);
        let s = QuantScheme::new(bits, q0, q0 + r.random_range(1e-3..10.0)).unwrap();
        for _ in 0..100 {
            let x = r.random_range(s.q0()..=s.qmax());
            let j = s.index(x);
            let v = s.quantize_value(x);
            check(j <= s.max_index() && v == s.delta() * j as f64 + s.q0(), || format!("{x} is off the grid"))?;
            check(s.quantize_value(v) == v, || format!("not idempotent at {x}"))?;
            check((v - x).abs() <= s.delta() / 2.0 * (1.0 + 1e-12), || format!("|Q({x}) − x| > Δ/2"))?;
            values += 1;
        }
    }
    Ok(format!("hand vectors exact, {values} random values"))
}

fn run_in(dir: &Path, seed: u64) -> Run {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/demo.json");
    let overrides = Overrides {
        seed: Some(seed),
        out: Some(dir.to_path_buf()),
        ..Default::default()
    };
    Run::load(&config, &overrides).unwrap()
}

/// Largest trace-order-violating assignment no bigger than `size`; ties go
/// to the lexicographically smallest bits.
fn violator(order: &SensitivityOrder, menu: &[u32], counts: &[usize], size: u64) -> Option<Vec<u32>> {
    all_assignments(counts.len(), menu)
        .into_iter()
        .filter(|b| !order.admits(b) && size_bytes(counts, b) <= size)
        .min_by(|a, b| size_bytes(counts, b).cmp(&size_bytes(counts, a)).then(a.cmp(b)))
}

fn criterion_9() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let run = run_in(dir.path(), seed);
        let err = |e: hessquant_cli::error::CliError| e.to_string();
        stages::train(&run).map_err(err)?;
        stages::trace(&run).map_err(err)?;
        let plan = stages::plan(&run).map_err(err)?;
        let selected = stages::finetune(&run).map_err(err)?;

        let model = hessquant::model::load_checkpoint(&run.artifact(stages::CHECKPOINT)).map_err(|e| e.to_string())?;
        let rows = stages::weight_traces(&run, &model, "acceptance").map_err(err)?;
        let traces: Vec<f64> = rows.iter().map(|r| r.avg_trace).collect();
        let stderr: Vec<f64> = rows.iter().map(|r| r.avg_stderr()).collect();
        let order = SensitivityOrder::new(&traces, Some(&stderr), run.config.plan.ordering).map_err(|e| e.to_string())?;
        let Some(bits) = violator(&order, &run.config.plan.bits, &model.weight_counts(), plan.size_bytes) else {
            return Err(format!("seed {seed}: no violating assignment fits {} bytes", plan.size_bytes));
        };
        let data = run.config.dataset().map_err(err)?;
        let ft = run.config.finetune_config().expect("demo config fine-tunes");
        let other = qat_finetune(&model, &data, &bits, None, &ft).map_err(|e| e.to_string())?;
        let win = selected.loss <= other.quantized_loss;
        wins += win as usize;
        lines.push(format!(
            "seed {seed}: {:?} {:.4} vs {:?} {:.4}",
            selected.bits, selected.loss, bits, other.quantized_loss
        ));
    }
    let detail = format!("{wins}/5 seeds ({})", lines.join("; "));
    check(wins >= 4, || detail.clone())?;
    Ok(detail)
}

fn pipeline(out: &Path, threads: usize) -> Result<(), String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/demo.json");
    let status = Command::new(env!("CARGO_BIN_EXE_hessquant"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .arg("pipeline")
        .env_remove(hessquant_cli::config::OUT_ENV)
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    pipeline(&a, 1)?;
    pipeline(&b, 1)?;
    pipeline(&c, 4)?;
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in &names {
        let x = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
        check(x == y, || format!("{name} differs between identical runs"))?;
    }
    let t1 = std::fs::read(a.join(stages::TRACES)).map_err(|e| e.to_string())?;
    let t4 = std::fs::read(c.join(stages::TRACES)).map_err(|e| e.to_string())?;
    check(t1 == t4, || "trace estimates differ between 1 and 4 threads".into())?;
    Ok(format!("{} artifacts byte-identical, traces identical at 4 threads", names.len()))
}

fn main() -> ExitCode {
    let criteria: [(fn() -> Outcome, Duration); 10] = [
        (criterion_1, Duration::from_secs(1)),
        (criterion_2, Duration::from_secs(1)),
        (criterion_3, Duration::from_secs(10)),
        (criterion_4, Duration::from_secs(60)),
        (criterion_5, Duration::from_secs(30)),
        (criterion_6, Duration::from_secs(1)),
        (criterion_7, Duration::from_secs(30)),
        (criterion_8, Duration::from_secs(10)),
        (criterion_9, Duration::from_secs(600)),
        (criterion_10, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (i, (f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|d| {
            if elapsed <= *limit {
                Ok(d)
            } else {
                Err(format!("{d}; took {elapsed:.2?}, limit {limit:?}"))
            }
        });
        match result {
            Ok(d) => println!("criterion {}: PASS ({d}) [{elapsed:.2?}]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL ({d}) [{elapsed:.2?}]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
