use hessquant::ad::{
    top_eigenpair, DenseOperator, HvpOperator, ModelObjective, PowerConfig, QuadraticBlock, QuadraticObjective,
};
use hessquant::analysis::{
    f1f2_demo, lemma1_check, lemma1_model, loss_landscape_grid, ordering_compare, write_landscape_csv,
    Lemma1Config,
};
use hessquant::model::{train_sgd, zoo, Dataset, Model, TrainConfig};
use hessquant::trace::{block_avg_traces, ProbeConfig};
use hessquant::{rng, Error};
use rand::Rng;

/// `Qᵀ diag(λ) Q` for a random orthogonal `Q` (Gram–Schmidt on Gaussian columns).
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

fn quadratic(blocks: &[(&str, DenseOperator)], offset: f64) -> QuadraticObjective {
    let blocks = blocks
        .iter()
        .map(|(name, h)| QuadraticBlock::at_minimum(*name, h.clone(), vec![0.0; h.dim()]))
        .collect();
    QuadraticObjective::new(blocks, offset).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn lemma1_on_rotated_quadratics() {
    let mut r = rng::rng(5);
    for case in 0..20 {
        let n1 = r.random_range(2..9);
        let n2 = r.random_range(2..9);
        let e1: Vec<f64> = (0..n1).map(|_| r.random_range(0.0..10.0)).collect();
        let e2: Vec<f64> = (0..n2).map(|_| r.random_range(0.0..10.0)).collect();
        let obj = quadratic(&[("a", rotated(&e1, case)), ("b", rotated(&e2, case + 100))], 1.5);
        let norm = r.random_range(0.01..2.0);
        let rep = lemma1_check(&obj, 0, 1, norm, &Lemma1Config::default()).unwrap();
        let (p, q) = (&rep.eigen_mix.first, &rep.eigen_mix.second);
        assert!(rel(p.perturbation_norm, q.perturbation_norm) <= 1e-10);
        assert!(rel(p.perturbation_norm, norm) <= 1e-10);
        // Closed form: α²/2 · Σλ with α = norm/√n, i.e. norm²/2 · avg trace.
        for (pert, eigs) in [(p, &e1), (q, &e2)] {
            let alpha = norm / (eigs.len() as f64).sqrt();
            let closed = alpha * alpha / 2.0 * eigs.iter().sum::<f64>();
            assert!(rel(pert.loss_increase, closed) <= 1e-10, "case {case}");
            assert!(rel(pert.alpha, alpha) <= 1e-10);
        }
        let expect_first_smaller = p.avg_trace < q.avg_trace;
        assert_eq!(p.loss_increase < q.loss_increase, expect_first_smaller);
        assert!(rep.eigen_mix.ordering_consistent);
    }
}

#[test]
fn identical_blocks_give_equal_increases() {
    let h = rotated(&[3.0, 1.0, 0.5, 7.0], 2);
    let obj = quadratic(&[("a", h.clone()), ("b", h)], 0.0);
    let rep = lemma1_check(&obj, 0, 1, 0.3, &Lemma1Config::default()).unwrap();
    let (p, q) = (&rep.eigen_mix.first, &rep.eigen_mix.second);
    assert!((p.loss_increase - q.loss_increase).abs() <= 1e-10 * p.loss_increase);
    assert!(rep.eigen_mix.ordering_consistent);
}

#[test]
fn landscape_is_even_and_matches_closed_form() {
    let obj = quadratic(&[("a", rotated(&[9.0, 4.0, 1.0], 3)), ("b", rotated(&[1.0, 1.0], 4))], 2.0);
    let power = PowerConfig {
        tol: 1e-13,
        ..Default::default()
    };
    let grid = loss_landscape_grid(&obj, 0, 0.5, 7, &power).unwrap();
    let n = grid.eps.len();
    assert_eq!(grid.losses[n / 2][n / 2], grid.base_loss);
    assert_eq!(grid.base_loss, 2.0);
    for a in 0..n {
        for b in 0..n {
            assert_eq!(grid.losses[a][b], grid.losses[n - 1 - a][n - 1 - b]);
            let (e1, e2) = (grid.eps[a], grid.eps[b]);
            let closed = 2.0 + 0.5 * (9.0 * e1 * e1 + 4.0 * e2 * e2);
            assert!((grid.losses[a][b] - closed).abs() <= 1e-10 * closed);
        }
    }
    let mut csv = Vec::new();
    write_landscape_csv(&grid, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + n * n);
    assert!(text.starts_with("eps1,eps2,loss\n"));
    assert!(loss_landscape_grid(&obj, 0, 0.5, 4, &power).is_err());
}

#[test]
fn f1f2_orderings() {
    let rep = f1f2_demo(&ProbeConfig::fixed(50, 0), &PowerConfig::default()).unwrap();
    let [f1, f2] = &rep.functions;
    assert!((f1.top_eigenvalue - 200.0).abs() <= 1e-8 && (f2.top_eigenvalue - 200.0).abs() <= 1e-8);
    assert_eq!((f1.exact_avg_trace, f2.exact_avg_trace), (101.0, 199.0));
    assert!(rep.second_is_more_sensitive);
    let cmp = ordering_compare(
        &[f1.avg_trace, f2.avg_trace],
        &[f1.top_eigenvalue, f2.top_eigenvalue],
        1e-8,
    )
    .unwrap();
    assert_eq!(cmp.eigenvalue_order, vec![vec![0, 1]]);
    assert_eq!(cmp.trace_order, vec![vec![1], vec![0]]);
    assert_eq!(cmp.kendall_tau_distance, 1);

    let same = ordering_compare(&[2.0; 4], &[5.0; 4], 1e-12).unwrap();
    assert_eq!(same.trace_order, vec![vec![0, 1, 2, 3]]);
    assert_eq!(same.eigenvalue_order, vec![vec![0, 1, 2, 3]]);
    assert_eq!(same.kendall_tau_distance, 0);
}

#[test]
fn designed_spectra_disagree() {
    // avg traces 4, 6, 3 but top eigenvalues 10, 6, 8.
    let obj = quadratic(
        &[
            ("spiky", rotated(&[10.0, 1.0, 1.0], 7)),
            ("flat", rotated(&[6.0, 6.0, 6.0], 8)),
            ("narrow", rotated(&[8.0, 0.5, 0.5], 9)),
        ],
        0.0,
    );
    let traces: Vec<f64> = block_avg_traces(&obj, &ProbeConfig::fixed(400, 1))
        .unwrap()
        .iter()
        .map(|t| t.estimate.avg_trace)
        .collect();
    let tops: Vec<f64> = obj
        .blocks()
        .iter()
        .map(|b| top_eigenpair(&b.hessian, &PowerConfig::default()).unwrap().value)
        .collect();
    for (t, exact) in traces.iter().zip([4.0, 6.0, 3.0]) {
        assert!(rel(*t, exact) < 0.1, "{t}");
    }
    let cmp = ordering_compare(&traces, &tops, 1e-6).unwrap();
    assert_eq!(cmp.trace_order, vec![vec![1], vec![0], vec![2]]);
    assert_eq!(cmp.eigenvalue_order, vec![vec![0], vec![2], vec![1]]);
    assert_eq!(cmp.discordant_pairs, vec![(0, 1), (1, 2)]);
    assert_eq!(cmp.kendall_tau_distance, 2);
    assert_eq!(cmp.disagreeing_layers, vec![0, 1, 2]);
}

#[test]
fn unconverged_model_is_refused() {
    let (spec, dspec) = zoo("regression-mlp").unwrap();
    let data = dspec.generate(0).unwrap();
    let m = spec.build(0).unwrap();
    match lemma1_model(&m, &data, (0, 1), 1e-2, 1e-4, None, &Lemma1Config::default()) {
        Err(Error::NotConverged { grad_norm, threshold }) => {
            assert!(grad_norm > threshold);
        }
        other => panic!("{other:?}"),
    }
}

fn converged_regression_mlp(seed: u64) -> (Model, Dataset) {
    let (spec, dspec) = zoo("regression-mlp").unwrap();
    let data = dspec.generate(seed).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 0.05,
        newton_steps: 400,
        seed,
        ..Default::default()
    };
    let out = train_sgd(&spec.build(seed).unwrap(), &data, &cfg).unwrap();
    assert!(out.converged, "seed {seed}: grad {}", out.grad_norm);
    (out.model, data)
}

#[test]
fn lemma1_statistics_on_trained_models() {
    // Regression values over 5 seeds × 3 layer pairs of the trained
    // regression MLP, perturbation norm 1e-2·min‖W‖: the eigen-mix ordering
    // held on 15/15 pairs, quantization-shaped perturbations on 10/15, and the
    // higher-trace layer had the larger landscape curvature in 3/5 seeds.
    let mut consistent = 0;
    let mut total = 0;
    let mut shaped_consistent = 0;
    let mut curvature_agrees = 0;
    for seed in 0..5 {
        let (m, data) = converged_regression_mlp(seed);
        let norms: Vec<f64> = m
            .layers()
            .iter()
            .map(|l| l.weight.data().iter().map(|w| w * w).sum::<f64>().sqrt())
            .collect();
        let mut traces = vec![0.0; m.num_layers()];
        for i in 0..m.num_layers() {
            for j in i + 1..m.num_layers() {
                let norm = 1e-2 * norms[i].min(norms[j]);
                let rep = lemma1_model(&m, &data, (i, j), norm, 1e-4, Some(4), &Lemma1Config::default()).unwrap();
                let (p, q) = (&rep.eigen_mix.first, &rep.eigen_mix.second);
                assert!(rel(p.perturbation_norm, q.perturbation_norm) <= 1e-10);
                assert!(p.exact_trace && q.exact_trace);
                traces[i] = p.avg_trace;
                traces[j] = q.avg_trace;
                total += 1;
                consistent += rep.eigen_mix.ordering_consistent as usize;
                shaped_consistent += rep.quantization_shaped.unwrap().ordering_consistent as usize;
            }
        }
        let obj = ModelObjective::new(m.clone(), data.clone()).unwrap();
        let hi = (0..traces.len()).max_by(|&a, &b| traces[a].total_cmp(&traces[b])).unwrap();
        let lo = (0..traces.len()).min_by(|&a, &b| traces[a].total_cmp(&traces[b])).unwrap();
        let power = PowerConfig::default();
        let lap = |b| loss_landscape_grid(&obj, b, 0.05, 5, &power).unwrap().center_laplacian();
        curvature_agrees += (lap(hi) > lap(lo)) as usize;
    }
    assert!(consistent * 10 >= total * 9, "{consistent}/{total}");
    assert!(shaped_consistent * 3 >= total * 2, "{shaped_consistent}/{total}");
    assert!(curvature_agrees >= 3, "{curvature_agrees}/5");
}
