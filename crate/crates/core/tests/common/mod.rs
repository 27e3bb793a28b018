//! Reference implementations shared by the integration tests. Nothing here
//! goes through the autodiff tape.
#![allow(dead_code)]

use hessquant::model::{LayerKind, LossHead, Model, Targets};
use hessquant::model::Dataset;

/// Plain-loop forward pass and mean loss of an MLP given its flat parameters
/// (`[W_1 row-major, b_1, W_2, b_2, …]`).
pub fn reference_loss(model: &Model, params: &[f64], data: &Dataset) -> f64 {
    let n = data.len();
    let d_in = model.input_dim();
    let mut total = 0.0;
    for r in 0..n {
        let mut h: Vec<f64> = data.inputs.data()[r * d_in..(r + 1) * d_in].to_vec();
        let mut off = 0;
        for layer in model.layers() {
            let (fi, fo) = (layer.fan_in(), layer.fan_out());
            let w = &params[off..off + fi * fo];
            let b = &params[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let mut z = b.to_vec();
            for (i, hi) in h.iter().enumerate() {
                for j in 0..fo {
                    z[j] += hi * w[i * fo + j];
                }
            }
            h = match layer.kind {
                LayerKind::Dense => z,
                LayerKind::DenseRelu => z.into_iter().map(|v| v.max(0.0)).collect(),
                LayerKind::DenseTanh => z.into_iter().map(f64::tanh).collect(),
            };
        }
        total += match (model.head(), &data.targets) {
            (LossHead::CrossEntropy, Targets::Classes(labels)) => {
                let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - h[labels[r]]
            }
            (LossHead::Mse, Targets::Values(y)) => h
                .iter()
                .zip(y.row_slice(r))
                .map(|(o, t)| (o - t) * (o - t))
                .sum(),
            _ => panic!("head/target mismatch"),
        };
    }
    total / n as f64
}

/// Offset of layer `layer`'s parameters within the flat vector.
pub fn layer_offset(model: &Model, layer: usize) -> usize {
    model.param_counts()[..layer].iter().sum()
}

/// Central-difference gradient of `f` with Richardson extrapolation.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let d = |i: usize, h: f64| {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    };
    (0..x.len())
        .map(|i| (4.0 * d(i, h / 2.0) - d(i, h)) / 3.0)
        .collect()
}

/// Second-difference Hessian of `f` over coordinates `idx`, Richardson-extrapolated.
pub fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], idx: &[usize], h: f64) -> Vec<Vec<f64>> {
    let at = |i: usize, si: f64, j: usize, sj: f64| {
        let mut p = x.to_vec();
        p[i] += si;
        p[j] += sj;
        f(&p)
    };
    let d = |i: usize, j: usize, h: f64| {
        (at(i, h, j, h) - at(i, h, j, -h) - at(i, -h, j, h) + at(i, -h, j, -h)) / (4.0 * h * h)
    };
    idx.iter()
        .map(|&i| idx.iter().map(|&j| (4.0 * d(i, j, h / 2.0) - d(i, j, h)) / 3.0).collect())
        .collect()
}

/// Jacobi eigenvalue sweep on a small symmetric matrix; returns the eigenvalues.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}
