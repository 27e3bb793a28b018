//! Matrix-free symmetric operators and the eigen-solvers built on them.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

/// A symmetric linear operator available only through products `v ↦ Hv`.
pub trait HvpOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl<T: HvpOperator + ?Sized> HvpOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        (**self).apply(v)
    }
}

fn check_dim(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Explicit row-major `n × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    n: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::Shape(format!(
                "{} entries for a {n}×{n} matrix",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        Self { n, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// Eigenvalues in descending order with matching unit eigenvectors.
    pub fn symmetric_eigen(&self) -> Eigendecomposition {
        let m = DMatrix::from_row_slice(self.n, self.n, &self.data);
        // Symmetrize away roundoff from assembly.
        let m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        Eigendecomposition {
            values: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
            vectors: order
                .iter()
                .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
                .collect(),
        }
    }
}

impl HvpOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n, v)?;
        Ok(self.data.chunks(self.n).map(|row| dot(row, v)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Eigendecomposition {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Wraps a closure as an operator.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> HvpOperator for FnOperator<F>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v)?;
        (self.f)(v)
    }
}

/// `H − Σ λ_k u_k u_kᵀ` for previously found eigenpairs.
pub struct Deflated<'a, O: ?Sized> {
    inner: &'a O,
    pairs: Vec<(f64, Vec<f64>)>,
}

impl<'a, O: HvpOperator + ?Sized> Deflated<'a, O> {
    pub fn new(inner: &'a O, pairs: Vec<(f64, Vec<f64>)>) -> Self {
        Self { inner, pairs }
    }
}

impl<O: HvpOperator + ?Sized> HvpOperator for Deflated<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.inner.apply(v)?;
        for (lambda, u) in &self.pairs {
            let c = lambda * dot(u, v);
            for (o, ui) in out.iter_mut().zip(u) {
                *o -= c * ui;
            }
        }
        Ok(out)
    }
}

/// Columns `H e_k` assembled into a dense matrix.
pub fn assemble_dense<O: HvpOperator + ?Sized>(op: &O) -> Result<DenseOperator> {
    let n = op.dim();
    let mut data = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for k in 0..n {
        e[k] = 1.0;
        let col = op.apply(&e)?;
        e[k] = 0.0;
        for (r, x) in col.into_iter().enumerate() {
            data[r * n + k] = x;
        }
    }
    DenseOperator::new(n, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenStatus {
    Converged,
    MaxIterations,
    ZeroOperator,
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub status: EigenStatus,
}

impl EigenPair {
    pub fn converged(&self) -> bool {
        self.status == EigenStatus::Converged
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerConfig {
    pub max_iters: usize,
    /// Stop once `‖Hv − λv‖ / |λ| ≤ tol`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            tol: 1e-10,
            seed: 0,
        }
    }
}

/// Dominant (largest-magnitude) eigenpair by power iteration from a seeded
/// Gaussian start. The eigenvalue is the Rayleigh quotient of the final iterate.
pub fn top_eigenpair<O: HvpOperator + ?Sized>(op: &O, cfg: &PowerConfig) -> Result<EigenPair> {
    let n = op.dim();
    if n == 0 {
        return Err(Error::Shape("operator has dimension 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);

    let mut lambda = 0.0;
    for it in 1..=cfg.max_iters {
        let w = op.apply(&v)?;
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(EigenPair {
                value: 0.0,
                vector: v,
                iterations: it,
                status: EigenStatus::ZeroOperator,
            });
        }
        lambda = dot(&v, &w);
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if lambda != 0.0 && residual <= cfg.tol * lambda.abs() {
            return Ok(EigenPair {
                value: lambda,
                vector: v,
                iterations: it,
                status: EigenStatus::Converged,
            });
        }
        v = w;
        v.iter_mut().for_each(|x| *x /= wn);
    }
    Ok(EigenPair {
        value: lambda,
        vector: v,
        iterations: cfg.max_iters,
        status: EigenStatus::MaxIterations,
    })
}

/// The `k` dominant eigenpairs by repeated deflation.
pub fn top_eigenpairs<O: HvpOperator + ?Sized>(
    op: &O,
    k: usize,
    cfg: &PowerConfig,
) -> Result<Vec<EigenPair>> {
    let mut found: Vec<EigenPair> = Vec::with_capacity(k);
    for i in 0..k.min(op.dim()) {
        let pairs = found
            .iter()
            .map(|p| (p.value, p.vector.clone()))
            .collect();
        let deflated = Deflated::new(op, pairs);
        let c = PowerConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..*cfg
        };
        found.push(top_eigenpair(&deflated, &c)?);
    }
    Ok(found)
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
