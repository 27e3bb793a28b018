use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{eval_loss, hvp_full, loss_and_grad, Block, FnOperator, HvpOperator};
use crate::error::{Error, Result};
use crate::model::{Dataset, Model};
use crate::rng;
use crate::tensor::{dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Mini-batch size `N_B`.
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the full-batch gradient norm is at most this.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    /// Trust-region Newton-CG iterations run after SGD if the gradient
    /// tolerance has not been reached (0 disables refinement).
    #[serde(default)]
    pub newton_steps: usize,
}

fn default_grad_tol() -> f64 {
    1e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            grad_tol: default_grad_tol(),
            newton_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.batch_size > n {
            return bad(format!("batch size {} not in 1..={n}", self.batch_size));
        }
        if !(self.grad_tol > 0.0) {
            return bad(format!("gradient tolerance {} must be positive", self.grad_tol));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate must be positive and momentum in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Full-batch loss before training and after every epoch.
    pub loss_history: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
    pub epochs_run: usize,
    pub newton_steps_run: usize,
}

/// Mini-batch SGD with heavy-ball momentum. Batches are drawn from a seeded
/// shuffle each epoch; training stops early once the full-batch gradient
/// norm reaches `grad_tol`.
pub fn train_sgd(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(data.len())?;
    let mut model = model.clone();
    let mut rng = rng::rng(cfg.seed);
    let mut params = model.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();

    let (loss0, g0) = loss_and_grad(&model, data, Block::All)?;
    let mut history = vec![loss0];
    let mut grad_norm = norm(&g0);
    if !loss0.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            stage: "training",
            step: 0,
            last_loss: None,
        });
    }
    let mut epochs_run = 0;
    let mut step = 0;

    while epochs_run < cfg.epochs && grad_norm > cfg.grad_tol {
        if cfg.batch_size < data.len() {
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch;
            let batch_ref = if chunk.len() == data.len() {
                data
            } else {
                batch = data.subset(chunk);
                &batch
            };
            let (loss, g) = loss_and_grad(&model, batch_ref, Block::All)?;
            if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    stage: "training",
                    step,
                    last_loss: history.last().copied(),
                });
            }
            for ((p, v), gi) in params.iter_mut().zip(&mut velocity).zip(&g) {
                *v = cfg.momentum * *v + gi;
                *p -= cfg.learning_rate * *v;
            }
            model.set_flat_params(&params)?;
        }
        epochs_run += 1;
        let (loss, g) = loss_and_grad(&model, data, Block::All)?;
        grad_norm = norm(&g);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                stage: "training",
                step,
                last_loss: history.last().copied(),
            });
        }
        history.push(loss);
    }

    let mut newton_steps_run = 0;
    if cfg.newton_steps > 0 && grad_norm > cfg.grad_tol {
        let r = newton_refine(&model, data, cfg.grad_tol, cfg.newton_steps)?;
        model = r.model;
        grad_norm = r.grad_norm;
        newton_steps_run = r.steps;
        history.extend(r.loss_history);
    }

    Ok(TrainOutcome {
        model,
        loss_history: history,
        grad_norm,
        converged: grad_norm <= cfg.grad_tol,
        epochs_run,
        newton_steps_run,
    })
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub model: Model,
    /// Full-batch loss after each accepted step.
    pub loss_history: Vec<f64>,
    pub grad_norm: f64,
    pub steps: usize,
}

/// Full-batch trust-region Newton method with a Steihaug conjugate-gradient
/// inner solver on exact Hessian-vector products. Stops when the gradient
/// norm reaches `grad_tol`, after `max_steps` outer iterations, or when the
/// trust region collapses.
pub fn newton_refine(model: &Model, data: &Dataset, grad_tol: f64, max_steps: usize) -> Result<RefineOutcome> {
    let mut model = model.clone();
    let mut params = model.flat_params();
    let (mut loss, mut g) = loss_and_grad(&model, data, Block::All)?;
    let mut radius = 1.0;
    let mut history = Vec::new();
    let mut steps = 0;
    while steps < max_steps && norm(&g) > grad_tol && radius > 1e-12 {
        steps += 1;
        let hvp = |v: &[f64]| hvp_full(&model, data, v);
        let p = steihaug(&g, radius, &hvp)?;
        let hp = hvp(&p)?;
        let predicted = -(dot(&g, &p) + 0.5 * dot(&p, &hp));
        let trial: Vec<f64> = params.iter().zip(&p).map(|(a, b)| a + b).collect();
        let mut candidate = model.clone();
        candidate.set_flat_params(&trial)?;
        let (new_loss, new_g) = loss_and_grad(&candidate, data, Block::All)?;
        if !new_loss.is_finite() {
            radius *= 0.25;
            continue;
        }
        let actual = loss - new_loss;
        let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };
        let step_norm = norm(&p);
        if rho < 0.25 {
            radius = 0.25 * step_norm.min(radius);
        } else if rho > 0.75 && step_norm >= 0.99 * radius {
            radius = (2.0 * radius).min(1e3);
        }
        // Near a minimum the reduction is lost in rounding; a smaller
        // gradient is then the better acceptance signal.
        if rho > 1e-4 || (actual.abs() <= 1e-12 * loss.abs().max(1.0) && norm(&new_g) < norm(&g)) {
            params = trial;
            model = candidate;
            loss = new_loss;
            g = new_g;
            history.push(loss);
        }
    }
    Ok(RefineOutcome {
        grad_norm: norm(&g),
        model,
        loss_history: history,
        steps,
    })
}

/// Approximately minimizes `gᵀp + ½pᵀHp` over `‖p‖ ≤ radius`.
fn steihaug(g: &[f64], radius: f64, hvp: &dyn Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let n = g.len();
    let gnorm = norm(g);
    let tol = gnorm * gnorm.sqrt().min(0.5);
    let mut z = vec![0.0; n];
    let mut r = g.to_vec();
    let mut d: Vec<f64> = r.iter().map(|x| -x).collect();
    let to_boundary = |z: &[f64], d: &[f64]| -> Vec<f64> {
        // Positive root of ‖z + τd‖ = radius.
        let (a, b, c) = (dot(d, d), 2.0 * dot(z, d), dot(z, z) - radius * radius);
        let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
        z.iter().zip(d).map(|(zi, di)| zi + tau * di).collect()
    };
    for _ in 0..2 * n.max(1) {
        let hd = hvp(&d)?;
        let dhd = dot(&d, &hd);
        if dhd <= 0.0 {
            return Ok(to_boundary(&z, &d));
        }
        let rr = dot(&r, &r);
        let alpha = rr / dhd;
        let z_next: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
        if norm(&z_next) >= radius {
            return Ok(to_boundary(&z, &d));
        }
        for (ri, hi) in r.iter_mut().zip(&hd) {
            *ri += alpha * hi;
        }
        z = z_next;
        if norm(&r) <= tol {
            break;
        }
        let beta = dot(&r, &r) / rr;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = -ri + beta * *di;
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalMinReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub grad_tol: f64,
    pub gradient_ok: bool,
    /// `vᵀHv / vᵀv` per probe direction.
    pub rayleigh_quotients: Vec<f64>,
    pub min_rayleigh: f64,
    /// Always true: PSD-ness is only sampled along the probes.
    pub psd_check_is_probabilistic: bool,
}

impl LocalMinReport {
    /// No probe found negative curvature below `-tol`.
    pub fn curvature_ok(&self, tol: f64) -> bool {
        self.min_rayleigh >= -tol
    }

    /// Builds the report from a gradient and a Hessian operator probed along `probes`.
    pub fn from_parts<O: HvpOperator + ?Sized>(
        loss: f64,
        gradient: &[f64],
        hessian: &O,
        grad_tol: f64,
        probes: &[Vec<f64>],
    ) -> Result<Self> {
        let grad_norm = norm(gradient);
        let rayleigh_quotients = probes
            .iter()
            .map(|v| hessian.apply(v).map(|hv| dot(v, &hv) / dot(v, v)))
            .collect::<Result<Vec<_>>>()?;
        let min_rayleigh = rayleigh_quotients
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            loss,
            grad_norm,
            grad_tol,
            gradient_ok: grad_norm <= grad_tol,
            rayleigh_quotients,
            min_rayleigh,
            psd_check_is_probabilistic: true,
        })
    }
}

/// First-order check on the full-batch gradient plus `n_probe_dirs` random
/// Rayleigh quotients of the full Hessian.
pub fn verify_local_min(
    model: &Model,
    data: &Dataset,
    grad_tol: f64,
    n_probe_dirs: usize,
    seed: u64,
) -> Result<LocalMinReport> {
    let (_, g) = loss_and_grad(model, data, Block::All)?;
    let n = g.len();
    let op = FnOperator::new(n, |v: &[f64]| hvp_full(model, data, v));
    let probes: Vec<Vec<f64>> = (0..n_probe_dirs)
        .map(|k| crate::trace::ProbeDistribution::Gaussian.sample(n, rng::indexed(seed, k as u64)))
        .collect();
    LocalMinReport::from_parts(eval_loss(model, data)?, &g, &op, grad_tol, &probes)
}
