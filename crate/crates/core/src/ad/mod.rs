//! Reverse-mode automatic differentiation with exact Hessian-vector products.

mod graph;
pub mod network;
pub mod objective;
pub mod operator;

pub use graph::{Graph, Var};
pub use network::{
    activation_size, eval_loss, grad, hvp_activations, hvp_activations_batch, hvp_full, hvp_weights,
    loss_and_grad, Block,
};
pub use objective::{
    BlockObjective, BlockOperator, ModelObjective, QuadraticBlock, QuadraticObjective,
};
pub use operator::{
    assemble_dense, top_eigenpair, top_eigenpairs, Deflated, DenseOperator, EigenPair,
    EigenStatus, Eigendecomposition, FnOperator, HvpOperator, PowerConfig,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value and gradient of a scalar function recorded by `f` over `params`.
pub fn gradient<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let grads = g.backward(out, &leaves)?;
    let value = g.value(out).item();
    Ok((value, grads.into_iter().map(|v| g.value(v).clone()).collect()))
}

/// `H v` for the Hessian of the scalar function recorded by `f`, computed by
/// differentiating `⟨∇f, v⟩` a second time.
pub fn hvp<F>(params: &[Tensor], v: &[Tensor], f: F) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    if params.len() != v.len() || params.iter().zip(v).any(|(p, d)| p.shape() != d.shape()) {
        return Err(Error::Shape("direction does not match parameter shapes".into()));
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let grads = g.backward(out, &leaves)?;
    let mut total = None;
    for (gk, vk) in grads.into_iter().zip(v) {
        let vk = g.constant(vk.clone());
        let prod = g.mul(gk, vk)?;
        let s = g.sum(prod);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let Some(total) = total else {
        return Ok(vec![]);
    };
    let hv = g.backward(total, &leaves)?;
    Ok(hv.into_iter().map(|x| g.value(x).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_quadratic(a: &[f64]) -> impl FnOnce(&mut Graph, &[Var]) -> Result<Var> + '_ {
        move |g, p| {
            let a = g.constant(Tensor::row(a.to_vec()));
            let sq = g.mul(p[0], p[0])?;
            let w = g.mul(sq, a)?;
            let s = g.sum(w);
            Ok(g.scale(s, 0.5))
        }
    }

    #[test]
    fn square_function() {
        let (v, gr) = gradient(&[Tensor::scalar(3.0)], |g, p| g.mul(p[0], p[0])).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(gr[0].item(), 6.0);
    }

    #[test]
    fn diagonal_quadratic_gradient_and_hvp() {
        let theta = Tensor::row(vec![1.0, 1.0]);
        let (_, gr) = gradient(std::slice::from_ref(&theta), half_quadratic(&[2.0, 4.0])).unwrap();
        assert_eq!(gr[0].data(), &[2.0, 4.0]);
        let hv = hvp(
            std::slice::from_ref(&theta),
            &[Tensor::row(vec![1.0, 0.0])],
            half_quadratic(&[2.0, 4.0]),
        )
        .unwrap();
        assert_eq!(hv[0].data(), &[2.0, 0.0]);
        let hv0 = hvp(&[theta], &[Tensor::row(vec![0.0, 0.0])], half_quadratic(&[2.0, 4.0])).unwrap();
        assert_eq!(hv0[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn hvp_shape_mismatch() {
        let r = hvp(&[Tensor::row(vec![1.0])], &[Tensor::row(vec![1.0, 2.0])], |g, p| {
            Ok(g.sum(p[0]))
        });
        assert!(r.is_err());
    }
}
