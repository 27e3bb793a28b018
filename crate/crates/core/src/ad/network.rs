//! Loss, gradients and exact Hessian-vector products of a [`Model`].
//!
//! Hessian-vector products differentiate `gᵀv` a second time on the same tape,
//! so they cost one forward pass and two backward passes.

use crate::ad::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Dataset, Model};
use crate::tensor::Tensor;

/// Which parameters a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    All,
    Layer(usize),
}

fn check_batch(model: &Model, batch: &Dataset) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    model.check_input(&batch.inputs)
}

fn check_layer(model: &Model, layer: usize) -> Result<()> {
    if layer >= model.num_layers() {
        return Err(Error::BlockIndex {
            index: layer,
            count: model.num_layers(),
        });
    }
    Ok(())
}

fn record_loss(
    graph: &mut Graph,
    model: &Model,
    batch: &Dataset,
    trainable: impl Fn(usize) -> bool,
) -> Result<(Vec<(Var, Var)>, Var)> {
    let params = model.record_params(graph, trainable);
    let x = graph.constant(batch.inputs.clone());
    let outs = model.record_layers(graph, &params, x, 0, None)?;
    let loss = model.record_loss(graph, *outs.last().expect("non-empty"), &batch.targets)?;
    Ok((params, loss))
}

fn flatten(graph: &Graph, vars: &[Var]) -> Vec<f64> {
    vars.iter()
        .flat_map(|&v| graph.value(v).data().iter().copied())
        .collect()
}

/// `(1/N_B) Σ f(x_i, y_i, θ)` over the batch.
pub fn eval_loss(model: &Model, batch: &Dataset) -> Result<f64> {
    check_batch(model, batch)?;
    let mut g = Graph::new();
    let (_, loss) = record_loss(&mut g, model, batch, |_| false)?;
    Ok(g.value(loss).item())
}

/// Loss and the flattened gradient over `block` (`[W_i, b_i]` per layer).
pub fn loss_and_grad(model: &Model, batch: &Dataset, block: Block) -> Result<(f64, Vec<f64>)> {
    check_batch(model, batch)?;
    if let Block::Layer(i) = block {
        check_layer(model, i)?;
    }
    let selected = |i: usize| block == Block::All || block == Block::Layer(i);
    let mut g = Graph::new();
    let (params, loss) = record_loss(&mut g, model, batch, selected)?;
    let wrt: Vec<Var> = params
        .iter()
        .enumerate()
        .filter(|&(i, _)| selected(i))
        .flat_map(|(_, &(w, b))| [w, b])
        .collect();
    let grads = g.backward(loss, &wrt)?;
    Ok((g.value(loss).item(), flatten(&g, &grads)))
}

pub fn grad(model: &Model, batch: &Dataset, block: Block) -> Result<Vec<f64>> {
    loss_and_grad(model, batch, block).map(|(_, g)| g)
}

/// `H_i v` for the Hessian of the batch loss over layer `layer`'s `[W, b]`.
pub fn hvp_weights(model: &Model, batch: &Dataset, layer: usize, v: &[f64]) -> Result<Vec<f64>> {
    check_batch(model, batch)?;
    check_layer(model, layer)?;
    hvp_blocks(model, batch, Block::Layer(layer), v)
}

/// `H v` over every parameter of the model (cross-layer terms included).
pub fn hvp_full(model: &Model, batch: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
    check_batch(model, batch)?;
    hvp_blocks(model, batch, Block::All, v)
}

fn hvp_blocks(model: &Model, batch: &Dataset, block: Block, v: &[f64]) -> Result<Vec<f64>> {
    let selected = |i: usize| block == Block::All || block == Block::Layer(i);
    let expected: usize = (0..model.num_layers())
        .filter(|&i| selected(i))
        .map(|i| model.layers()[i].num_params())
        .sum();
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    let mut g = Graph::new();
    let (params, loss) = record_loss(&mut g, model, batch, selected)?;
    let mut leaves = Vec::new();
    let mut offset = 0;
    for (i, &(w, b)) in params.iter().enumerate() {
        if !selected(i) {
            continue;
        }
        let l = &model.layers()[i];
        for (var, t) in [(w, &l.weight), (b, &l.bias)] {
            let n = t.numel();
            let dir = Tensor::new(t.shape().to_vec(), v[offset..offset + n].to_vec())?;
            leaves.push((var, dir));
            offset += n;
        }
    }
    double_backward(&mut g, loss, &leaves)
}

/// Differentiates `Σ_k ⟨∂loss/∂leaf_k, v_k⟩` with respect to the same leaves.
fn double_backward(g: &mut Graph, loss: Var, leaves: &[(Var, Tensor)]) -> Result<Vec<f64>> {
    let wrt: Vec<Var> = leaves.iter().map(|(l, _)| *l).collect();
    let grads = g.backward(loss, &wrt)?;
    let mut total: Option<Var> = None;
    for (gk, (_, vk)) in grads.into_iter().zip(leaves) {
        let vk = g.constant(vk.clone());
        let prod = g.mul(gk, vk)?;
        let s = g.sum(prod);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one leaf");
    let hv = g.backward(total, &wrt)?;
    Ok(flatten(g, &hv))
}

/// Size of layer `layer`'s output for a single input.
pub fn activation_size(model: &Model, layer: usize) -> Result<usize> {
    if layer >= model.num_layers() {
        return Err(Error::NoActivation { layer });
    }
    Ok(model.layers()[layer].fan_out())
}

/// `H v` where `H` is the Hessian of the batch loss with respect to the
/// output of layer `layer`, treated as a leaf. For a batch of `N` inputs the
/// direction is the row-major concatenation of the per-input activations.
pub fn hvp_activations_batch(
    model: &Model,
    batch: &Dataset,
    layer: usize,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_batch(model, batch)?;
    let width = activation_size(model, layer)?;
    let n = batch.len() * width;
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    let activation = model.forward(&batch.inputs)?.swap_remove(layer);
    let mut g = Graph::new();
    let params = model.record_params(&mut g, |_| false);
    let a = g.param(activation);
    let outs = model.record_layers(&mut g, &params, a, layer + 1, None)?;
    let output = outs.last().copied().unwrap_or(a);
    let loss = model.record_loss(&mut g, output, &batch.targets)?;
    let dir = Tensor::matrix(batch.len(), width, v.to_vec());
    double_backward(&mut g, loss, &[(a, dir)])
}

/// `H_{a_j(x)} v` for a single input `(x, y)`.
pub fn hvp_activations(model: &Model, example: &Dataset, layer: usize, v: &[f64]) -> Result<Vec<f64>> {
    if example.len() != 1 {
        return Err(Error::Shape(format!(
            "activation Hessian blocks are per input; got {} inputs",
            example.len()
        )));
    }
    hvp_activations_batch(model, example, layer, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LossHead, Targets};

    fn tiny() -> (Model, Dataset) {
        let model = Model::mlp(&[2, 3, 2], Activation::Tanh, LossHead::CrossEntropy, 0).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8]);
        let data = Dataset::new(x, Targets::Classes(vec![0, 1, 1])).unwrap();
        (model, data)
    }

    #[test]
    fn errors() {
        let (m, d) = tiny();
        assert!(matches!(
            grad(&m, &d, Block::Layer(5)),
            Err(Error::BlockIndex { .. })
        ));
        assert!(matches!(
            hvp_weights(&m, &d, 0, &[1.0]),
            Err(Error::DimensionMismatch { expected: 9, got: 1 })
        ));
        assert!(matches!(
            hvp_activations(&m, &d.example(0), 2, &[0.0; 2]),
            Err(Error::NoActivation { layer: 2 })
        ));
        assert!(hvp_activations(&m, &d, 0, &[0.0; 9]).is_err());
        let empty = d.subset(&[]);
        assert!(eval_loss(&m, &empty).is_err());
    }

    #[test]
    fn zero_direction_gives_zero() {
        let (m, d) = tiny();
        let hv = hvp_weights(&m, &d, 1, &[0.0; 8]).unwrap();
        assert!(hv.iter().all(|&x| x == 0.0));
        let ha = hvp_activations(&m, &d.example(1), 0, &[0.0; 3]).unwrap();
        assert!(ha.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_gradient_is_concatenation_of_blocks() {
        let (m, d) = tiny();
        let all = grad(&m, &d, Block::All).unwrap();
        let mut parts = grad(&m, &d, Block::Layer(0)).unwrap();
        parts.extend(grad(&m, &d, Block::Layer(1)).unwrap());
        assert_eq!(all.len(), m.total_params());
        for (a, b) in all.iter().zip(&parts) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
