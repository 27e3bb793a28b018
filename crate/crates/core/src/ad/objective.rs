//! Losses split into parameter blocks.
//!
//! Sensitivity analysis only needs per-block access: the current block
//! parameters, the loss when one block is replaced, the block gradient and the
//! block Hessian-vector product. A trained [`Model`] on a fixed batch and an
//! explicit quadratic both provide that.

use crate::ad::network::{eval_loss, grad, hvp_weights, Block};
use crate::ad::operator::{DenseOperator, HvpOperator};
use crate::error::{Error, Result};
use crate::model::{Dataset, Model};
use crate::tensor::dot;

pub trait BlockObjective: Sync {
    fn num_blocks(&self) -> usize;
    fn block_name(&self, block: usize) -> String;
    fn block_dim(&self, block: usize) -> usize;
    fn block_params(&self, block: usize) -> Vec<f64>;
    fn loss(&self) -> Result<f64>;
    /// Loss with block `block` replaced by `params`, all others unchanged.
    fn loss_with_block(&self, block: usize, params: &[f64]) -> Result<f64>;
    fn block_grad(&self, block: usize) -> Result<Vec<f64>>;
    fn block_hvp(&self, block: usize, v: &[f64]) -> Result<Vec<f64>>;

    fn check_block(&self, block: usize) -> Result<()> {
        if block >= self.num_blocks() {
            return Err(Error::BlockIndex {
                index: block,
                count: self.num_blocks(),
            });
        }
        Ok(())
    }

    /// Euclidean norm of the gradient over every block.
    fn grad_norm(&self) -> Result<f64> {
        let mut sq = 0.0;
        for b in 0..self.num_blocks() {
            let g = self.block_grad(b)?;
            sq += dot(&g, &g);
        }
        Ok(sq.sqrt())
    }
}

/// The Hessian block of one [`BlockObjective`] block as an operator.
pub struct BlockOperator<'a, O: ?Sized> {
    objective: &'a O,
    block: usize,
}

impl<'a, O: BlockObjective + ?Sized> BlockOperator<'a, O> {
    pub fn new(objective: &'a O, block: usize) -> Result<Self> {
        objective.check_block(block)?;
        Ok(Self { objective, block })
    }
}

impl<O: BlockObjective + ?Sized> HvpOperator for BlockOperator<'_, O> {
    fn dim(&self) -> usize {
        self.objective.block_dim(self.block)
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.objective.block_hvp(self.block, v)
    }
}

/// A model's loss on a fixed batch, one block per layer (`[W_i, b_i]`).
#[derive(Debug, Clone)]
pub struct ModelObjective {
    model: Model,
    batch: Dataset,
}

impl ModelObjective {
    pub fn new(model: Model, batch: Dataset) -> Result<Self> {
        eval_loss(&model, &batch)?;
        Ok(Self { model, batch })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn batch(&self) -> &Dataset {
        &self.batch
    }
}

impl BlockObjective for ModelObjective {
    fn num_blocks(&self) -> usize {
        self.model.num_layers()
    }

    fn block_name(&self, block: usize) -> String {
        self.model.layers()[block].name.clone()
    }

    fn block_dim(&self, block: usize) -> usize {
        self.model.layers()[block].num_params()
    }

    fn block_params(&self, block: usize) -> Vec<f64> {
        self.model.layers()[block].flat_params()
    }

    fn loss(&self) -> Result<f64> {
        eval_loss(&self.model, &self.batch)
    }

    fn loss_with_block(&self, block: usize, params: &[f64]) -> Result<f64> {
        self.check_block(block)?;
        let mut m = self.model.clone();
        m.layers_mut()[block].set_flat_params(params)?;
        eval_loss(&m, &self.batch)
    }

    fn block_grad(&self, block: usize) -> Result<Vec<f64>> {
        grad(&self.model, &self.batch, Block::Layer(block))
    }

    fn block_hvp(&self, block: usize, v: &[f64]) -> Result<Vec<f64>> {
        hvp_weights(&self.model, &self.batch, block, v)
    }
}

/// `L₀ + Σ_b ½ (θ_b − c_b)ᵀ A_b (θ_b − c_b)` with independent blocks.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    blocks: Vec<QuadraticBlock>,
    offset: f64,
}

#[derive(Debug, Clone)]
pub struct QuadraticBlock {
    pub name: String,
    pub hessian: DenseOperator,
    pub center: Vec<f64>,
    pub params: Vec<f64>,
}

impl QuadraticBlock {
    /// A block sitting exactly at its minimum.
    pub fn at_minimum(name: impl Into<String>, hessian: DenseOperator, center: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            hessian,
            params: center.clone(),
            center,
        }
    }

    fn energy(&self, params: &[f64]) -> Result<f64> {
        let d: Vec<f64> = params.iter().zip(&self.center).map(|(p, c)| p - c).collect();
        let hd = self.hessian.apply(&d)?;
        Ok(0.5 * dot(&d, &hd))
    }
}

impl QuadraticObjective {
    pub fn new(blocks: Vec<QuadraticBlock>, offset: f64) -> Result<Self> {
        for b in &blocks {
            let n = b.hessian.dim();
            if b.center.len() != n || b.params.len() != n {
                return Err(Error::Shape(format!(
                    "quadratic block `{}` has inconsistent sizes",
                    b.name
                )));
            }
        }
        Ok(Self { blocks, offset })
    }

    pub fn blocks(&self) -> &[QuadraticBlock] {
        &self.blocks
    }
}

impl BlockObjective for QuadraticObjective {
    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn block_name(&self, block: usize) -> String {
        self.blocks[block].name.clone()
    }

    fn block_dim(&self, block: usize) -> usize {
        self.blocks[block].hessian.dim()
    }

    fn block_params(&self, block: usize) -> Vec<f64> {
        self.blocks[block].params.clone()
    }

    fn loss(&self) -> Result<f64> {
        let mut total = self.offset;
        for b in &self.blocks {
            total += b.energy(&b.params)?;
        }
        Ok(total)
    }

    fn loss_with_block(&self, block: usize, params: &[f64]) -> Result<f64> {
        self.check_block(block)?;
        let mut total = self.offset;
        for (i, b) in self.blocks.iter().enumerate() {
            total += if i == block {
                b.energy(params)?
            } else {
                b.energy(&b.params)?
            };
        }
        Ok(total)
    }

    fn block_grad(&self, block: usize) -> Result<Vec<f64>> {
        self.check_block(block)?;
        let b = &self.blocks[block];
        let d: Vec<f64> = b.params.iter().zip(&b.center).map(|(p, c)| p - c).collect();
        b.hessian.apply(&d)
    }

    fn block_hvp(&self, block: usize, v: &[f64]) -> Result<Vec<f64>> {
        self.check_block(block)?;
        self.blocks[block].hessian.apply(v)
    }
}
