//! Tensor-level reverse-mode tape.
//!
//! Every operation is evaluated eagerly and appended to the tape, so node
//! order is a topological order. `backward` records the adjoint computation
//! on the same tape, which makes gradients themselves differentiable: a
//! second `backward` over `gᵀv` yields the Hessian-vector product `Hv`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[m, n] + [1, n]`
    AddBias(Var, Var),
    /// `[m, n] -> [1, n]`
    SumRows(Var),
    /// `[1, n] -> [m, n]`
    RepeatRows(Var),
    /// `[m, n] -> [m, 1]`
    RowSum(Var),
    /// `[m, 1] -> [m, n]`
    RepeatCols(Var),
    /// all entries -> `[1, 1]`
    Sum(Var),
    /// `[1, 1]` -> any shape
    Fill(Var),
    Relu(Var),
    /// `1[x > 0]`; its derivative is taken to be zero everywhere.
    Step,
    Tanh(Var),
    /// `1 - y²` given `y`.
    TanhGrad(Var),
    /// Row-wise softmax.
    Softmax(Var),
    /// Mean over rows of `logsumexp(z) - z[label]`.
    SoftmaxCrossEntropy(Var, Rc<[usize]>),
    /// Simulated quantization; backward is the straight-through estimator.
    FakeQuant(Var, QuantScheme),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.cols() != sb.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                sa.shape(),
                sb.shape()
            )));
        }
        let value = sa.matmul(sb);
        Ok(self.push(value, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), self.rg(&[a]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(value, Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::matrix(ta.rows(), n, data);
        Ok(self.push(value, Op::AddBias(a, bias), self.rg(&[a, bias])))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = vec![0.0; n];
        for r in 0..ta.rows() {
            for (o, x) in out.iter_mut().zip(ta.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Tensor::row(out), Op::SumRows(a), self.rg(&[a]))
    }

    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Var {
        let ta = self.value(a);
        debug_assert_eq!(ta.rows(), 1);
        let n = ta.cols();
        let data = ta.data().repeat(m);
        self.push(
            Tensor::matrix(m, n, data),
            Op::RepeatRows(a),
            self.rg(&[a]),
        )
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|r| ta.row_slice(r).iter().sum()).collect();
        let value = Tensor::matrix(ta.rows(), 1, data);
        self.push(value, Op::RowSum(a), self.rg(&[a]))
    }

    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Var {
        let ta = self.value(a);
        debug_assert_eq!(ta.cols(), 1);
        let m = ta.rows();
        let data = ta
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, n))
            .collect();
        self.push(
            Tensor::matrix(m, n, data),
            Op::RepeatCols(a),
            self.rg(&[a]),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]))
    }

    /// Broadcast a `[1, 1]` node to `shape`.
    pub fn fill(&mut self, s: Var, shape: &[usize]) -> Var {
        let x = self.value(s).item();
        self.push(Tensor::full(shape, x), Op::Fill(s), self.rg(&[s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), self.rg(&[a]))
    }

    fn step(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(value, Op::Step, false)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), self.rg(&[a]))
    }

    fn tanh_grad(&mut self, y: Var) -> Var {
        let value = self.value(y).map(|t| 1.0 - t * t);
        self.push(value, Op::TanhGrad(y), self.rg(&[y]))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..ta.rows() {
            let row = ta.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        let value = Tensor::matrix(ta.rows(), n, data);
        self.push(value, Op::Softmax(a), self.rg(&[a]))
    }

    /// Mean softmax cross-entropy of `logits` against class `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} labels",
                t.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= t.cols()) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {} classes",
                t.cols()
            )));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy(logits, labels.into()),
            self.rg(&[logits]),
        ))
    }

    pub fn fake_quant(&mut self, a: Var, scheme: QuantScheme) -> Var {
        let value = scheme.fake_quantize(self.value(a));
        self.push(value, Op::FakeQuant(a, scheme), self.rg(&[a]))
    }

    /// Gradients of the scalar `output` with respect to `wrt`, recorded as
    /// new nodes on this graph so they can be differentiated again.
    ///
    /// Leaves with no path to `output` get a zero constant.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let end = output.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; end];
        grads[output.0] = Some(self.constant(Tensor::scalar(1.0)));

        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, gin) in self.adjoint(Var(i), &op, g)? {
                if !self.requires_grad(input) {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, gin)?,
                    None => gin,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    self.constant(zeros)
                }
            })
            .collect())
    }

    /// Input adjoints of node `node` (computing `op`) given its output adjoint `g`.
    fn adjoint(&mut self, node: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let rg = |graph: &Graph, v: Var| graph.requires_grad(v);
        Ok(match *op {
            Op::Leaf | Op::Step => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if rg(self, a) {
                    let bt = self.transpose(b);
                    out.push((a, self.matmul(g, bt)?));
                }
                if rg(self, b) {
                    let at = self.transpose(a);
                    out.push((b, self.matmul(at, g)?));
                }
                out
            }
            Op::Transpose(a) => vec![(a, self.transpose(g))],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let mut out = vec![(a, g)];
                if rg(self, b) {
                    out.push((b, self.scale(g, -1.0)));
                }
                out
            }
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if rg(self, a) {
                    out.push((a, self.mul(g, b)?));
                }
                if rg(self, b) {
                    out.push((b, self.mul(g, a)?));
                }
                out
            }
            Op::Scale(a, c) => vec![(a, self.scale(g, c))],
            Op::AddBias(a, b) => {
                let mut out = vec![(a, g)];
                if rg(self, b) {
                    out.push((b, self.sum_rows(g)));
                }
                out
            }
            Op::SumRows(a) => {
                let m = self.value(a).rows();
                vec![(a, self.repeat_rows(g, m))]
            }
            Op::RepeatRows(a) => vec![(a, self.sum_rows(g))],
            Op::RowSum(a) => {
                let n = self.value(a).cols();
                vec![(a, self.repeat_cols(g, n))]
            }
            Op::RepeatCols(a) => vec![(a, self.row_sum(g))],
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.fill(g, &shape))]
            }
            Op::Fill(s) => vec![(s, self.sum(g))],
            Op::Relu(a) => {
                let mask = self.step(a);
                vec![(a, self.mul(g, mask)?)]
            }
            Op::Tanh(a) => {
                let d = self.tanh_grad(node);
                vec![(a, self.mul(g, d)?)]
            }
            Op::TanhGrad(y) => {
                let d = self.scale(y, -2.0);
                vec![(y, self.mul(g, d)?)]
            }
            Op::Softmax(a) => {
                // y ⊙ (g − rowsum(g ⊙ y))
                let n = self.value(a).cols();
                let gy = self.mul(g, node)?;
                let s = self.row_sum(gy);
                let s = self.repeat_cols(s, n);
                let centered = self.sub(g, s)?;
                vec![(a, self.mul(node, centered)?)]
            }
            Op::SoftmaxCrossEntropy(z, ref labels) => {
                // (softmax(z) − onehot(labels)) · g / N
                let (rows, cols) = (self.value(z).rows(), self.value(z).cols());
                let mut onehot = vec![0.0; rows * cols];
                for (r, &y) in labels.iter().enumerate() {
                    onehot[r * cols + y] = 1.0;
                }
                let onehot = self.constant(Tensor::matrix(rows, cols, onehot));
                let p = self.softmax(z);
                let d = self.sub(p, onehot)?;
                let gs = self.scale(g, 1.0 / rows as f64);
                let gf = self.fill(gs, &[rows, cols]);
                vec![(z, self.mul(d, gf)?)]
            }
            Op::FakeQuant(a, ref scheme) => {
                let mask = scheme.ste_mask(self.value(a));
                let mask = self.constant(mask);
                vec![(a, self.mul(g, mask)?)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_and_second_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let [dx] = g.backward(y, &[x]).unwrap()[..] else {
            unreachable!()
        };
        assert_eq!(g.value(dx).item(), 6.0);
        let [ddx] = g.backward(dx, &[x]).unwrap()[..] else {
            unreachable!()
        };
        assert_eq!(g.value(ddx).item(), 2.0);
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let z = g.param(Tensor::row(vec![5.0]));
        let s = g.sum(x);
        let grads = g.backward(s, &[x, z]).unwrap();
        assert_eq!(g.value(grads[0]).data(), &[1.0, 1.0]);
        assert_eq!(g.value(grads[1]).data(), &[0.0]);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![2.0]));
        let c = g.constant(Tensor::row(vec![4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s, &[x]).unwrap();
        assert_eq!(g.value(grads[0]).item(), 4.0);
        assert!(!g.requires_grad(c));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(g.backward(x, &[x]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0., 1000.]));
        let y = g.softmax(x);
        let t = g.value(y);
        for r in 0..2 {
            let s: f64 = t.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }
}
