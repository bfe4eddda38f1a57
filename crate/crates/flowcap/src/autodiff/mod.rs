//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations as they execute; [`Tape::backward`]
//! replays the record once in reverse, accumulating gradients for every node.
//! Gradients with respect to named parameters flow into a [`ParamStore`]
//! through a [`Binding`] that pins each parameter to a leaf node.
//!
//! All arithmetic is 64-bit and single-threaded per tape, so identical inputs
//! produce bit-identical gradients.

mod finite_diff;
mod params;

pub use finite_diff::{finite_difference_gradient, finite_difference_vec};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Affine { w: usize, x: usize, b: usize },
    Relu(usize),
    Tanh(usize),
    Cos(usize),
    Sin(usize),
    Mse(usize, usize),
    Sum(usize),
    Dot(usize, usize),
    SliceRows { x: usize, start: usize, len: usize },
    ConcatRows(usize, usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter leaves for one forward build, aligned with a store's ordering.
pub struct Binding {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.vars[i],
            None => panic!("parameter '{name}' is not bound on this tape"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the node, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Record an input leaf. Its gradient is retrievable after backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Push every parameter of the store as a leaf, in store order.
    pub fn bind(&mut self, store: &ParamStore) -> Binding {
        let mut names = Vec::with_capacity(store.len());
        let mut vars = Vec::with_capacity(store.len());
        for (name, value) in store.iter() {
            names.push(name.to_string());
            vars.push(self.leaf(value.clone()));
        }
        Binding { names, vars }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a.0, b.0), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = tensor::scale(self.value(a), c);
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a.0, b.0), v))
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let v = tensor::affine(self.value(w), self.value(x), self.value(b))?;
        Ok(self.push(Op::Affine { w: w.0, x: x.0, b: b.0 }, v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = tensor::relu(self.value(a));
        self.push(Op::Relu(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = tensor::tanh(self.value(a));
        self.push(Op::Tanh(a.0), v)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = tensor::cos(self.value(a));
        self.push(Op::Cos(a.0), v)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = tensor::sin(self.value(a));
        self.push(Op::Sin(a.0), v)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::mse(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mse(a.0, b.0), v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = tensor::sum(self.value(a));
        self.push(Op::Sum(a.0), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::dot(self.value(a), self.value(b))?;
        Ok(self.push(Op::Dot(a.0, b.0), v))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_rows(self.value(a), start, len)?;
        Ok(self.push(Op::SliceRows { x: a.0, start, len }, v))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::concat_rows(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatRows(a.0, b.0), v))
    }

    /// Reverse pass from a scalar loss node. Visits each recorded node exactly
    /// once, in reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let accumulate = |grads: &mut [Option<Tensor>], j: usize, delta: Tensor| -> Result<()> {
            match &mut grads[j] {
                Some(existing) => {
                    *existing = tensor::add(existing, &delta)?;
                }
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        // An operand that entered an elementwise op as a scalar receives the
        // reduced (summed) gradient.
        let reduce_to = |target: &Tensor, delta: Tensor| -> Tensor {
            if target.is_scalar() && !delta.is_scalar() {
                tensor::sum(&delta)
            } else {
                delta
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, reduce_to(&self.nodes[*a].value, g.clone()))?;
                accumulate(grads, *b, reduce_to(&self.nodes[*b].value, g.clone()))?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, reduce_to(&self.nodes[*a].value, g.clone()))?;
                accumulate(grads, *b, reduce_to(&self.nodes[*b].value, tensor::scale(g, -1.0)))?;
            }
            Op::Mul(a, b) => {
                let ga = tensor::mul(g, &self.nodes[*b].value)?;
                let gb = tensor::mul(g, &self.nodes[*a].value)?;
                accumulate(grads, *a, reduce_to(&self.nodes[*a].value, ga))?;
                accumulate(grads, *b, reduce_to(&self.nodes[*b].value, gb))?;
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, tensor::scale(g, *c))?;
            }
            Op::Matmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                // Promote a vector rhs to a column so both cases share the
                // matrix formulas, then demote the gradient back.
                let g_mat = as_column(g);
                let b_mat = as_column(bv);
                let ga = tensor::matmul(&g_mat, &tensor::transpose(&b_mat))?;
                let gb = tensor::matmul(&tensor::transpose(av), &g_mat)?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, match_rank(gb, bv))?;
            }
            Op::Affine { w, x, b } => {
                let wv = &self.nodes[*w].value;
                let xv = &self.nodes[*x].value;
                let g_mat = as_column(g);
                let x_mat = as_column(xv);
                let gw = tensor::matmul(&g_mat, &tensor::transpose(&x_mat))?;
                let gx = tensor::matmul(&tensor::transpose(wv), &g_mat)?;
                let gb = row_sums(&g_mat);
                accumulate(grads, *w, gw)?;
                accumulate(grads, *x, match_rank(gx, xv))?;
                accumulate(grads, *b, gb)?;
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(av.data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[i].value;
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(yv.data()) {
                    *dv *= 1.0 - y * y;
                }
                accumulate(grads, *a, d)?;
            }
            Op::Cos(a) => {
                let av = &self.nodes[*a].value;
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(av.data()) {
                    *dv *= -x.sin();
                }
                accumulate(grads, *a, d)?;
            }
            Op::Sin(a) => {
                let av = &self.nodes[*a].value;
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(av.data()) {
                    *dv *= x.cos();
                }
                accumulate(grads, *a, d)?;
            }
            Op::Mse(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let n = av.len() as f64;
                let gs = g.item();
                let diff = tensor::sub(av, bv)?;
                let ga = tensor::scale(&diff, 2.0 * gs / n);
                let gb = tensor::scale(&diff, -2.0 * gs / n);
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Sum(a) => {
                let av = &self.nodes[*a].value;
                let gs = g.item();
                let mut d = Tensor::zeros(av.shape());
                d.data_mut().fill(gs);
                accumulate(grads, *a, d)?;
            }
            Op::Dot(a, b) => {
                let gs = g.item();
                let ga = tensor::scale(&self.nodes[*b].value, gs);
                let gb = tensor::scale(&self.nodes[*a].value, gs);
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::SliceRows { x, start, len } => {
                let xv = &self.nodes[*x].value;
                let cols = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                d.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                accumulate(grads, *x, d)?;
            }
            Op::ConcatRows(a, b) => {
                let arows = self.nodes[*a].value.rows();
                let brows = self.nodes[*b].value.rows();
                let ga = tensor::slice_rows(g, 0, arows)?;
                let gb = tensor::slice_rows(g, arows, brows)?;
                accumulate(grads, *a, match_rank(ga, &self.nodes[*a].value))?;
                accumulate(grads, *b, match_rank(gb, &self.nodes[*b].value))?;
            }
        }
        Ok(())
    }
}

fn as_column(t: &Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t.clone()
    } else {
        Tensor::new(vec![t.rows(), 1], t.data().to_vec()).expect("rank promotion")
    }
}

fn match_rank(t: Tensor, like: &Tensor) -> Tensor {
    if like.shape().len() == 1 && t.shape().len() == 2 {
        Tensor::new(vec![like.rows()], t.data().to_vec()).expect("rank demotion")
    } else {
        t
    }
}

fn row_sums(m: &Tensor) -> Tensor {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        out[i] = (0..cols).map(|j| m.at(i, j)).sum();
    }
    Tensor::vector(&out)
}

#[cfg(test)]
mod tests;
