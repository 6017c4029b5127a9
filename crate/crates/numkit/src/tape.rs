//! Reverse-mode tape.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{NumError, Result};
use crate::ops::{self, BinaryKind, LayerNormCache};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Binary(BinaryKind, Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        probs: Vec<f32>,
    },
    MulRow(Var, Var),
    AddGrouped(Var, Var),
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Matmul(a, b), g))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let g = self.any_grad(&inputs);
        Ok(self.push(y, Op::Linear { x, w, b }, g))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let y = ops::binary(kind, self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Binary(kind, a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let y = ops::scale(self.value(x), c)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(y, Op::Scale(x, c), g))
    }

    pub fn gelu_tanh(&mut self, x: Var) -> Result<Var> {
        let y = ops::gelu_tanh(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(y, Op::Gelu(x), g))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (y, cache) = ops::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            g,
        ))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_lastdim(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(y, Op::Softmax(x), g))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize) -> Result<Var> {
        let (y, probs) = ops::attention(self.value(q), self.value(k), self.value(v), groups)?;
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                groups,
                probs,
            },
            g,
        ))
    }

    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let y = ops::mul_row(self.value(x), self.value(v))?;
        let g = self.any_grad(&[x, v]);
        Ok(self.push(y, Op::MulRow(x, v), g))
    }

    pub fn add_grouped(&mut self, x: Var, c: Var) -> Result<Var> {
        let y = ops::add_grouped(self.value(x), self.value(c))?;
        let g = self.any_grad(&[x, c]);
        Ok(self.push(y, Op::AddGrouped(x, c), g))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mse(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Mse(a, b), g))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = ops::sum(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(y, Op::Sum(x), g))
    }

    /// Backpropagates from a 0-d `loss`, visiting each node once in reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::InvalidArgument {
                op: "backward",
                reason: format!("loss must be a scalar, got shape {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("shape"));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let mut emit = |v: Var, g: Tensor| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], g);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Matmul(a, b) => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &dy);
                    emit(*a, da);
                    emit(*b, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        ops::linear_backward(self.value(*x), self.value(*w), b.is_some(), &dy);
                    emit(*x, dx);
                    emit(*w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        emit(*b, db);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (da, db) = ops::binary_backward(*kind, self.value(*a), self.value(*b), &dy);
                    emit(*a, da);
                    emit(*b, db);
                }
                Op::Scale(x, c) => emit(*x, dy.map(|g| g * c)),
                Op::Gelu(x) => emit(*x, ops::gelu_tanh_backward(self.value(*x), &dy)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::layernorm_backward(cache, self.value(*gamma), &dy);
                    emit(*x, dx);
                    emit(*gamma, dg);
                    emit(*beta, db);
                }
                Op::Softmax(x) => emit(*x, ops::softmax_backward(&node.value, &dy)),
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    probs,
                } => {
                    let (dq, dk, dv) = ops::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        *groups,
                        &dy,
                    );
                    emit(*q, dq);
                    emit(*k, dk);
                    emit(*v, dv);
                }
                Op::MulRow(x, v) => {
                    let (dx, dv) = ops::mul_row_backward(self.value(*x), self.value(*v), &dy);
                    emit(*x, dx);
                    emit(*v, dv);
                }
                Op::AddGrouped(x, c) => {
                    let (dx, dc) = ops::add_grouped_backward(self.value(*c), &dy);
                    emit(*x, dx);
                    emit(*c, dc);
                }
                Op::Mse(a, b) => {
                    let (da, db) = ops::mse_backward(self.value(*a), self.value(*b), dy.item());
                    emit(*a, da);
                    emit(*b, db);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    emit(*x, Tensor::full(xv.shape(), dy.item()));
                }
            }
        }
        for g in grads.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_through_shared_input() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full(&[2, 2], 1.0), false);
        let b = t.leaf(Tensor::full(&[2, 2], 2.0), true);
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[3]), true);
        assert!(t.backward(a).is_err());
    }
}
