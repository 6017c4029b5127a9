//! A common interface over eager evaluation and taped evaluation, so model
//! code is written once and runs either for inference or for training.

use crate::error::Result;
use crate::ops::{self, BinaryKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub trait Graph {
    type V: Clone;

    /// Non-differentiable input data.
    fn input(&mut self, t: Tensor) -> Self::V;
    /// A model parameter; `trainable` decides whether gradients flow into it.
    fn param(&mut self, t: &Tensor, trainable: bool) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn binary(&mut self, kind: BinaryKind, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, c: f32) -> Result<Self::V>;
    fn gelu_tanh(&mut self, x: &Self::V) -> Result<Self::V>;
    fn layernorm(&mut self, x: &Self::V, g: &Self::V, b: &Self::V, eps: f32) -> Result<Self::V>;
    fn softmax_lastdim(&mut self, x: &Self::V) -> Result<Self::V>;
    fn attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        groups: usize,
    ) -> Result<Self::V>;
    fn mul_row(&mut self, x: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn add_grouped(&mut self, x: &Self::V, c: &Self::V) -> Result<Self::V>;
    fn mse(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.binary(BinaryKind::Add, a, b)
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.binary(BinaryKind::Sub, a, b)
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.binary(BinaryKind::Mul, a, b)
    }
}

/// Immediate evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type V = Tensor;

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, t: &Tensor, _trainable: bool) -> Tensor {
        t.clone()
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::matmul(a, b)
    }
    fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        ops::linear(x, w, b)
    }
    fn binary(&mut self, kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::binary(kind, a, b)
    }
    fn scale(&mut self, x: &Tensor, c: f32) -> Result<Tensor> {
        ops::scale(x, c)
    }
    fn gelu_tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::gelu_tanh(x)
    }
    fn layernorm(&mut self, x: &Tensor, g: &Tensor, b: &Tensor, eps: f32) -> Result<Tensor> {
        ops::layernorm(x, g, b, eps).map(|(y, _)| y)
    }
    fn softmax_lastdim(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::softmax_lastdim(x)
    }
    fn attention(&mut self, q: &Tensor, k: &Tensor, v: &Tensor, groups: usize) -> Result<Tensor> {
        ops::attention(q, k, v, groups).map(|(y, _)| y)
    }
    fn mul_row(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        ops::mul_row(x, v)
    }
    fn add_grouped(&mut self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        ops::add_grouped(x, c)
    }
    fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::mse(a, b)
    }
}

impl Graph for Tape {
    type V = Var;

    fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }
    fn param(&mut self, t: &Tensor, trainable: bool) -> Var {
        self.leaf(t.clone(), trainable)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        Tape::value(self, *v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }
    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        Tape::linear(self, *x, *w, b.copied())
    }
    fn binary(&mut self, kind: BinaryKind, a: &Var, b: &Var) -> Result<Var> {
        Tape::binary(self, kind, *a, *b)
    }
    fn scale(&mut self, x: &Var, c: f32) -> Result<Var> {
        Tape::scale(self, *x, c)
    }
    fn gelu_tanh(&mut self, x: &Var) -> Result<Var> {
        Tape::gelu_tanh(self, *x)
    }
    fn layernorm(&mut self, x: &Var, g: &Var, b: &Var, eps: f32) -> Result<Var> {
        Tape::layernorm(self, *x, *g, *b, eps)
    }
    fn softmax_lastdim(&mut self, x: &Var) -> Result<Var> {
        Tape::softmax_lastdim(self, *x)
    }
    fn attention(&mut self, q: &Var, k: &Var, v: &Var, groups: usize) -> Result<Var> {
        Tape::attention(self, *q, *k, *v, groups)
    }
    fn mul_row(&mut self, x: &Var, v: &Var) -> Result<Var> {
        Tape::mul_row(self, *x, *v)
    }
    fn add_grouped(&mut self, x: &Var, c: &Var) -> Result<Var> {
        Tape::add_grouped(self, *x, *c)
    }
    fn mse(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::mse(self, *a, *b)
    }
}
