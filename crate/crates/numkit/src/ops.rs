//! Forward and backward kernels for every differentiable operation.
//!
//! Each forward returns a fresh [`Tensor`] (plus whatever the backward needs);
//! each backward receives the upstream gradient and returns gradients for its
//! inputs. Both [`crate::Eager`] and [`crate::Tape`] call through here, so
//! inference and training share one arithmetic path.

use crate::error::{shape_err, NumError, Result};
use crate::kernels::{dot64, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    t.ensure_finite(op)?;
    Ok(t)
}

fn is_scalar(t: &Tensor) -> bool {
    t.rank() == 0 && t.len() == 1
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return shape_err("matmul", a.shape(), b.shape());
    }
    finite(
        Tensor::new(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n))?,
        "matmul",
    )
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let da = gemm_nt(dc.data(), b.data(), m, k, n);
    let db = gemm_tn(a.data(), dc.data(), m, k, n);
    (
        Tensor::new(vec![m, k], da).expect("shape"),
        Tensor::new(vec![k, n], db).expect("shape"),
    )
}

/// `x · wᵀ + b` with `w` stored `out×in`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, inp) = x.dims2("linear")?;
    let (out, inp2) = w.dims2("linear")?;
    if inp != inp2 {
        return shape_err("linear", x.shape(), w.shape());
    }
    let mut y = gemm_nt(x.data(), w.data(), rows, out, inp);
    if let Some(b) = b {
        if b.shape() != [out] {
            return shape_err("linear", w.shape(), b.shape());
        }
        for row in y.chunks_exact_mut(out) {
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
    }
    finite(Tensor::new(vec![rows, out], y)?, "linear")
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    dy: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (rows, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let dx = gemm_nn(dy.data(), w.data(), rows, out, inp);
    let dw = gemm_tn(dy.data(), x.data(), rows, out, inp);
    let db = has_bias.then(|| column_sums(dy));
    (
        Tensor::new(vec![rows, inp], dx).expect("shape"),
        Tensor::new(vec![out, inp], dw).expect("shape"),
        db,
    )
}

fn column_sums(t: &Tensor) -> Tensor {
    let (_, cols) = t.rows_cols();
    let mut acc = vec![0f64; cols];
    for row in t.data().chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v as f64;
        }
    }
    Tensor::new(vec![cols], acc.into_iter().map(|v| v as f32).collect()).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        }
    }
}

/// Elementwise op between identical shapes, or between a tensor and a 0-d scalar.
pub fn binary(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let op = kind.name();
    let out = if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| kind.apply(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data)?
    } else if is_scalar(b) {
        let s = b.item();
        a.map(|x| kind.apply(x, s))
    } else if is_scalar(a) {
        let s = a.item();
        b.map(|y| kind.apply(s, y))
    } else {
        return shape_err(op, a.shape(), b.shape());
    };
    finite(out, op)
}

fn reduce_to(t: Tensor, like: &Tensor) -> Tensor {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::scalar(t.sum_f64() as f32)
    }
}

pub fn binary_backward(kind: BinaryKind, a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    match kind {
        BinaryKind::Add => (reduce_to(dy.clone(), a), reduce_to(dy.clone(), b)),
        BinaryKind::Sub => (reduce_to(dy.clone(), a), reduce_to(dy.map(|g| -g), b)),
        BinaryKind::Mul => {
            let expand = |t: &Tensor| -> Vec<f32> {
                if t.shape() == dy.shape() {
                    t.data().to_vec()
                } else {
                    vec![t.item(); dy.len()]
                }
            };
            let av = expand(a);
            let bv = expand(b);
            let da: Vec<f32> = dy.data().iter().zip(&bv).map(|(g, y)| g * y).collect();
            let db: Vec<f32> = dy.data().iter().zip(&av).map(|(g, x)| g * x).collect();
            (
                reduce_to(Tensor::new(dy.shape().to_vec(), da).expect("shape"), a),
                reduce_to(Tensor::new(dy.shape().to_vec(), db).expect("shape"), b),
            )
        }
    }
}

pub fn scale(x: &Tensor, c: f32) -> Result<Tensor> {
    finite(x.map(|v| v * c), "scale")
}

/// `tanh` through one `exp`; exact to f32 output precision and much cheaper
/// than the libm routine.
#[inline]
fn tanh_fast(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

pub fn gelu_tanh(x: &Tensor) -> Result<Tensor> {
    finite(
        x.map(|v| {
            let v = v as f64;
            let t = tanh_fast(GELU_C * (v + GELU_K * v * v * v));
            (0.5 * v * (1.0 + t)) as f32
        }),
        "gelu_tanh",
    )
}

pub fn gelu_tanh_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let v = v as f64;
            let u = GELU_C * (v + GELU_K * v * v * v);
            let t = tanh_fast(u);
            let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
            let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            (d * g as f64) as f32
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

/// Saved statistics for the layernorm backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f64>,
}

/// Normalizes the last dimension, then applies `gamma` and `beta`.
pub fn layernorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, LayerNormCache)> {
    if !(eps > 0.0) {
        return Err(NumError::InvalidArgument {
            op: "layernorm",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let (rows, d) = x.rows_cols();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return shape_err("layernorm", x.shape(), gamma.shape());
    }
    let mut out = vec![0.0f32; rows * d];
    let mut xhat = vec![0.0f32; rows * d];
    let mut rstd = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rs = 1.0 / (var + eps as f64).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] as f64 - mean) * rs;
            xhat[r * d + c] = h as f32;
            out[r * d + c] = (h * gamma.data()[c] as f64 + beta.data()[c] as f64) as f32;
        }
    }
    let y = finite(Tensor::new(x.shape().to_vec(), out)?, "layernorm")?;
    Ok((y, LayerNormCache { xhat, rstd }))
}

pub fn layernorm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, d) = dy.rows_cols();
    let mut dx = vec![0.0f32; rows * d];
    let mut dg = vec![0.0f64; d];
    let mut db = vec![0.0f64; d];
    let g = gamma.data();
    for r in 0..rows {
        let gy = &dy.data()[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxh = 0.0f64;
        let mut mean_dxh_xh = 0.0f64;
        for c in 0..d {
            let dxh = gy[c] as f64 * g[c] as f64;
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c] as f64;
            dg[c] += gy[c] as f64 * xh[c] as f64;
            db[c] += gy[c] as f64;
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let rs = cache.rstd[r];
        for c in 0..d {
            let dxh = gy[c] as f64 * g[c] as f64;
            dx[r * d + c] = (rs * (dxh - mean_dxh - xh[c] as f64 * mean_dxh_xh)) as f32;
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    (
        Tensor::new(dy.shape().to_vec(), dx).expect("shape"),
        Tensor::new(vec![d], to32(dg)).expect("shape"),
        Tensor::new(vec![d], to32(db)).expect("shape"),
    )
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut total = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v as f64 - max).exp();
        *o = e as f32;
        total += e;
    }
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v as f64 - max).exp() / total) as f32;
    }
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let (_, d) = x.rows_cols();
    let mut out = vec![0.0f32; x.len()];
    for (row, o) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        softmax_row(row, o);
    }
    finite(Tensor::new(x.shape().to_vec(), out)?, "softmax")
}

fn softmax_backward_rows(y: &[f32], dy: &[f32], d: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for ((yr, gr), out) in y
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let inner = dot64(yr, gr);
        for c in 0..d {
            out[c] = (yr[c] as f64 * (gr[c] as f64 - inner)) as f32;
        }
    }
    dx
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let (_, d) = y.rows_cols();
    Tensor::new(
        y.shape().to_vec(),
        softmax_backward_rows(y.data(), dy.data(), d),
    )
    .expect("shape")
}

/// Single-head scaled dot-product attention applied independently to each of
/// `groups` consecutive row blocks. Returns the output and the attention
/// probabilities (`groups × t × t`).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, groups: usize) -> Result<(Tensor, Vec<f32>)> {
    let (rows, d) = q.dims2("attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return shape_err("attention", q.shape(), k.shape());
    }
    if groups == 0 || rows % groups != 0 {
        return Err(NumError::InvalidArgument {
            op: "attention",
            reason: format!("{rows} rows do not split into {groups} groups"),
        });
    }
    let t = rows / groups;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Vec::with_capacity(rows * d);
    let mut probs = Vec::with_capacity(groups * t * t);
    for g in 0..groups {
        let span = g * t * d..(g + 1) * t * d;
        let qg = &q.data()[span.clone()];
        let kg = &k.data()[span.clone()];
        let vg = &v.data()[span];
        let mut s = gemm_nt(qg, kg, t, t, d);
        s.iter_mut().for_each(|x| *x *= scale);
        let mut p = vec![0.0f32; t * t];
        for (row, o) in s.chunks_exact(t).zip(p.chunks_exact_mut(t)) {
            softmax_row(row, o);
        }
        out.extend(gemm_nn(&p, vg, t, t, d));
        probs.extend(p);
    }
    let y = finite(Tensor::new(vec![rows, d], out)?, "attention")?;
    Ok((y, probs))
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f32],
    groups: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, d) = (q.shape()[0], q.shape()[1]);
    let t = rows / groups;
    let scale = 1.0 / (d as f32).sqrt();
    let mut dq = Vec::with_capacity(rows * d);
    let mut dk = Vec::with_capacity(rows * d);
    let mut dv = Vec::with_capacity(rows * d);
    for g in 0..groups {
        let span = g * t * d..(g + 1) * t * d;
        let qg = &q.data()[span.clone()];
        let kg = &k.data()[span.clone()];
        let vg = &v.data()[span.clone()];
        let dog = &dy.data()[span];
        let p = &probs[g * t * t..(g + 1) * t * t];
        dv.extend(gemm_tn(p, dog, t, t, d));
        let dp = gemm_nt(dog, vg, t, t, d);
        let mut ds = softmax_backward_rows(p, &dp, t);
        ds.iter_mut().for_each(|x| *x *= scale);
        dq.extend(gemm_nn(&ds, kg, t, t, d));
        dk.extend(gemm_tn(&ds, qg, t, t, d));
    }
    let mk = |v: Vec<f32>| Tensor::new(vec![rows, d], v).expect("shape");
    (mk(dq), mk(dk), mk(dv))
}

/// Multiplies every row of `x` elementwise by the vector `v`.
pub fn mul_row(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, d) = x.rows_cols();
    if v.shape() != [d] {
        return shape_err("mul_row", x.shape(), v.shape());
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        for (o, s) in row.iter_mut().zip(v.data()) {
            *o *= s;
        }
    }
    finite(Tensor::new(x.shape().to_vec(), out)?, "mul_row")
}

pub fn mul_row_backward(x: &Tensor, v: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (_, d) = x.rows_cols();
    let mut dx = dy.data().to_vec();
    let mut dv = vec![0.0f64; d];
    for (row, xr) in dx.chunks_exact_mut(d).zip(x.data().chunks_exact(d)) {
        for c in 0..d {
            dv[c] += row[c] as f64 * xr[c] as f64;
            row[c] *= v.data()[c];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(vec![d], dv.into_iter().map(|x| x as f32).collect()).expect("shape"),
    )
}

/// Adds row `g` of `c` (`groups × d`) to each row of the `g`-th block of `x`.
pub fn add_grouped(x: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (rows, d) = x.dims2("add_grouped")?;
    let (groups, d2) = c.dims2("add_grouped")?;
    if d != d2 || groups == 0 || rows % groups != 0 {
        return shape_err("add_grouped", x.shape(), c.shape());
    }
    let t = rows / groups;
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_exact_mut(d).enumerate() {
        let cr = c.row(r / t);
        for (o, s) in row.iter_mut().zip(cr) {
            *o += s;
        }
    }
    finite(Tensor::new(x.shape().to_vec(), out)?, "add_grouped")
}

pub fn add_grouped_backward(c: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (rows, d) = (dy.shape()[0], dy.shape()[1]);
    let groups = c.shape()[0];
    let t = rows / groups;
    let mut dc = vec![0.0f64; groups * d];
    for (r, row) in dy.data().chunks_exact(d).enumerate() {
        let g = r / t;
        for (a, v) in dc[g * d..(g + 1) * d].iter_mut().zip(row) {
            *a += *v as f64;
        }
    }
    (
        dy.clone(),
        Tensor::new(vec![groups, d], dc.into_iter().map(|x| x as f32).collect()).expect("shape"),
    )
}

/// `mean((a - b)^2)` as a 0-d tensor.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return shape_err("mse", a.shape(), b.shape());
    }
    if a.is_empty() {
        return Err(NumError::InvalidArgument {
            op: "mse",
            reason: "empty input".into(),
        });
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    finite(Tensor::scalar((s / a.len() as f64) as f32), "mse")
}

pub fn mse_backward(a: &Tensor, b: &Tensor, dy: f32) -> (Tensor, Tensor) {
    let k = 2.0 * dy as f64 / a.len() as f64;
    let da: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x as f64 - y as f64) * k) as f32)
        .collect();
    let db = da.iter().map(|v| -v).collect();
    (
        Tensor::new(a.shape().to_vec(), da).expect("shape"),
        Tensor::new(a.shape().to_vec(), db).expect("shape"),
    )
}

pub fn sum(x: &Tensor) -> Result<Tensor> {
    finite(Tensor::scalar(x.sum_f64() as f32), "sum")
}
