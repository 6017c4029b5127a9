//! Small dense `f64` linear algebra: a cyclic Jacobi eigensolver for symmetric
//! matrices and a Cholesky-based ridge least-squares solver.

use crate::error::{NumError, Result};
use crate::kernels::dot64;
use crate::tensor::Tensor;

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2("mat64")?;
        Ok(Self {
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("shape")
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.at(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat64) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.at(i, p);
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * other.cols..(p + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Mat64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.at(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat64) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Eigen-decomposition of a symmetric matrix: ascending eigenvalues and the
/// matching eigenvectors as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Mat64,
}

impl SymEig {
    /// `V · diag(h(λ)) · Vᵀ`.
    pub fn reconstruct_with(&self, h: impl Fn(f64) -> f64) -> Mat64 {
        let n = self.values.len();
        let mut out = Mat64::zeros(n, n);
        for k in 0..n {
            let s = h(self.values[k]);
            if s == 0.0 {
                continue;
            }
            for i in 0..n {
                let vik = self.vectors.at(i, k) * s;
                for j in 0..n {
                    out.data[i * n + j] += vik * self.vectors.at(j, k);
                }
            }
        }
        out
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_OFF_TOL: f64 = 1e-9;

/// Cyclic Jacobi rotations on `(S + Sᵀ)/2`.
///
/// Converged when the off-diagonal Frobenius norm falls to
/// `JACOBI_OFF_TOL · ‖S‖_F`.
pub fn sym_eig64(s: &Mat64, name: &str) -> Result<SymEig> {
    let n = s.rows;
    if s.cols != n {
        return Err(NumError::Shape {
            op: "sym_eig",
            lhs: vec![s.rows, s.cols],
            rhs: vec![s.cols, s.rows],
        });
    }
    let mut a = Mat64::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (s.at(i, j) + s.at(j, i)));
        }
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite { op: "sym_eig" });
    }
    let mut v = Mat64::identity(n);
    let scale = a.frobenius();
    let off = |a: &Mat64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a.at(i, j) * a.at(i, j);
                }
            }
        }
        acc.sqrt()
    };
    let target = JACOBI_OFF_TOL * scale;
    let mut converged = scale == 0.0 || off(&a) <= target;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
        converged = off(&a) <= target;
    }
    if !converged {
        return Err(NumError::NoConvergence {
            name: name.to_string(),
            sweeps,
            off: off(&a),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(i, i).total_cmp(&a.at(j, j)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vectors = Mat64::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new, v.at(k, old));
        }
    }
    Ok(SymEig { values, vectors })
}

/// Symmetric eigen-decomposition of an `f32` tensor. Inputs must be symmetric
/// to within `1e-6` (relative to the largest entry).
pub fn sym_eig(s: &Tensor) -> Result<(Tensor, Tensor)> {
    let m = Mat64::from_tensor(s)?;
    if m.rows != m.cols {
        return Err(NumError::Shape {
            op: "sym_eig",
            lhs: s.shape().to_vec(),
            rhs: vec![m.cols, m.rows],
        });
    }
    let big = m.data.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let asym = m.max_abs_diff(&m.transpose());
    if asym > 1e-6 * big {
        return Err(NumError::InvalidArgument {
            op: "sym_eig",
            reason: format!("matrix is not symmetric (max |S - Sᵀ| = {asym})"),
        });
    }
    let eig = sym_eig64(&m, "sym_eig input")?;
    let values = Tensor::new(vec![m.rows], eig.values.iter().map(|&v| v as f32).collect())?;
    Ok((values, eig.vectors.to_tensor()))
}

/// Square root of a symmetric positive semi-definite matrix, clamping the
/// (round-off) negative eigenvalues to zero.
pub fn psd_sqrt(s: &Mat64, name: &str) -> Result<Mat64> {
    let eig = sym_eig64(s, name)?;
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Mat64) -> Result<Mat64> {
    let n = a.rows;
    let max_diag = (0..n).map(|i| a.at(i, i).abs()).fold(0.0f64, f64::max);
    let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Mat64::zeros(n, n);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if !(d > floor) {
            return Err(NumError::Singular { row: j, pivot: d });
        }
        let dj = d.sqrt();
        l.set(j, j, dj);
        for i in j + 1..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / dj);
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` in place.
pub fn cholesky_solve(l: &Mat64, b: &mut [f64]) {
    let n = l.rows;
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.at(i, k) * b[k];
        }
        b[i] = s / l.at(i, i);
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l.at(k, i) * b[k];
        }
        b[i] = s / l.at(i, i);
    }
}

/// Gram matrix `X Xᵀ` of the rows of a 2-d tensor, accumulated in `f64`.
pub fn gram_rows(x: &Tensor) -> Result<Mat64> {
    let (r, _) = x.dims2("gram")?;
    let mut g = Mat64::zeros(r, r);
    for i in 0..r {
        for j in 0..=i {
            let v = dot64(x.row(i), x.row(j));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    Ok(g)
}

/// Default ridge strength: `factor · trace(X̃X̃ᵀ) / (k+1)`.
pub fn scaled_ridge(gram: &Mat64, factor: f64) -> f64 {
    factor * gram.trace() / gram.rows.max(1) as f64
}

/// `argmin_W ‖W·X̃ − T‖² + λ‖W‖²` for `x_aug` of shape `(k+1)×n` whose last
/// row is all ones, and targets `t` of shape `m×n`. Returns `m×(k+1)`; the last
/// column is the bias.
pub fn ridge_lstsq(x_aug: &Tensor, t: &Tensor, lambda: f64) -> Result<Tensor> {
    let (k1, n) = x_aug.dims2("ridge_lstsq")?;
    let (_, n2) = t.dims2("ridge_lstsq")?;
    if n != n2 {
        return Err(NumError::Shape {
            op: "ridge_lstsq",
            lhs: x_aug.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(NumError::InvalidArgument {
            op: "ridge_lstsq",
            reason: format!("lambda must be finite and non-negative, got {lambda}"),
        });
    }
    if k1 == 0 || x_aug.row(k1 - 1).iter().any(|&v| v != 1.0) {
        return Err(NumError::InvalidArgument {
            op: "ridge_lstsq",
            reason: "last row of the design matrix must be all ones".into(),
        });
    }
    let gram = gram_rows(x_aug)?;
    ridge_from_gram(&gram, &cross_rows(t, x_aug), lambda)
}

/// `T · X̃ᵀ` (m × (k+1)) accumulated in `f64`.
pub fn cross_rows(t: &Tensor, x_aug: &Tensor) -> Mat64 {
    let m = t.shape()[0];
    let k1 = x_aug.shape()[0];
    let mut c = Mat64::zeros(m, k1);
    for i in 0..m {
        for j in 0..k1 {
            c.set(i, j, dot64(t.row(i), x_aug.row(j)));
        }
    }
    c
}

/// Solves `W (G + λI) = C` for `W`, given the Gram matrix `G` and cross term `C`.
pub fn ridge_from_gram(gram: &Mat64, cross: &Mat64, lambda: f64) -> Result<Tensor> {
    let k1 = gram.rows;
    let mut reg = gram.clone();
    for i in 0..k1 {
        reg.data[i * k1 + i] += lambda;
    }
    let l = cholesky(&reg)?;
    let mut out = Vec::with_capacity(cross.rows * k1);
    for i in 0..cross.rows {
        let mut row = cross.data[i * k1..(i + 1) * k1].to_vec();
        cholesky_solve(&l, &mut row);
        out.extend(row.into_iter().map(|v| v as f32));
    }
    let w = Tensor::new(vec![cross.rows, k1], out)?;
    w.ensure_finite("ridge_lstsq")?;
    Ok(w)
}
