//! Matrix-product kernels.
//!
//! Every product is expressed as `out[i, j] = dot(a[i, :], b[j, :])` over
//! contiguous rows, accumulated in `f64` across eight fixed lanes. The lane
//! layout fixes the summation order, so results are bit-identical whether the
//! AVX2 or the baseline code path runs.

#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    reduce_lanes(&acc, tail)
}

#[inline(always)]
fn reduce_lanes(acc: &[f64; 8], tail: f64) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Four outputs of one row at once. Each output keeps the lane order of
/// `dot_lanes`, so the result matches it bit for bit.
#[inline(always)]
fn dot_lanes4(a: &[f32], b: [&[f32]; 4]) -> [f64; 4] {
    let k = a.len();
    let full = k / 8 * 8;
    let mut acc = [[0f64; 8]; 4];
    let mut p = 0;
    while p < full {
        let x = &a[p..p + 8];
        for (c, bc) in b.iter().enumerate() {
            let y = &bc[p..p + 8];
            for l in 0..8 {
                acc[c][l] += x[l] as f64 * y[l] as f64;
            }
        }
        p += 8;
    }
    let mut out = [0f64; 4];
    for (c, bc) in b.iter().enumerate() {
        let mut tail = 0.0;
        for q in full..k {
            tail += a[q] as f64 * bc[q] as f64;
        }
        out[c] = reduce_lanes(&acc[c], tail);
    }
    out
}

#[inline(always)]
fn gemm_nt_body(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    let n4 = n / 4 * 4;
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j < n4 {
            let r = dot_lanes4(
                ar,
                [
                    &b[j * k..(j + 1) * k],
                    &b[(j + 1) * k..(j + 2) * k],
                    &b[(j + 2) * k..(j + 3) * k],
                    &b[(j + 3) * k..(j + 4) * k],
                ],
            );
            for c in 0..4 {
                o[j + c] = r[c] as f32;
            }
            j += 4;
        }
        for jj in n4..n {
            o[jj] = dot_lanes(ar, &b[jj * k..(jj + 1) * k]) as f32;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nt_avx2(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    gemm_nt_body(a, b, m, n, k, out)
}

/// `out (m×n) = a (m×k) · bᵀ` where `b` is stored `n×k`.
pub fn gemm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_nt_avx2(a, b, m, n, k, &mut out) };
            return out;
        }
    }
    gemm_nt_body(a, b, m, n, k, &mut out);
    out
}

/// `a (m×k) · b (k×n)`.
pub fn gemm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let bt = transpose(b, k, n);
    gemm_nt(a, &bt, m, n, k)
}

/// `aᵀ · b` with `a` stored `k×m` and `b` stored `k×n`; the result is `m×n`.
pub fn gemm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let at = transpose(a, k, m);
    let bt = transpose(b, k, n);
    gemm_nt(&at, &bt, m, n, k)
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Plain `f64` dot, used by reductions outside the matmul path.
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    dot_lanes(a, b)
}
