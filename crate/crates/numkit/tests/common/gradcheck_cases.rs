//! Finite-difference gradient cases shared by the numkit tests and the
//! workspace acceptance suite.
//!
//! The finite-difference side evaluates an independent `f64` reference of
//! each op (plain loops, written here), so the oracle shares no code with
//! the kernels under test.

use numkit::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const POINTS: usize = 12;

struct Case<'a> {
    name: &'a str,
    inputs: Vec<Tensor>,
    /// Builds the op on the tape from leaf inputs.
    build: &'a (dyn Fn(&mut Tape, &[Var]) -> Var + 'a),
    reference: &'a (dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a),
    /// `false` marks inputs held constant.
    differentiable: Vec<bool>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::randn(shape, scale, rng)
}

/// Loss = Σ probe_i · out_i with a fixed random probe. Returns the case name
/// and the worst relative error observed.
fn run(case: Case, seed: u64) -> (String, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_len = (case.reference)(
        &case
            .inputs
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect::<Vec<_>>(),
    )
    .len();
    let probe: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.differentiable)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let out = (case.build)(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let probe_t = tape.leaf(
        Tensor::new(shape, probe.iter().map(|&v| v as f32).collect()).unwrap(),
        false,
    );
    let weighted = tape.mul(out, probe_t).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let grads = tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let eval = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs)
            .iter()
            .zip(&probe)
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut worst = 0.0f64;
    for (which, var) in vars.iter().enumerate() {
        if !case.differentiable[which] {
            continue;
        }
        let analytic = grads.get(*var).expect("gradient present");
        let n = base[which].len();
        let picks: Vec<usize> = if n <= POINTS {
            (0..n).collect()
        } else {
            (0..POINTS).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut pairs = Vec::new();
        for &p in &picks {
            let mut plus = base.clone();
            plus[which][p] += H;
            let mut minus = base.clone();
            minus[which][p] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            pairs.push((analytic.data()[p] as f64, numeric));
        }
        let rms = (pairs.iter().map(|(_, n)| n * n).sum::<f64>() / pairs.len() as f64).sqrt();
        for (a, num) in pairs {
            let denom = a.abs().max(num.abs()).max(1e-2 * rms).max(1e-12);
            let rel = (a - num).abs() / denom;
            worst = worst.max(rel);
        }
    }
    (case.name.to_string(), worst)
}

// ---- f64 references ----

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn ref_softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn ref_layernorm(x: &[f64], g: &[f64], b: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * rs * g[c] + b[c]),
        );
    }
    out
}

fn ref_attention(q: &[f64], k: &[f64], v: &[f64], groups: usize, d: usize) -> Vec<f64> {
    let t = q.len() / d / groups;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::new();
    for g in 0..groups {
        let off = g * t * d;
        let mut s = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += q[off + i * d + c] * k[off + j * d + c];
                }
                s[i * t + j] = acc * scale;
            }
        }
        let p = ref_softmax_rows(&s, t);
        for i in 0..t {
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..t {
                    acc += p[i * t + j] * v[off + j * d + c];
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn matmul_sum_of_entries_gradient(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[5, 7], 1.0);
    let b = rand_tensor(&mut rng, &[7, 3], 1.0);
    out.push(run(
        Case {
            name: "matmul",
            inputs: vec![a, b],
            build: &|t, v| t.matmul(v[0], v[1]).unwrap(),
            reference: &|x| ref_matmul(&x[0], &x[1], 5, 7, 3),
            differentiable: vec![true, true],
        },
        11,
    ));
}

pub fn linear_gradient(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[6, 5], 1.0);
    let w = rand_tensor(&mut rng, &[4, 5], 0.5);
    let b = rand_tensor(&mut rng, &[4], 0.5);
    out.push(run(
        Case {
            name: "linear",
            inputs: vec![x, w, b],
            build: &|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap(),
            reference: &|x| {
                let wt: Vec<f64> = (0..5)
                    .flat_map(|i| (0..4).map(move |o| (i, o)))
                    .map(|(i, o)| x[1][o * 5 + i])
                    .collect();
                let mut y = ref_matmul(&x[0], &wt, 6, 5, 4);
                for r in 0..6 {
                    for o in 0..4 {
                        y[r * 4 + o] += x[2][o];
                    }
                }
                y
            },
            differentiable: vec![true, true, true],
        },
        12,
    ));
}

pub fn elementwise_binary_gradients(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[4, 5], 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], 1.0);
    let s = Tensor::scalar(0.7);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let w = run(
            Case {
                name,
                inputs: vec![a.clone(), b.clone()],
                build: &|t, v| match which {
                    0 => t.add(v[0], v[1]).unwrap(),
                    1 => t.sub(v[0], v[1]).unwrap(),
                    _ => t.mul(v[0], v[1]).unwrap(),
                },
                reference: &|x| {
                    x[0].iter()
                        .zip(&x[1])
                        .map(move |(p, q)| match which {
                            0 => p + q,
                            1 => p - q,
                            _ => p * q,
                        })
                        .collect()
                },
                differentiable: vec![true, true],
            },
            20 + which as u64,
        );
        out.push(w);
    }
    let w = run(
        Case {
            name: "mul-scalar",
            inputs: vec![a.clone(), s],
            build: &|t, v| t.mul(v[0], v[1]).unwrap(),
            reference: &|x| x[0].iter().map(|p| p * x[1][0]).collect(),
            differentiable: vec![true, true],
        },
        24,
    );
    out.push(w);
}

pub fn gelu_gradient_at_seventeen_points(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[17], 1.5);
    out.push(run(
        Case {
            name: "gelu_tanh",
            inputs: vec![x],
            build: &|t, v| t.gelu_tanh(v[0]).unwrap(),
            reference: &|x| x[0].iter().map(|&v| ref_gelu(v)).collect(),
            differentiable: vec![true],
        },
        13,
    ));
}

pub fn layernorm_gradient(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 8], 1.0);
    let g = rand_tensor(&mut rng, &[8], 1.0);
    let b = rand_tensor(&mut rng, &[8], 1.0);
    out.push(run(
        Case {
            name: "layernorm",
            inputs: vec![x, g, b],
            build: &|t, v| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap(),
            reference: &|x| ref_layernorm(&x[0], &x[1], &x[2], 8, 1e-5),
            differentiable: vec![true, true, true],
        },
        14,
    ));
}

pub fn softmax_gradient(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 6], 1.0);
    out.push(run(
        Case {
            name: "softmax",
            inputs: vec![x],
            build: &|t, v| t.softmax_lastdim(v[0]).unwrap(),
            reference: &|x| ref_softmax_rows(&x[0], 6),
            differentiable: vec![true],
        },
        15,
    ));
}

pub fn attention_gradient(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = rand_tensor(&mut rng, &[8, 4], 1.0);
    let k = rand_tensor(&mut rng, &[8, 4], 1.0);
    let v = rand_tensor(&mut rng, &[8, 4], 1.0);
    out.push(run(
        Case {
            name: "attention",
            inputs: vec![q, k, v],
            build: &|t, v| t.attention(v[0], v[1], v[2], 2).unwrap(),
            reference: &|x| ref_attention(&x[0], &x[1], &x[2], 2, 4),
            differentiable: vec![true, true, true],
        },
        16,
    ));
}

pub fn row_and_group_broadcast_gradients(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[6, 4], 1.0);
    let v = rand_tensor(&mut rng, &[4], 1.0);
    let c = rand_tensor(&mut rng, &[2, 4], 1.0);
    out.push(run(
        Case {
            name: "mul_row",
            inputs: vec![x.clone(), v],
            build: &|t, v| t.mul_row(v[0], v[1]).unwrap(),
            reference: &|x| {
                x[0].iter()
                    .enumerate()
                    .map(|(i, a)| a * x[1][i % 4])
                    .collect()
            },
            differentiable: vec![true, true],
        },
        17,
    ));
    out.push(run(
        Case {
            name: "add_grouped",
            inputs: vec![x, c],
            build: &|t, v| t.add_grouped(v[0], v[1]).unwrap(),
            reference: &|x| {
                x[0].iter()
                    .enumerate()
                    .map(|(i, a)| a + x[1][(i / 4 / 3) * 4 + i % 4])
                    .collect()
            },
            differentiable: vec![true, true],
        },
        18,
    ));
}

pub fn scale_and_mse_gradients(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[3, 5], 1.0);
    let b = rand_tensor(&mut rng, &[3, 5], 1.0);
    out.push(run(
        Case {
            name: "scale",
            inputs: vec![a.clone()],
            build: &|t, v| t.scale(v[0], -1.7).unwrap(),
            reference: &|x| x[0].iter().map(|v| v * -1.7f32 as f64).collect(),
            differentiable: vec![true],
        },
        19,
    ));
    out.push(run(
        Case {
            name: "mse",
            inputs: vec![a, b],
            build: &|t, v| t.mse(v[0], v[1]).unwrap(),
            reference: &|x| {
                let n = x[0].len() as f64;
                vec![
                    x[0].iter()
                        .zip(&x[1])
                        .map(|(p, q)| (p - q).powi(2))
                        .sum::<f64>()
                        / n,
                ]
            },
            differentiable: vec![true, true],
        },
        30,
    ));
}

pub fn composite_chain_gradient(out: &mut Vec<(String, f64)>) {
    // layernorm -> linear -> gelu -> linear: exercises accumulation across nodes.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[4, 6], 1.0);
    let w1 = rand_tensor(&mut rng, &[8, 6], 0.4);
    let w2 = rand_tensor(&mut rng, &[6, 8], 0.4);
    let g = Tensor::full(&[6], 1.0);
    let b = Tensor::zeros(&[6]);
    out.push(run(
        Case {
            name: "chain",
            inputs: vec![x, w1, w2, g, b],
            build: &|t, v| {
                let h = t.layernorm(v[0], v[3], v[4], 1e-5).unwrap();
                let h = t.linear(h, v[1], None).unwrap();
                let h = t.gelu_tanh(h).unwrap();
                let h = t.linear(h, v[2], None).unwrap();
                t.add(h, v[0]).unwrap()
            },
            reference: &|x| {
                let h = ref_layernorm(&x[0], &x[3], &x[4], 6, 1e-5);
                let w1t: Vec<f64> = (0..6)
                    .flat_map(|i| (0..8).map(move |o| (i, o)))
                    .map(|(i, o)| x[1][o * 6 + i])
                    .collect();
                let h: Vec<f64> = ref_matmul(&h, &w1t, 4, 6, 8)
                    .into_iter()
                    .map(ref_gelu)
                    .collect();
                let w2t: Vec<f64> = (0..8)
                    .flat_map(|i| (0..6).map(move |o| (i, o)))
                    .map(|(i, o)| x[2][o * 8 + i])
                    .collect();
                ref_matmul(&h, &w2t, 4, 8, 6)
                    .iter()
                    .zip(&x[0])
                    .map(|(a, b)| a + b)
                    .collect()
            },
            differentiable: vec![true, true, true, false, false],
        },
        31,
    ));
}

/// Every case, in a fixed order.
pub fn all() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    matmul_sum_of_entries_gradient(&mut out);
    linear_gradient(&mut out);
    elementwise_binary_gradients(&mut out);
    gelu_gradient_at_seventeen_points(&mut out);
    layernorm_gradient(&mut out);
    softmax_gradient(&mut out);
    attention_gradient(&mut out);
    row_and_group_broadcast_gradients(&mut out);
    scale_and_mse_gradients(&mut out);
    composite_chain_gradient(&mut out);
    out
}
