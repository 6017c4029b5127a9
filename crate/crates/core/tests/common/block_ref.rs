//! Plain `f64` loops computing one dense block, used as the
//! finite-difference side of the block gradient check.

use std::collections::BTreeMap;

use numkit::{Tape, Tensor};
use rand::Rng;
use resprune::toymodel::{
    Binder, BlockKind, DenseParam, LoraPart, ParamKey, ToyModel, WeightName, LN_EPS,
};

use super::rng;

pub type Params = BTreeMap<ParamKey, Vec<f64>>;

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// y = x·Wᵀ + b for `rows × inp` x and `out × inp` W.
fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, inp: usize, out: usize) -> Vec<f64> {
    let rows = x.len() / inp;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..inp {
                acc += x[r * inp + i] * w[o * inp + i];
            }
            y[r * out + o] = acc;
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn layernorm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS as f64).sqrt();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * rs * g[c] + b[c]),
        );
    }
    out
}

fn attention(q: &[f64], k: &[f64], v: &[f64], groups: usize, d: usize) -> Vec<f64> {
    let t = q.len() / d / groups;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    for g in 0..groups {
        let off = g * t * d;
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| {
                    (0..d)
                        .map(|c| q[off + i * d + c] * k[off + j * d + c])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                out[off + i * d + c] = (0..t).map(|j| e[j] / z * v[off + j * d + c]).sum();
            }
        }
    }
    out
}

/// Every parameter tensor of block `i`, including its adapters.
pub fn block_params(model: &ToyModel, i: usize) -> Params {
    model
        .param_keys()
        .into_iter()
        .filter(|k| k.block() == Some(i))
        .map(|k| (k, to64(model.param(k).unwrap())))
        .collect()
}

fn weight(p: &Params, model: &ToyModel, i: usize, name: WeightName) -> Vec<f64> {
    let mut w = p[&ParamKey::Dense {
        block: i,
        param: DenseParam::Weight(name),
    }]
        .clone();
    let Some(ad) = model.blocks[i].adapters.get(&name) else {
        return w;
    };
    let a = &p[&ParamKey::Adapter {
        block: i,
        weight: name,
        part: LoraPart::A,
    }];
    let b = &p[&ParamKey::Adapter {
        block: i,
        weight: name,
        part: LoraPart::B,
    }];
    let (r, s) = (ad.rank, ad.alpha as f64 / ad.rank as f64);
    let inp = a.len() / r;
    let out = b.len() / r;
    for o in 0..out {
        for c in 0..inp {
            w[o * inp + c] += s * (0..r).map(|k| b[o * r + k] * a[k * inp + c]).sum::<f64>();
        }
    }
    w
}

/// Output of dense block `i` (`x + f(x)`) with parameters taken from `p`.
pub fn dense_block(
    model: &ToyModel,
    i: usize,
    p: &Params,
    x: &[f64],
    cemb: &[f64],
    groups: usize,
) -> Vec<f64> {
    let d = model.config.d_model;
    let h_dim = model.config.hidden();
    let key = |param| ParamKey::Dense { block: i, param };
    let rows = x.len() / d;
    let t = rows / groups;
    let mut h = layernorm(
        x,
        &p[&key(DenseParam::LnGamma)],
        &p[&key(DenseParam::LnBeta)],
        d,
    );
    let m = &p[&key(DenseParam::Modulation)];
    for r in 0..rows {
        for c in 0..d {
            h[r * d + c] += cemb[(r / t) * d + c] * m[c];
        }
    }
    let u = linear(
        &h,
        &weight(p, model, i, WeightName::W1),
        Some(&p[&key(DenseParam::B1)]),
        d,
        h_dim,
    );
    let u: Vec<f64> = u.into_iter().map(gelu).collect();
    let mut f = linear(
        &u,
        &weight(p, model, i, WeightName::W2),
        Some(&p[&key(DenseParam::B2)]),
        h_dim,
        d,
    );
    if model.blocks[i].kind == BlockKind::Double {
        let q = linear(&h, &weight(p, model, i, WeightName::Wq), None, d, d);
        let k = linear(&h, &weight(p, model, i, WeightName::Wk), None, d, d);
        let v = linear(&h, &weight(p, model, i, WeightName::Wv), None, d, d);
        let a = attention(&q, &k, &v, groups, d);
        let o = linear(&a, &weight(p, model, i, WeightName::Wo), None, d, d);
        f.iter_mut().zip(o).for_each(|(f, o)| *f += o);
    }
    x.iter().zip(f).map(|(x, f)| x + f).collect()
}

pub struct ParamCheck {
    pub key: ParamKey,
    pub points: usize,
    pub worst: f64,
}

/// Tape gradients of `Σ probe · block_i(x)` for every parameter of block `i`
/// against central differences of [`dense_block`] at `points` random entries.
pub fn check_block(
    model: &ToyModel,
    i: usize,
    groups: usize,
    points: usize,
    seed: u64,
) -> Vec<ParamCheck> {
    let d = model.config.d_model;
    let rows = groups * model.config.n_tokens;
    let mut r = rng(seed);
    let x = Tensor::randn(&[rows, d], 1.0, &mut r);
    let cemb = Tensor::randn(&[groups, d], 1.0, &mut r);
    let probe = Tensor::randn(&[rows, d], 1.0, &mut r);

    let params = block_params(model, i);
    let keys: std::collections::BTreeSet<ParamKey> = params.keys().copied().collect();
    let mut tape = Tape::new();
    let mut binder = Binder::training(&keys);
    let xv = tape.leaf(x.clone(), false);
    let cv = tape.leaf(cemb.clone(), false);
    let (out, _) = model
        .block_graph(&mut tape, &mut binder, i, &xv, &cv, groups)
        .unwrap();
    let pv = tape.leaf(probe.clone(), false);
    let weighted = tape.mul(out, pv).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let grads = tape.backward(loss).unwrap();
    let bound = binder.into_bound();

    let (x64, c64, p64) = (to64(&x), to64(&cemb), to64(&probe));
    let eval = |p: &Params| -> f64 {
        dense_block(model, i, p, &x64, &c64, groups)
            .iter()
            .zip(&p64)
            .map(|(a, b)| a * b)
            .sum()
    };
    let h = 1e-3;
    let mut out = Vec::new();
    for (key, var) in bound {
        let analytic = grads.get(var).expect("trainable parameter has a gradient");
        let n = params[&key].len();
        let picks: Vec<usize> = if n <= points {
            (0..n).collect()
        } else {
            (0..points).map(|_| r.gen_range(0..n)).collect()
        };
        let mut pairs = Vec::new();
        for &idx in &picks {
            let mut plus = params.clone();
            plus.get_mut(&key).unwrap()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(&key).unwrap()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            pairs.push((analytic.data()[idx] as f64, numeric));
        }
        let rms = (pairs.iter().map(|(_, n)| n * n).sum::<f64>() / pairs.len() as f64).sqrt();
        let worst = pairs
            .iter()
            .map(|&(a, num)| (a - num).abs() / a.abs().max(num.abs()).max(1e-2 * rms).max(1e-12))
            .fold(0.0, f64::max);
        out.push(ParamCheck {
            key,
            points: picks.len(),
            worst,
        });
    }
    out
}
