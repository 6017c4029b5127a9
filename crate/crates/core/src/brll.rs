//! Least-squares affine replacement of residual branches.

use numkit::linalg::{cross_rows, gram_rows, ridge_from_gram, scaled_ridge};
use numkit::{kernels, NumError, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::toymodel::{Binder, Branch, Linear, ToyModel};

/// Ridge factor used by [`LambdaPolicy::ScaledRidge`] by default and for the
/// retry after a singular unregularized solve.
pub const DEFAULT_RIDGE_FACTOR: f64 = 1e-4;
/// Ridge factor floor applied when there are fewer columns than unknowns.
pub const UNDERDETERMINED_RIDGE_FACTOR: f64 = 1e-2;
/// Fraction of samples held out for diagnostics.
pub const HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LambdaPolicy {
    /// Absolute ridge strength.
    Fixed(f64),
    /// `factor · trace(X̃X̃ᵀ) / (k+1)`.
    ScaledRidge(f64),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::ScaledRidge(DEFAULT_RIDGE_FACTOR)
    }
}

/// Activation pairs for one block, in column layout: one column per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LSProblem {
    pub block: usize,
    /// `(d+1) × n` with a trailing row of ones.
    pub x_aug: Tensor,
    /// `d × n` residual-branch outputs.
    pub targets: Tensor,
    pub holdout_x_aug: Tensor,
    pub holdout_targets: Tensor,
    pub policy: LambdaPolicy,
    /// Smallest ridge factor allowed; raised when the system is underdetermined.
    pub ridge_floor: f64,
    pub n_samples: usize,
    pub n_holdout_samples: usize,
    pub warnings: Vec<String>,
}

impl LSProblem {
    /// Builds a problem from row-layout pairs (`rows × d` each) of
    /// `n_samples` samples with `tokens` rows per sample. The final 10% of
    /// samples form the holdout split.
    pub fn from_rows(
        block: usize,
        x: &Tensor,
        fx: &Tensor,
        tokens: usize,
        policy: LambdaPolicy,
    ) -> Result<Self> {
        let (rows, d) = x.dims2("collect_pairs")?;
        if fx.shape() != x.shape() {
            return Err(Error::State(format!(
                "pair shapes differ: {:?} vs {:?}",
                x.shape(),
                fx.shape()
            )));
        }
        if tokens == 0 || rows % tokens != 0 {
            return Err(Error::State(format!(
                "{rows} rows do not split into samples of {tokens}"
            )));
        }
        let n_samples = rows / tokens;
        let n_hold = (n_samples as f64 * HOLDOUT_FRACTION).floor() as usize;
        let split = (n_samples - n_hold) * tokens;
        let to_cols = |t: &Tensor, lo: usize, hi: usize, aug: bool| -> Result<Tensor> {
            let n = hi - lo;
            let mut data = kernels::transpose(&t.data()[lo * d..hi * d], n, d);
            if aug {
                data.extend(std::iter::repeat(1.0).take(n));
            }
            Ok(Tensor::new(vec![d + aug as usize, n], data)?)
        };
        let mut warnings = Vec::new();
        let mut ridge_floor = 0.0;
        if split < d + 1 {
            let msg = format!(
                "block {block}: {split} fitting columns for {} unknowns per output; ridge floor raised to {UNDERDETERMINED_RIDGE_FACTOR}",
                d + 1
            );
            log::warn!("{msg}");
            warnings.push(msg);
            ridge_floor = UNDERDETERMINED_RIDGE_FACTOR;
        }
        Ok(Self {
            block,
            x_aug: to_cols(x, 0, split, true)?,
            targets: to_cols(fx, 0, split, false)?,
            holdout_x_aug: to_cols(x, split, rows, true)?,
            holdout_targets: to_cols(fx, split, rows, false)?,
            policy,
            ridge_floor,
            n_samples,
            n_holdout_samples: n_hold,
            warnings,
        })
    }

    pub fn d_model(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn n_columns(&self) -> usize {
        self.targets.shape()[1]
    }
}

impl ToyModel {
    /// Residual-branch input and output of block `i` for a batch, in rows
    /// layout, computed with everything before `i` as currently loaded.
    pub fn branch_pairs(&self, batch: &Batch, i: usize) -> Result<(Tensor, Tensor)> {
        self.block(i)?;
        let (x, c) = self.embed(&batch.tokens, &batch.cond)?;
        let x = if i == 0 {
            x
        } else {
            self.run_span(0..=i - 1, x, &c)?
        };
        let groups = c.shape()[0];
        let (_, f) =
            self.block_graph(&mut numkit::Eager, &mut Binder::frozen(), i, &x, &c, groups)?;
        let f =
            f.ok_or_else(|| Error::State(format!("block {i} has no residual branch to sample")))?;
        Ok((x, f))
    }
}

/// Captures `(X, f(X))` at block `i` of the current model.
pub fn collect_pairs(
    model: &ToyModel,
    block: usize,
    batch: &Batch,
    policy: LambdaPolicy,
) -> Result<LSProblem> {
    let (x, f) = model.branch_pairs(batch, block)?;
    LSProblem::from_rows(block, &x, &f, model.config.n_tokens, policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub train_mse: f64,
    /// `None` when the holdout split is empty.
    pub holdout_mse: Option<f64>,
    pub lambda: f64,
    pub n_samples: usize,
    pub n_columns: usize,
    /// The unregularized solve was singular and was retried with ridge.
    pub retried: bool,
    pub refine_passes: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: usize,
    pub st_updated: bool,
}

/// An affine surrogate `g(X) = W·X + b` for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementRecord {
    pub block: usize,
    /// d × d
    pub w: Tensor,
    /// d
    pub b: Tensor,
    pub diagnostics: FitDiagnostics,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Extra passes refitting the remaining residual `f(X) − g(X)`.
    pub refine_passes: usize,
}

fn residual_mse(w: &Tensor, x_aug: &Tensor, t: &Tensor) -> Option<f64> {
    let (m, k1) = (w.shape()[0], w.shape()[1]);
    let n = x_aug.shape()[1];
    if n == 0 {
        return None;
    }
    let pred = kernels::gemm_nn(w.data(), x_aug.data(), m, k1, n);
    let sse: f64 = pred
        .iter()
        .zip(t.data())
        .map(|(p, y)| ((p - y) as f64).powi(2))
        .sum();
    Some(sse / (m * n) as f64)
}

fn solve(block: usize, gram: &numkit::Mat64, cross: &numkit::Mat64, lambda: f64) -> Result<Tensor> {
    ridge_from_gram(gram, cross, lambda).map_err(|e| match e {
        NumError::Singular { .. } | NumError::NonFinite { .. } => Error::Fit {
            block,
            reason: e.to_string(),
        },
        other => Error::Num(other),
    })
}

/// Ridge least squares on the problem; `W*` is split into `W` and `b`.
pub fn fit_linear(problem: &LSProblem, opts: &FitOptions) -> Result<ReplacementRecord> {
    let d = problem.d_model();
    let block = problem.block;
    let gram = gram_rows(&problem.x_aug)?;
    let cross = cross_rows(&problem.targets, &problem.x_aug);
    let floor = scaled_ridge(&gram, problem.ridge_floor);
    let lambda = match problem.policy {
        LambdaPolicy::Fixed(l) => l,
        LambdaPolicy::ScaledRidge(f) => scaled_ridge(&gram, f),
    }
    .max(floor);
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("invalid ridge strength {lambda}")));
    }
    let mut retried = false;
    let (mut w_aug, lambda) = match solve(block, &gram, &cross, lambda) {
        Ok(w) => (w, lambda),
        Err(Error::Fit { .. }) if lambda == 0.0 => {
            let l = scaled_ridge(&gram, DEFAULT_RIDGE_FACTOR);
            log::warn!("block {block}: singular normal matrix, retrying with lambda {l:e}");
            retried = true;
            (solve(block, &gram, &cross, l)?, l)
        }
        Err(e) => return Err(e),
    };
    for _ in 0..opts.refine_passes {
        let (m, k1) = (d, d + 1);
        let n = problem.n_columns();
        let pred = kernels::gemm_nn(w_aug.data(), problem.x_aug.data(), m, k1, n);
        let resid: Vec<f32> = problem
            .targets
            .data()
            .iter()
            .zip(&pred)
            .map(|(t, p)| t - p)
            .collect();
        let resid = Tensor::new(vec![m, n], resid)?;
        let delta = solve(block, &gram, &cross_rows(&resid, &problem.x_aug), lambda)?;
        let updated: Vec<f32> = w_aug
            .data()
            .iter()
            .zip(delta.data())
            .map(|(a, b)| a + b)
            .collect();
        w_aug = Tensor::new(vec![m, k1], updated)?;
    }
    let train_mse = residual_mse(&w_aug, &problem.x_aug, &problem.targets).unwrap_or(0.0);
    let holdout_mse = residual_mse(&w_aug, &problem.holdout_x_aug, &problem.holdout_targets);
    let mut w = Vec::with_capacity(d * d);
    let mut b = Vec::with_capacity(d);
    for r in 0..d {
        let row = w_aug.row(r);
        w.extend_from_slice(&row[..d]);
        b.push(row[d]);
    }
    Ok(ReplacementRecord {
        block,
        w: Tensor::new(vec![d, d], w)?,
        b: Tensor::new(vec![d], b)?,
        diagnostics: FitDiagnostics {
            train_mse,
            holdout_mse,
            lambda,
            n_samples: problem.n_samples,
            n_columns: problem.n_columns(),
            retried,
            refine_passes: opts.refine_passes,
            warnings: problem.warnings.clone(),
        },
        provenance: Provenance {
            stage: 0,
            st_updated: false,
        },
    })
}

/// Swaps block `record.block`'s dense branch for the affine surrogate. Any
/// adapters on that block are dropped with the branch they modified.
pub fn apply_replacement(model: &mut ToyModel, record: &ReplacementRecord) -> Result<()> {
    let d = model.config.d_model;
    if record.w.shape() != [d, d] || record.b.shape() != [d] {
        return Err(Error::State(format!(
            "surrogate for block {} has shapes {:?}/{:?}, expected [{d}, {d}]/[{d}]",
            record.block,
            record.w.shape(),
            record.b.shape()
        )));
    }
    let blk = model.block_mut(record.block)?;
    if blk.dense().is_none() {
        return Err(Error::State(format!(
            "block {} is already {:?}",
            record.block,
            blk.state()
        )));
    }
    blk.branch = Branch::Linear(Linear {
        w: record.w.clone(),
        b: record.b.clone(),
    });
    blk.adapters.clear();
    Ok(())
}

/// Removes block `i`'s residual branch, keeping the shortcut.
pub fn apply_deletion(model: &mut ToyModel, i: usize) -> Result<()> {
    let blk = model.block_mut(i)?;
    if blk.dense().is_none() {
        return Err(Error::State(format!(
            "block {i} is already {:?}",
            blk.state()
        )));
    }
    blk.branch = Branch::Bypassed;
    blk.adapters.clear();
    Ok(())
}

/// `⌊ratio · n⌋`, robust to the binary representation of decimal ratios.
pub fn blocks_for_ratio(ratio: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "ratio must be in [0, 1], got {ratio}"
        )));
    }
    Ok(((ratio * n as f64) + 1e-9).floor() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine_pairs(
        n_samples: usize,
        tokens: usize,
        d: usize,
        seed: u64,
    ) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[d, d], 0.3, &mut rng);
        let c = Tensor::randn(&[d], 0.3, &mut rng);
        let x = Tensor::randn(&[n_samples * tokens, d], 1.0, &mut rng);
        let fx = numkit::ops::linear(&x, &a, Some(&c)).unwrap();
        (x, fx, a, c)
    }

    #[test]
    fn recovers_affine_branch() {
        let (x, fx, a, c) = affine_pairs(64, 4, 8, 1);
        let p = LSProblem::from_rows(0, &x, &fx, 4, LambdaPolicy::Fixed(0.0)).unwrap();
        assert_eq!(p.n_holdout_samples, 6);
        let r = fit_linear(&p, &FitOptions::default()).unwrap();
        assert!(r.w.max_abs_diff(&a) < 1e-5);
        assert!(r.b.max_abs_diff(&c) < 1e-5);
        assert!(r.diagnostics.holdout_mse.unwrap() < 1e-8);
    }

    #[test]
    fn zero_branch_gives_zero_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[80, 6], 1.0, &mut rng);
        let p = LSProblem::from_rows(3, &x, &Tensor::zeros(&[80, 6]), 4, LambdaPolicy::Fixed(0.0))
            .unwrap();
        let r = fit_linear(&p, &FitOptions::default()).unwrap();
        assert!(r.w.data().iter().all(|&v| v == 0.0));
        assert!(r.b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singular_unregularized_fit_is_retried() {
        // Duplicate feature columns make X̃X̃ᵀ singular.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Tensor::randn(&[40, 1], 1.0, &mut rng);
        let x = Tensor::new(
            vec![40, 2],
            base.data().iter().flat_map(|&v| [v, v]).collect(),
        )
        .unwrap();
        let fx = x.map(|v| 2.0 * v);
        let p = LSProblem::from_rows(0, &x, &fx, 1, LambdaPolicy::Fixed(0.0)).unwrap();
        let r = fit_linear(&p, &FitOptions::default()).unwrap();
        assert!(r.diagnostics.retried);
        assert!(r.diagnostics.lambda > 0.0);
    }

    #[test]
    fn underdetermined_problem_warns_and_raises_floor() {
        let (x, fx, _, _) = affine_pairs(3, 2, 8, 4);
        let p = LSProblem::from_rows(0, &x, &fx, 2, LambdaPolicy::Fixed(0.0)).unwrap();
        assert_eq!(p.warnings.len(), 1);
        let r = fit_linear(&p, &FitOptions::default()).unwrap();
        assert!(r.diagnostics.lambda > 0.0);
        assert!(r.diagnostics.holdout_mse.is_none());
    }

    #[test]
    fn refinement_reduces_ridge_bias() {
        let (x, fx, _, _) = affine_pairs(40, 4, 6, 5);
        let p = LSProblem::from_rows(0, &x, &fx, 4, LambdaPolicy::ScaledRidge(0.5)).unwrap();
        let plain = fit_linear(&p, &FitOptions::default()).unwrap();
        let refined = fit_linear(&p, &FitOptions { refine_passes: 3 }).unwrap();
        assert!(refined.diagnostics.train_mse < plain.diagnostics.train_mse);
    }

    #[test]
    fn ratio_floor_arithmetic() {
        let counts: Vec<usize> = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 1.0]
            .iter()
            .map(|&r| blocks_for_ratio(r, 24).unwrap())
            .collect();
        assert_eq!(counts, vec![0, 1, 2, 3, 4, 6, 7, 24]);
        assert!(blocks_for_ratio(1.5, 24).is_err());
    }
}
