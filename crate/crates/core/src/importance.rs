//! Leave-one-out block importance from two output-quality proxies.

use numkit::linalg::psd_sqrt;
use numkit::{sym_eig64, Mat64, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::toymodel::{BlockKind, ToyModel};

/// Diagonal shrinkage added to every covariance estimate.
pub const COV_SHRINKAGE: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;
/// Blocks listed at each end of the importance report.
pub const REPORT_EXTREMES: usize = 4;

/// Mean over tokens: `(batch, tokens, d)` → `batch × d`.
pub fn pooled_features(out: &Tensor) -> Result<Tensor> {
    let s = out.shape();
    if s.len() != 3 {
        return Err(Error::State(format!(
            "expected (batch, tokens, d), got {s:?}"
        )));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let mut data = vec![0.0f32; b * d];
    for i in 0..b {
        for j in 0..d {
            let mut acc = 0.0f64;
            for k in 0..t {
                acc += out.data()[(i * t + k) * d + j] as f64;
            }
            data[i * d + j] = (acc / t as f64) as f32;
        }
    }
    Ok(Tensor::new(vec![b, d], data)?)
}

fn mean_cov(x: &Tensor) -> Result<(Vec<f64>, Mat64)> {
    let (n, d) = x.dims2("frechet_proxy")?;
    let mut mu = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mu.iter_mut().zip(x.row(i)) {
            *m += v as f64;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Mat64::zeros(d, d);
    for i in 0..n {
        let r = x.row(i);
        for p in 0..d {
            let dp = r[p] as f64 - mu[p];
            for q in 0..=p {
                cov.data[p * d + q] += dp * (r[q] as f64 - mu[q]);
            }
        }
    }
    for p in 0..d {
        for q in 0..=p {
            let v = cov.data[p * d + q] / (n - 1) as f64;
            cov.data[p * d + q] = v;
            cov.data[q * d + p] = v;
        }
        cov.data[p * d + p] += COV_SHRINKAGE;
    }
    Ok((mu, cov))
}

/// Squared Fréchet distance between Gaussian fits of two feature sets
/// (`samples × d` each).
pub fn frechet_proxy(feats_a: &Tensor, feats_b: &Tensor) -> Result<f64> {
    let (na, da) = feats_a.dims2("frechet_proxy")?;
    let (nb, db) = feats_b.dims2("frechet_proxy")?;
    if da != db {
        return Err(Error::State(format!("feature widths differ: {da} vs {db}")));
    }
    if na < 2 || nb < 2 {
        return Err(Error::State(format!(
            "frechet proxy needs at least 2 samples per set, got {na} and {nb}"
        )));
    }
    let (mu_a, cov_a) = mean_cov(feats_a)?;
    let (mu_b, cov_b) = mean_cov(feats_b)?;
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b).powi(2)).sum();
    let sa = psd_sqrt(&cov_a, "covariance of first feature set")?;
    let inner = sa.matmul(&cov_b).matmul(&sa);
    let eig = sym_eig64(&inner, "cross-covariance product")?;
    let tr_sqrt: f64 = eig.values.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d2 = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d2.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipProxy {
    pub value: f64,
    /// Samples dropped because a pooled vector had zero norm.
    pub excluded: usize,
}

/// Mean cosine similarity between mean-pooled outputs.
pub fn clip_proxy(out_ablated: &Tensor, out_teacher: &Tensor) -> Result<ClipProxy> {
    if out_ablated.shape() != out_teacher.shape() {
        return Err(Error::State(format!(
            "clip proxy needs aligned batches: {:?} vs {:?}",
            out_ablated.shape(),
            out_teacher.shape()
        )));
    }
    let a = pooled_features(out_ablated)?;
    let t = pooled_features(out_teacher)?;
    let (n, _) = a.rows_cols();
    let mut total = 0.0f64;
    let mut used = 0usize;
    for i in 0..n {
        let (x, y) = (a.row(i), t.row(i));
        let dot = numkit::kernels::dot64(x, y);
        let nx = numkit::kernels::dot64(x, x).sqrt();
        let ny = numkit::kernels::dot64(y, y).sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        total += (dot / (nx * ny)).clamp(-1.0, 1.0);
        used += 1;
    }
    let excluded = n - used;
    if excluded > 0 {
        log::warn!("clip proxy excluded {excluded} zero-norm samples");
    }
    Ok(ClipProxy {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        excluded,
    })
}

/// A model-output quality measure against a reference output.
pub trait QualityMetric {
    fn name(&self) -> &'static str;
    /// Both arguments are `(batch, tokens, d)`.
    fn evaluate(&self, candidate: &Tensor, reference: &Tensor) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FrechetMetric;

impl QualityMetric for FrechetMetric {
    fn name(&self) -> &'static str {
        "fid_proxy"
    }
    fn evaluate(&self, candidate: &Tensor, reference: &Tensor) -> Result<f64> {
        frechet_proxy(&pooled_features(candidate)?, &pooled_features(reference)?)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CosineMetric;

impl QualityMetric for CosineMetric {
    fn name(&self) -> &'static str {
        "clip_proxy"
    }
    fn evaluate(&self, candidate: &Tensor, reference: &Tensor) -> Result<f64> {
        Ok(clip_proxy(candidate, reference)?.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub fid_proxy: f64,
    pub clip_proxy: f64,
}

/// Min-max normalization. All-equal input maps to 0.5 and is flagged.
pub fn min_max(values: &[f64]) -> (Vec<f64>, bool) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) {
        return (vec![0.5; values.len()], true);
    }
    (values.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

/// Indices sorted by ascending score, ties by index.
pub fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockImportance {
    pub block: usize,
    pub kind: BlockKind,
    pub metrics: MetricPair,
    pub fid_norm: f64,
    pub clip_norm: f64,
    pub score: f64,
    /// Median over the eval batch of per-sample MSE between the ablated and
    /// intact outputs.
    pub ablation_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub alpha: f64,
    pub beta: f64,
    pub entries: Vec<BlockImportance>,
    /// Block indices, least important first.
    pub order: Vec<usize>,
    pub fid_degenerate: bool,
    pub clip_degenerate: bool,
    pub eval_samples: usize,
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    let ok = alpha.is_finite() && beta.is_finite() && alpha >= 0.0 && beta >= 0.0;
    if !ok || alpha + beta == 0.0 {
        return Err(Error::Config(format!(
            "importance weights must be non-negative and not both zero, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(())
}

impl ImportanceTable {
    /// Normalizes raw metrics and scores each block:
    /// `s = −(α·(1 − fid_norm) + β·clip_norm)`.
    pub fn from_metrics(
        metrics: &[MetricPair],
        kinds: &[BlockKind],
        ablation_mse: &[f64],
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        check_weights(alpha, beta)?;
        if metrics.len() != kinds.len() || metrics.len() != ablation_mse.len() {
            return Err(Error::State(
                "metric, kind and ablation lists differ in length".into(),
            ));
        }
        let fids: Vec<f64> = metrics.iter().map(|m| m.fid_proxy).collect();
        let clips: Vec<f64> = metrics.iter().map(|m| m.clip_proxy).collect();
        let (fid_norm, fid_degenerate) = min_max(&fids);
        let (clip_norm, clip_degenerate) = min_max(&clips);
        let scores: Vec<f64> = fid_norm
            .iter()
            .zip(&clip_norm)
            .map(|(f, c)| -(alpha * (1.0 - f) + beta * c))
            .collect();
        let order = ascending_order(&scores);
        let entries = (0..metrics.len())
            .map(|i| BlockImportance {
                block: i,
                kind: kinds[i],
                metrics: metrics[i],
                fid_norm: fid_norm[i],
                clip_norm: clip_norm[i],
                score: scores[i],
                ablation_mse: ablation_mse[i],
            })
            .collect();
        Ok(Self {
            alpha,
            beta,
            entries,
            order,
            fid_degenerate,
            clip_degenerate,
            eval_samples: 0,
        })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn n_blocks(&self) -> usize {
        self.entries.len()
    }

    /// Re-weights with new `(α, β)` keeping raw metrics.
    pub fn reweighted(&self, alpha: f64, beta: f64) -> Result<Self> {
        let metrics: Vec<MetricPair> = self.entries.iter().map(|e| e.metrics).collect();
        let kinds: Vec<BlockKind> = self.entries.iter().map(|e| e.kind).collect();
        let mse: Vec<f64> = self.entries.iter().map(|e| e.ablation_mse).collect();
        let mut t = Self::from_metrics(&metrics, &kinds, &mse, alpha, beta)?;
        t.eval_samples = self.eval_samples;
        Ok(t)
    }
}

fn per_sample_mse(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = a.shape()[0];
    let per = a.len() / n.max(1);
    (0..n)
        .map(|i| {
            let s = i * per;
            a.data()[s..s + per]
                .iter()
                .zip(&b.data()[s..s + per])
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / per as f64
        })
        .collect()
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Scores every block by bypassing its residual branch on `eval_batch`.
pub fn score_blocks(
    teacher: &ToyModel,
    eval_batch: &Batch,
    alpha: f64,
    beta: f64,
) -> Result<ImportanceTable> {
    score_blocks_with(
        teacher,
        eval_batch,
        alpha,
        beta,
        &FrechetMetric,
        &CosineMetric,
    )
}

/// [`score_blocks`] with caller-supplied metrics: `lower_better` plays the
/// role of the FID proxy and `higher_better` the CLIP proxy.
pub fn score_blocks_with(
    teacher: &ToyModel,
    eval_batch: &Batch,
    alpha: f64,
    beta: f64,
    lower_better: &dyn QualityMetric,
    higher_better: &dyn QualityMetric,
) -> Result<ImportanceTable> {
    check_weights(alpha, beta)?;
    let n = teacher.n_blocks();
    // The block inputs of the intact model are shared by every ablation:
    // bypassing block i means feeding its input straight to block i + 1.
    let (states, cemb) = teacher.block_inputs(eval_batch)?;
    let reference = teacher.head_out(&states[n])?;
    let mut metrics = Vec::with_capacity(n);
    let mut ablation = Vec::with_capacity(n);
    for i in 0..n {
        let x = states[i].clone();
        let x = teacher.run_span(i + 1..=n - 1, x, &cemb)?;
        let out = teacher.head_out(&x)?;
        metrics.push(MetricPair {
            fid_proxy: lower_better.evaluate(&out, &reference)?,
            clip_proxy: higher_better.evaluate(&out, &reference)?,
        });
        ablation.push(median(&per_sample_mse(&out, &reference)));
        log::debug!("block {i}: {:?}", metrics[i]);
    }
    let kinds: Vec<BlockKind> = teacher.blocks.iter().map(|b| b.kind).collect();
    let mut table = ImportanceTable::from_metrics(&metrics, &kinds, &ablation, alpha, beta)?;
    table.eval_samples = eval_batch.len();
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rank: usize,
    pub block: usize,
    pub kind: BlockKind,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub block: usize,
    pub score: f64,
    pub fid_proxy: f64,
    pub clip_proxy: f64,
    pub ablation_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub alpha: f64,
    pub beta: f64,
    pub eval_samples: usize,
    pub fid_degenerate: bool,
    pub clip_degenerate: bool,
    /// Ascending importance curve.
    pub curve: Vec<CurvePoint>,
    pub least_important: Vec<AblationDelta>,
    pub most_important: Vec<AblationDelta>,
}

pub fn importance_report(table: &ImportanceTable) -> ImportanceReport {
    let delta = |b: usize| {
        let e = &table.entries[b];
        AblationDelta {
            block: b,
            score: e.score,
            fid_proxy: e.metrics.fid_proxy,
            clip_proxy: e.metrics.clip_proxy,
            ablation_mse: e.ablation_mse,
        }
    };
    let k = REPORT_EXTREMES.min(table.order.len());
    ImportanceReport {
        alpha: table.alpha,
        beta: table.beta,
        eval_samples: table.eval_samples,
        fid_degenerate: table.fid_degenerate,
        clip_degenerate: table.clip_degenerate,
        curve: table
            .order
            .iter()
            .enumerate()
            .map(|(rank, &b)| CurvePoint {
                rank,
                block: b,
                kind: table.entries[b].kind,
                score: table.entries[b].score,
            })
            .collect(),
        least_important: table.order[..k].iter().map(|&b| delta(b)).collect(),
        most_important: table.order[table.order.len() - k..]
            .iter()
            .map(|&b| delta(b))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_two_block_example() {
        let m = [
            MetricPair {
                fid_proxy: 10.0,
                clip_proxy: 0.8,
            },
            MetricPair {
                fid_proxy: 20.0,
                clip_proxy: 0.6,
            },
        ];
        let t = ImportanceTable::from_metrics(&m, &[BlockKind::Double; 2], &[0.0; 2], 0.5, 0.5)
            .unwrap();
        assert_eq!(t.entries[0].fid_norm, 0.0);
        assert_eq!(t.entries[1].fid_norm, 1.0);
        assert_eq!(t.entries[0].clip_norm, 1.0);
        assert_eq!(t.entries[1].clip_norm, 0.0);
        assert_eq!(t.scores(), vec![-1.0, 0.0]);
        assert_eq!(t.order, vec![0, 1]);
    }

    #[test]
    fn degenerate_metrics_are_flagged() {
        let m = [MetricPair {
            fid_proxy: 1.0,
            clip_proxy: 0.5,
        }; 3];
        let t = ImportanceTable::from_metrics(&m, &[BlockKind::Single; 3], &[0.0; 3], 0.5, 0.5)
            .unwrap();
        assert!(t.fid_degenerate && t.clip_degenerate);
        assert!(t
            .entries
            .iter()
            .all(|e| e.fid_norm == 0.5 && e.clip_norm == 0.5));
        assert_eq!(t.order, vec![0, 1, 2]);
    }

    #[test]
    fn weights_must_be_valid() {
        let m = [MetricPair {
            fid_proxy: 1.0,
            clip_proxy: 0.5,
        }];
        assert!(ImportanceTable::from_metrics(&m, &[BlockKind::Single], &[0.0], 0.0, 0.0).is_err());
        assert!(
            ImportanceTable::from_metrics(&m, &[BlockKind::Single], &[0.0], -1.0, 1.0).is_err()
        );
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[300, 6], 1.0, &mut rng);
        assert!(frechet_proxy(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn frechet_needs_two_samples() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(frechet_proxy(&x, &x).is_err());
    }

    #[test]
    fn clip_proxy_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 3, 5], 1.0, &mut rng);
        let neg = x.map(|v| -v);
        assert!((clip_proxy(&x, &x).unwrap().value - 1.0).abs() < 1e-9);
        assert!((clip_proxy(&neg, &x).unwrap().value + 1.0).abs() < 1e-9);
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert!(clip_proxy(&a, &b).unwrap().value.abs() < 1e-6);
    }

    #[test]
    fn clip_proxy_excludes_zero_vectors() {
        let a = Tensor::new(vec![2, 1, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let r = clip_proxy(&a, &a).unwrap();
        assert_eq!(r.excluded, 1);
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_follows_table_order() {
        let m: Vec<MetricPair> = (0..10)
            .map(|i| MetricPair {
                fid_proxy: ((i * 7) % 10) as f64,
                clip_proxy: 1.0 - 0.05 * i as f64,
            })
            .collect();
        let t = ImportanceTable::from_metrics(&m, &[BlockKind::Single; 10], &[0.0; 10], 0.5, 0.5)
            .unwrap();
        let r = importance_report(&t);
        let blocks: Vec<usize> = r.curve.iter().map(|c| c.block).collect();
        assert_eq!(blocks, t.order);
        assert_eq!(r.least_important.len(), 4);
        assert_eq!(
            r.most_important.last().unwrap().block,
            *t.order.last().unwrap()
        );
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
