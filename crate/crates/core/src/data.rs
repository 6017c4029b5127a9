//! Synthetic conditional denoising task used to train the teacher.
//!
//! Each sample mixes a few low-rank token patterns. The condition vector is a
//! linear code of the mixture weights, and the input is the clean grid plus
//! Gaussian noise. The clean grid is the regression target.

use numkit::Tensor;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a sample is used for. Part of the sample identity, so sets drawn for
/// different purposes never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    TeacherTrain,
    Score,
    Fit,
    Sandwich,
    Eval,
    Finetune,
    Bench,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::TeacherTrain => 1,
            Purpose::Score => 2,
            Purpose::Fit => 3,
            Purpose::Sandwich => 4,
            Purpose::Eval => 5,
            Purpose::Finetune => 6,
            Purpose::Bench => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub purpose: Purpose,
    pub stream: u64,
    pub index: u64,
}

impl SampleId {
    pub fn new(purpose: Purpose, stream: u64, index: u64) -> Self {
        Self {
            purpose,
            stream,
            index,
        }
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a list of words; used for every derived seed.
pub fn mix_seeds(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub seed: u64,
    /// Number of distinct low-rank patterns.
    pub components: usize,
    /// Rank of every pattern.
    pub rank: usize,
    /// Patterns mixed into each sample.
    pub active: usize,
    pub noise_std: f32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            components: 8,
            rank: 2,
            active: 2,
            noise_std: 0.5,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.rank == 0 {
            return Err(Error::Config(
                "task needs at least one component of rank >= 1".into(),
            ));
        }
        if self.active == 0 || self.active > self.components {
            return Err(Error::Config(format!(
                "task.active must be in 1..={}, got {}",
                self.components, self.active
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(
                "task.noise_std must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Materialized pattern bank for one task seed and model geometry.
#[derive(Debug, Clone)]
pub struct Task {
    config: TaskConfig,
    n_tokens: usize,
    d_model: usize,
    /// One `n_tokens × d_model` grid per component, unit RMS.
    patterns: Vec<Vec<f32>>,
    /// One `d_model` code per component.
    codes: Vec<Vec<f32>>,
}

impl Task {
    pub fn new(config: TaskConfig, n_tokens: usize, d_model: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[config.seed, 0x7a5c]));
        let r = config.rank;
        let mut patterns = Vec::with_capacity(config.components);
        let mut codes = Vec::with_capacity(config.components);
        for _ in 0..config.components {
            // The offset on the token factor gives every pattern a nonzero
            // token mean, so mean-pooled features carry signal.
            let offset: Vec<f32> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u = Tensor::randn(&[n_tokens, r], 1.0, &mut rng);
            let v = Tensor::randn(&[d_model, r], 1.0, &mut rng);
            let mut grid = vec![0.0f32; n_tokens * d_model];
            for t in 0..n_tokens {
                for j in 0..d_model {
                    let mut acc = 0.0f64;
                    for q in 0..r {
                        acc += (u.get2(t, q) + offset[q]) as f64 * v.get2(j, q) as f64;
                    }
                    grid[t * d_model + j] = acc as f32;
                }
            }
            let rms = (grid.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / grid.len() as f64)
                .sqrt()
                .max(1e-12);
            grid.iter_mut().for_each(|x| *x = (*x as f64 / rms) as f32);
            patterns.push(grid);
            codes.push(Tensor::randn(&[d_model], 1.0, &mut rng).into_data());
        }
        Ok(Self {
            config,
            n_tokens,
            d_model,
            patterns,
            codes,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    /// Deterministic sample for an identifier: (noisy, cond, clean).
    pub fn sample(&self, id: SampleId) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[
            self.config.seed,
            id.purpose.tag(),
            id.stream,
            id.index,
        ]));
        let (t, d) = (self.n_tokens, self.d_model);
        let mut clean = vec![0.0f32; t * d];
        let mut cond = vec![0.0f32; d];
        for c in sample_indices(&mut rng, self.config.components, self.config.active) {
            let w: f32 = rng.sample(rand::distributions::Standard);
            let w = 2.0 * w - 1.0;
            let w = w + w.signum() * 0.5;
            for (x, p) in clean.iter_mut().zip(&self.patterns[c]) {
                *x += w * p;
            }
            for (x, e) in cond.iter_mut().zip(&self.codes[c]) {
                *x += w * e;
            }
        }
        let noise = Tensor::randn(&[t * d], self.config.noise_std, &mut rng);
        let noisy = clean.iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        (noisy, cond, clean)
    }

    pub fn batch(&self, ids: Vec<SampleId>) -> Batch {
        let (t, d) = (self.n_tokens, self.d_model);
        let b = ids.len();
        let mut noisy = Vec::with_capacity(b * t * d);
        let mut conds = Vec::with_capacity(b * d);
        let mut clean = Vec::with_capacity(b * t * d);
        for &id in &ids {
            let (x, c, y) = self.sample(id);
            noisy.extend(x);
            conds.extend(c);
            clean.extend(y);
        }
        Batch {
            tokens: Tensor::new(vec![b, t, d], noisy).expect("sized by construction"),
            cond: Tensor::new(vec![b, d], conds).expect("sized by construction"),
            clean: Tensor::new(vec![b, t, d], clean).expect("sized by construction"),
            ids,
        }
    }

    /// `count` consecutive samples of one purpose and stream.
    pub fn draw(&self, purpose: Purpose, stream: u64, start: u64, count: usize) -> Batch {
        self.batch(
            (0..count as u64)
                .map(|i| SampleId::new(purpose, stream, start + i))
                .collect(),
        )
    }
}

/// A batch of samples. `tokens` and `clean` are `(batch, n_tokens, d_model)`,
/// `cond` is `(batch, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Tensor,
    pub cond: Tensor,
    pub clean: Tensor,
    pub ids: Vec<SampleId>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.shape().get(1).copied().unwrap_or(0)
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            tokens: gather3(&self.tokens, idx),
            cond: self.cond.gather_rows(idx),
            clean: gather3(&self.clean, idx),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Batch {
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }
}

/// Rows of a `(b, t, d)` tensor picked along the leading axis.
pub(crate) fn gather3(x: &Tensor, idx: &[usize]) -> Tensor {
    let s = x.shape();
    let (t, d) = (s[1], s[2]);
    let flat = Tensor::new(vec![s[0], t * d], x.data().to_vec()).expect("same size");
    let picked = flat.gather_rows(idx);
    picked.reshape(vec![idx.len(), t, d]).expect("same size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> Task {
        Task::new(TaskConfig::default(), 16, 32).unwrap()
    }

    #[test]
    fn samples_are_deterministic() {
        let t = task();
        let id = SampleId::new(Purpose::Fit, 3, 11);
        assert_eq!(t.sample(id), t.sample(id));
    }

    #[test]
    fn purposes_give_different_samples() {
        let t = task();
        let a = t.sample(SampleId::new(Purpose::Fit, 0, 0));
        let b = t.sample(SampleId::new(Purpose::Eval, 0, 0));
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn pooled_clean_signal_is_nonzero() {
        let t = task();
        let batch = t.draw(Purpose::Score, 0, 0, 32);
        let mut total = 0.0f64;
        for b in 0..32 {
            for j in 0..32 {
                let mean: f64 = (0..16)
                    .map(|k| batch.clean.data()[(b * 16 + k) * 32 + j] as f64)
                    .sum::<f64>()
                    / 16.0;
                total += mean * mean;
            }
        }
        assert!(total / (32.0 * 32.0) > 1e-2, "pooled energy {total}");
    }

    #[test]
    fn select_keeps_alignment() {
        let t = task();
        let batch = t.draw(Purpose::Eval, 1, 0, 5);
        let sub = batch.select(&[3, 1]);
        let one = t.draw(Purpose::Eval, 1, 3, 1);
        assert_eq!(sub.ids[0], one.ids[0]);
        assert_eq!(&sub.tokens.data()[..16 * 32], one.tokens.data());
        assert_eq!(sub.cond.row(0), one.cond.row(0));
    }

    #[test]
    fn invalid_task_is_rejected() {
        let cfg = TaskConfig {
            active: 9,
            ..TaskConfig::default()
        };
        assert!(Task::new(cfg, 16, 32).is_err());
    }
}
