//! Comparators: bypassing branches without a surrogate, and magnitude
//! pruning of MLP hidden channels followed by a global fine-tune.

use numkit::{AdamConfig, Tape};
use serde::{Deserialize, Serialize};

use crate::data::{Purpose, Task};
use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::manifest::PrunedModelManifest;
use crate::sandwich::{progressive_prune, PipelineConfig, ReplacementKind};
use crate::toymodel::train::{diverged, lift, Trainer};
use crate::toymodel::{Binder, Branch, Linear, ToyModel, GELU_FLOPS_PER_ELEM};

/// FLOPs one MLP hidden channel costs per sample: both projections, the
/// first bias and the activation, over every token.
pub fn hidden_channel_flops(n_tokens: u64, d_model: u64) -> u64 {
    n_tokens * (4 * d_model + 1 + GELU_FLOPS_PER_ELEM)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct L1Config {
    /// Global fine-tuning steps after masking.
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for L1Config {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 16,
            lr: 2e-4,
            seed: 0,
        }
    }
}

/// Removes the residual branches of the selected blocks, keeping the
/// shortcut; flanks are still sandwich-trained when `cfg.st` is set.
pub fn baseline_delete(
    teacher: &ToyModel,
    task: &Task,
    table: Option<&ImportanceTable>,
    ratio: f64,
    cfg: &PipelineConfig,
) -> Result<PrunedModelManifest> {
    let cfg = PipelineConfig {
        replacement: ReplacementKind::Delete,
        ..cfg.clone()
    };
    progressive_prune(teacher, task, table, ratio, &cfg)
}

/// Total FLOPs of the teacher with `blocks` replaced by affine surrogates.
pub fn l1_flops_budget(teacher: &ToyModel, blocks: &[usize]) -> Result<u64> {
    let d = teacher.config.d_model;
    let mut m = teacher.clone();
    for &b in blocks {
        m.block_mut(b)?.branch = Branch::Linear(Linear {
            w: numkit::Tensor::zeros(&[d, d]),
            b: numkit::Tensor::zeros(&[d]),
        });
    }
    Ok(m.count_cost().total_flops)
}

/// Per-branch magnitude pruning to at most `target_flops`, then a global
/// fine-tune of the remaining parameters against teacher outputs.
///
/// Every dense branch drops the same number of hidden channels, those whose
/// `w1` rows have the smallest L1 norms (ties to the lower index).
pub fn baseline_l1(
    teacher: &ToyModel,
    task: &Task,
    target_flops: u64,
    ratio: f64,
    cfg: &L1Config,
) -> Result<PrunedModelManifest> {
    let mut manifest = PrunedModelManifest::empty(teacher, "l1/ft", ratio);
    manifest.log.seed = cfg.seed;
    let total = teacher.count_cost().total_flops;
    if target_flops >= total {
        return Ok(manifest);
    }
    let dense: Vec<usize> = teacher
        .blocks
        .iter()
        .filter(|b| b.dense().is_some())
        .map(|b| b.index)
        .collect();
    let hidden = teacher.config.hidden();
    let per_channel = hidden_channel_flops(
        teacher.config.n_tokens as u64,
        teacher.config.d_model as u64,
    );
    let needed = (total - target_flops).div_ceil(per_channel);
    let per_block = if dense.is_empty() {
        usize::MAX
    } else {
        needed.div_ceil(dense.len() as u64) as usize
    };
    if per_block >= hidden {
        return Err(Error::Budget(format!(
            "reaching {target_flops} FLOPs needs {per_block} of {hidden} hidden channels removed per branch"
        )));
    }

    let mut model = teacher.clone();
    for &b in &dense {
        let br = model.block_mut(b)?.dense_mut().expect("dense block");
        let d_in = br.w1.shape()[1];
        let norms: Vec<f64> = (0..hidden)
            .map(|j| {
                br.w1.data()[j * d_in..(j + 1) * d_in]
                    .iter()
                    .map(|v| v.abs() as f64)
                    .sum()
            })
            .collect();
        let mut idx: Vec<usize> = (0..hidden).collect();
        idx.sort_by(|&a, &c| norms[a].total_cmp(&norms[c]).then(a.cmp(&c)));
        let mut mask = vec![true; hidden];
        for &j in &idx[..per_block] {
            mask[j] = false;
        }
        br.hidden_mask = Some(mask.clone());
        br.apply_mask();
        manifest.hidden_masks.push((b, mask));
    }
    manifest.log.notes.push(format!(
        "removed {per_block} of {hidden} hidden channels in each of {} branches",
        dense.len()
    ));

    let keys = model.param_keys();
    let mut trainer = Trainer::new(
        &model,
        keys.clone(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    )?;
    for step in 0..cfg.steps {
        let batch = task.draw(
            Purpose::Finetune,
            cfg.seed,
            (step * cfg.batch) as u64,
            cfg.batch,
        );
        let target = teacher.predict(&batch)?;
        let mut tape = Tape::new();
        let mut binder = Binder::training(trainer.trainable());
        let out = model
            .forward_graph(&mut tape, &mut binder, &batch.tokens, &batch.cond)
            .map_err(|e| lift(step, e))?;
        let target = tape.leaf(target.reshape(tape.value(out).shape().to_vec())?, false);
        let loss = tape.mse(out, target).map_err(|e| diverged(step, e))?;
        let bound = binder.into_bound();
        trainer.apply(&mut model, &tape, loss, bound)?;
    }

    for k in keys {
        let (new, old) = (model.param(k).expect("key"), teacher.param(k).expect("key"));
        if !new.bit_eq(old) {
            manifest.overrides.push((k, new.clone()));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskConfig;
    use crate::manifest::assemble;
    use crate::toymodel::{build_teacher, ModelConfig};

    fn setup() -> (ToyModel, Task) {
        let cfg = ModelConfig {
            n_double: 1,
            n_single: 2,
            ..ModelConfig::default()
        };
        let task = Task::new(TaskConfig::default(), cfg.n_tokens, cfg.d_model).unwrap();
        (build_teacher(&cfg).unwrap(), task)
    }

    #[test]
    fn channel_cost_matches_accounting() {
        let (t, _) = setup();
        let mut m = t.clone();
        let br = m.block_mut(1).unwrap().dense_mut().unwrap();
        let mut mask = vec![true; br.b1.len()];
        mask[0] = false;
        br.hidden_mask = Some(mask);
        let diff = t.count_cost().total_flops - m.count_cost().total_flops;
        assert_eq!(
            diff,
            hidden_channel_flops(t.config.n_tokens as u64, t.config.d_model as u64)
        );
    }

    #[test]
    fn full_budget_keeps_teacher() {
        let (t, task) = setup();
        let m = baseline_l1(
            &t,
            &task,
            t.count_cost().total_flops,
            0.0,
            &L1Config::default(),
        )
        .unwrap();
        assert_eq!(assemble(&t, &m).unwrap(), t);
    }

    #[test]
    fn pruned_rows_are_zero_and_budget_met() {
        let (t, task) = setup();
        let budget = l1_flops_budget(&t, &[2]).unwrap();
        let cfg = L1Config {
            steps: 3,
            batch: 4,
            ..L1Config::default()
        };
        let man = baseline_l1(&t, &task, budget, 1.0 / 3.0, &cfg).unwrap();
        let m = assemble(&t, &man).unwrap();
        assert!(m.count_cost().total_flops <= budget);
        for (b, mask) in &man.hidden_masks {
            let br = m.block(*b).unwrap().dense().unwrap();
            let d_in = br.w1.shape()[1];
            for (j, keep) in mask.iter().enumerate() {
                if !keep {
                    assert!(br.w1.data()[j * d_in..(j + 1) * d_in]
                        .iter()
                        .all(|&v| v == 0.0));
                    assert_eq!(br.b1.data()[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn impossible_budget_is_reported() {
        let (t, task) = setup();
        assert!(matches!(
            baseline_l1(&t, &task, 0, 1.0, &L1Config::default()),
            Err(Error::Budget(_))
        ));
    }
}
