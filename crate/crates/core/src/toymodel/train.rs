use std::collections::BTreeSet;

use numkit::{adam_step, ops, AdamConfig, AdamState, NumError, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::forward::Binder;
use super::params::ParamKey;
use super::ToyModel;
use crate::data::{Purpose, Task};
use crate::error::{Error, Result};

/// Adam over a fixed subset of a model's parameters.
pub(crate) struct Trainer {
    keys: Vec<ParamKey>,
    set: BTreeSet<ParamKey>,
    states: Vec<AdamState>,
    step: usize,
}

impl Trainer {
    pub fn new(model: &ToyModel, keys: Vec<ParamKey>, config: AdamConfig) -> Result<Self> {
        let mut states = Vec::with_capacity(keys.len());
        for &k in &keys {
            let t = model
                .param(k)
                .ok_or_else(|| Error::State(format!("trainable parameter {k} does not exist")))?;
            states.push(AdamState::new(config, [t]));
        }
        Ok(Self {
            set: keys.iter().copied().collect(),
            keys,
            states,
            step: 0,
        })
    }

    pub fn trainable(&self) -> &BTreeSet<ParamKey> {
        &self.set
    }

    /// Backpropagates `loss` and applies one update. Returns the loss value.
    pub fn apply(
        &mut self,
        model: &mut ToyModel,
        tape: &Tape,
        loss: Var,
        bound: Vec<(ParamKey, Var)>,
    ) -> Result<f32> {
        let step = self.step;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {value}"),
            });
        }
        let grads = tape.backward(loss).map_err(|e| diverged(step, e))?;
        for (slot, &key) in self.keys.iter().enumerate() {
            let mut acc: Option<Tensor> = None;
            for (_, v) in bound.iter().filter(|(k, _)| *k == key) {
                if let Some(g) = grads.get(*v) {
                    acc = Some(match acc {
                        None => g.clone(),
                        Some(a) => ops::binary(numkit::BinaryKind::Add, &a, g)?,
                    });
                }
            }
            let param = model
                .param_mut(key)
                .ok_or_else(|| Error::State(format!("parameter {key} vanished during training")))?;
            let g = acc.unwrap_or_else(|| Tensor::zeros(param.shape()));
            adam_step(&mut [param], &[&g], &mut self.states[slot])?;
        }
        let masked: BTreeSet<usize> = self.keys.iter().filter_map(|k| k.block()).collect();
        for b in masked {
            if let Some(d) = model.blocks.get_mut(b).and_then(|blk| blk.dense_mut()) {
                d.apply_mask();
            }
        }
        self.step += 1;
        Ok(value)
    }
}

pub(crate) fn diverged(step: usize, e: NumError) -> Error {
    match e {
        NumError::NonFinite { op } => Error::Training {
            step,
            reason: format!("non-finite values in {op}"),
        },
        other => Error::Num(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Held-out samples used to report the task MSE before and after.
    pub eval_samples: usize,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            eval_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub losses: Vec<f32>,
}

/// Stream reserved for teacher monitoring, disjoint from training streams.
const MONITOR_STREAM: u64 = u64::MAX;

fn task_mse(model: &ToyModel, task: &Task, n: usize) -> Result<f64> {
    let batch = task.draw(Purpose::TeacherTrain, MONITOR_STREAM, 0, n);
    let y = model.predict(&batch)?;
    Ok(ops::mse(&y, &batch.clean)?.item() as f64)
}

/// Trains every parameter on the denoising task with Adam.
pub fn train_teacher(
    model: &mut ToyModel,
    task: &Task,
    cfg: &TeacherTrainConfig,
) -> Result<TeacherTrainReport> {
    if cfg.batch == 0 || cfg.eval_samples == 0 {
        return Err(Error::Config(
            "teacher batch and eval_samples must be positive".into(),
        ));
    }
    if !model.pruned_set().is_empty() || model.adapters().next().is_some() {
        return Err(Error::State(
            "teacher training expects an unmodified model".into(),
        ));
    }
    let initial_mse = task_mse(model, task, cfg.eval_samples)?;
    let keys = model.param_keys();
    let mut trainer = Trainer::new(
        model,
        keys,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    )?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = task.draw(
            Purpose::TeacherTrain,
            cfg.seed,
            (step * cfg.batch) as u64,
            cfg.batch,
        );
        let mut tape = Tape::new();
        let mut binder = Binder::training(trainer.trainable());
        let out = model
            .forward_graph(&mut tape, &mut binder, &batch.tokens, &batch.cond)
            .map_err(|e| lift(step, e))?;
        let rows = batch
            .clean
            .clone()
            .reshape(tape.value(out).shape().to_vec())?;
        let target = tape.leaf(rows, false);
        let loss = tape.mse(out, target).map_err(|e| diverged(step, e))?;
        let bound = binder.into_bound();
        losses.push(trainer.apply(model, &tape, loss, bound)?);
        if step % 250 == 0 {
            log::debug!("teacher step {step}: loss {:.5}", losses[step]);
        }
    }
    let final_mse = task_mse(model, task, cfg.eval_samples)?;
    Ok(TeacherTrainReport {
        initial_mse,
        final_mse,
        losses,
    })
}

pub(crate) fn lift(step: usize, e: Error) -> Error {
    match e {
        Error::Num(n) => diverged(step, n),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskConfig;
    use crate::toymodel::{build_teacher, ModelConfig};

    fn small() -> (ToyModel, Task) {
        let cfg = ModelConfig {
            n_double: 1,
            n_single: 2,
            ..ModelConfig::default()
        };
        let task = Task::new(TaskConfig::default(), cfg.n_tokens, cfg.d_model).unwrap();
        (build_teacher(&cfg).unwrap(), task)
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let (mut m, task) = small();
        let before = m.clone();
        let cfg = TeacherTrainConfig {
            steps: 0,
            eval_samples: 8,
            ..TeacherTrainConfig::default()
        };
        let r = train_teacher(&mut m, &task, &cfg).unwrap();
        assert_eq!(m, before);
        assert_eq!(r.initial_mse, r.final_mse);
    }

    #[test]
    fn short_training_is_deterministic_and_reduces_loss() {
        let cfg = TeacherTrainConfig {
            steps: 60,
            batch: 8,
            lr: 3e-3,
            eval_samples: 32,
            ..TeacherTrainConfig::default()
        };
        let (mut a, task) = small();
        let (mut b, _) = small();
        let ra = train_teacher(&mut a, &task, &cfg).unwrap();
        let rb = train_teacher(&mut b, &task, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert!(ra.final_mse < ra.initial_mse, "{ra:?}");
    }
}
