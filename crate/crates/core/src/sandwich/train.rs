use std::collections::BTreeMap;

use numkit::{ops, AdamConfig, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::SandwichPlan;
use crate::data::{gather3, Batch};
use crate::error::{Error, Result};
use crate::importance::median;
use crate::toymodel::train::{diverged, lift, Trainer};
use crate::toymodel::{Binder, ParamKey, ToyModel};

/// Which model produces the inputs entering the sandwich span.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// The current pruned model with all earlier components loaded.
    #[default]
    Pruned,
    /// The frozen teacher.
    Teacher,
}

/// Span inputs and teacher span outputs, `(samples, tokens, d)` each.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichDataset {
    pub lo: usize,
    pub hi: usize,
    pub inputs: Tensor,
    /// Condition embeddings, `samples × d`.
    pub cemb: Tensor,
    pub targets: Tensor,
}

impl SandwichDataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
        let g = gather3(t, idx);
        let s = g.shape().to_vec();
        g.reshape(vec![s[0] * s[1], s[2]]).expect("same size")
    }
}

fn stream_before(model: &ToyModel, batch: &Batch, lo: usize) -> Result<(Tensor, Tensor)> {
    let (x, c) = model.embed(&batch.tokens, &batch.cond)?;
    let x = if lo == 0 {
        x
    } else {
        model.run_span(0..=lo - 1, x, &c)?
    };
    Ok((x, c))
}

fn to3(x: Tensor, b: usize, t: usize) -> Result<Tensor> {
    let d = x.shape()[1];
    Ok(x.reshape(vec![b, t, d])?)
}

/// Records the stream entering `plan.lo` and the teacher's stream leaving
/// `plan.hi` for the same samples.
pub fn collect_sandwich_data(
    model: &ToyModel,
    teacher: &ToyModel,
    plan: &SandwichPlan,
    batch: &Batch,
    inputs: InputSource,
) -> Result<SandwichDataset> {
    let source = match inputs {
        InputSource::Pruned => model,
        InputSource::Teacher => teacher,
    };
    let (b, t) = (batch.len(), model.config.n_tokens);
    let (x, cemb) = stream_before(source, batch, plan.lo)?;
    let (tx, tc) = stream_before(teacher, batch, plan.lo)?;
    let y = teacher.run_span(plan.lo..=plan.hi, tx, &tc)?;
    Ok(SandwichDataset {
        lo: plan.lo,
        hi: plan.hi,
        inputs: to3(x, b, t)?,
        cemb,
        targets: to3(y, b, t)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SandwichTrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub minibatch: usize,
    pub holdout_fraction: f64,
    /// Holdout evaluation interval in steps; the best checkpoint is kept.
    pub eval_every: usize,
}

impl Default for SandwichTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            minibatch: 32,
            holdout_fraction: 0.1,
            eval_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub losses: Vec<f32>,
    pub holdout_initial: f64,
    pub holdout_best: f64,
    /// Step count at which the kept parameters were reached (0 = initial).
    pub best_step: usize,
    /// Median of the last 10 losses is below the median of the first 10.
    pub success: bool,
    pub trainable_params: usize,
}

fn span_mse(model: &ToyModel, data: &SandwichDataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let x = SandwichDataset::rows(&data.inputs, idx);
    let c = data.cemb.gather_rows(idx);
    let y = SandwichDataset::rows(&data.targets, idx);
    let out = model.run_span(data.lo..=data.hi, x, &c)?;
    Ok(ops::mse(&out, &y)?.item() as f64)
}

fn snapshot(model: &ToyModel, keys: &[ParamKey]) -> BTreeMap<ParamKey, Tensor> {
    keys.iter()
        .filter_map(|&k| model.param(k).map(|t| (k, t.clone())))
        .collect()
}

fn restore(model: &mut ToyModel, snap: &BTreeMap<ParamKey, Tensor>) {
    for (&k, t) in snap {
        if let Some(p) = model.param_mut(k) {
            *p = t.clone();
        }
    }
}

/// Minimizes the MSE between the span output and the teacher targets over
/// `keys` only. The parameters with the lowest holdout loss are kept.
pub fn train_sandwich(
    model: &mut ToyModel,
    keys: &[ParamKey],
    data: &SandwichDataset,
    cfg: &SandwichTrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if cfg.minibatch == 0 || cfg.eval_every == 0 {
        return Err(Error::Config(
            "sandwich minibatch and eval_every must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
    }
    let n = data.len();
    let n_hold = ((n as f64) * cfg.holdout_fraction).floor() as usize;
    let n_train = n - n_hold;
    if n_train == 0 {
        return Err(Error::Config(
            "sandwich dataset has no training samples".into(),
        ));
    }
    let holdout: Vec<usize> = (n_train..n).collect();
    let train_idx: Vec<usize> = (0..n_train).collect();
    // With no holdout split the training set doubles as the selection set.
    let select = if holdout.is_empty() {
        &train_idx
    } else {
        &holdout
    };

    let trainable_params = keys
        .iter()
        .filter_map(|&k| model.param(k))
        .map(Tensor::len)
        .sum();
    let holdout_initial = span_mse(model, data, select)?;
    let mut outcome = TrainOutcome {
        losses: Vec::with_capacity(cfg.steps),
        holdout_initial,
        holdout_best: holdout_initial,
        best_step: 0,
        success: false,
        trainable_params,
    };
    if cfg.steps == 0 || keys.is_empty() {
        return Ok(outcome);
    }
    let mut best = snapshot(model, keys);
    let mut trainer = Trainer::new(
        model,
        keys.to_vec(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = Vec::new();
    let mb = cfg.minibatch.min(n_train);
    for step in 0..cfg.steps {
        if perm.len() < mb {
            let mut fresh = train_idx.clone();
            fresh.shuffle(&mut rng);
            perm.extend(fresh);
        }
        let idx: Vec<usize> = perm.drain(..mb).collect();
        let mut tape = Tape::new();
        let mut binder = Binder::training(trainer.trainable());
        let x = tape.leaf(SandwichDataset::rows(&data.inputs, &idx), false);
        let c = tape.leaf(data.cemb.gather_rows(&idx), false);
        let y = tape.leaf(SandwichDataset::rows(&data.targets, &idx), false);
        let out = model
            .span_graph(&mut tape, &mut binder, data.lo..=data.hi, x, &c, idx.len())
            .map_err(|e| lift(step, e))?;
        let loss = tape.mse(out, y).map_err(|e| diverged(step, e))?;
        let bound = binder.into_bound();
        outcome
            .losses
            .push(trainer.apply(model, &tape, loss, bound)?);
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let h = span_mse(model, data, select)?;
            if h < outcome.holdout_best {
                outcome.holdout_best = h;
                outcome.best_step = done;
                best = snapshot(model, keys);
            }
        }
    }
    restore(model, &best);
    let k = outcome.losses.len().min(10);
    let first: Vec<f64> = outcome.losses[..k].iter().map(|&v| v as f64).collect();
    let last: Vec<f64> = outcome.losses[outcome.losses.len() - k..]
        .iter()
        .map(|&v| v as f64)
        .collect();
    outcome.success = median(&last) < median(&first);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brll::{apply_replacement, collect_pairs, fit_linear, FitOptions, LambdaPolicy};
    use crate::data::{Purpose, Task, TaskConfig};
    use crate::sandwich::{attach_lora, plan_sandwich, trainable_keys, LoraConfig};
    use crate::toymodel::{build_teacher, ModelConfig};

    fn replaced() -> (ToyModel, ToyModel, Task, SandwichPlan) {
        let cfg = ModelConfig {
            n_double: 2,
            n_single: 3,
            ..ModelConfig::default()
        };
        let task = Task::new(TaskConfig::default(), cfg.n_tokens, cfg.d_model).unwrap();
        let teacher = build_teacher(&cfg).unwrap();
        let mut m = teacher.clone();
        let fit = task.draw(Purpose::Fit, 0, 0, 64);
        let p = collect_pairs(&m, 2, &fit, LambdaPolicy::default()).unwrap();
        let rec = fit_linear(&p, &FitOptions::default()).unwrap();
        apply_replacement(&mut m, &rec).unwrap();
        let plan = plan_sandwich(2, &[], m.n_blocks()).unwrap();
        attach_lora(&mut m, &plan, LoraConfig::default(), 0).unwrap();
        (teacher, m, task, plan)
    }

    fn small_cfg() -> SandwichTrainConfig {
        SandwichTrainConfig {
            steps: 40,
            minibatch: 8,
            eval_every: 5,
            lr: 5e-3,
            ..SandwichTrainConfig::default()
        }
    }

    #[test]
    fn training_touches_only_trainable_parameters() {
        let (teacher, mut m, task, plan) = replaced();
        let batch = task.draw(Purpose::Sandwich, 0, 0, 40);
        let data = collect_sandwich_data(&m, &teacher, &plan, &batch, InputSource::Pruned).unwrap();
        let keys = trainable_keys(&m, &plan);
        let before = m.clone();
        let out = train_sandwich(&mut m, &keys, &data, &small_cfg(), 3).unwrap();
        assert_eq!(out.losses.len(), 40);
        assert!(out.holdout_best <= out.holdout_initial);
        for k in m.param_keys() {
            if !keys.contains(&k) {
                assert!(
                    m.param(k).unwrap().bit_eq(before.param(k).unwrap()),
                    "{k} changed"
                );
            }
        }
        assert!(
            keys.iter()
                .any(|&k| !m.param(k).unwrap().bit_eq(before.param(k).unwrap()))
                || out.best_step == 0
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (teacher, m, task, plan) = replaced();
        let batch = task.draw(Purpose::Sandwich, 0, 0, 40);
        let data = collect_sandwich_data(&m, &teacher, &plan, &batch, InputSource::Pruned).unwrap();
        let keys = trainable_keys(&m, &plan);
        let (mut a, mut b) = (m.clone(), m);
        let ra = train_sandwich(&mut a, &keys, &data, &small_cfg(), 3).unwrap();
        let rb = train_sandwich(&mut b, &keys, &data, &small_cfg(), 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_report_without_changes() {
        let (teacher, mut m, task, plan) = replaced();
        let batch = task.draw(Purpose::Sandwich, 0, 0, 20);
        let data =
            collect_sandwich_data(&m, &teacher, &plan, &batch, InputSource::Teacher).unwrap();
        let keys = trainable_keys(&m, &plan);
        let before = m.clone();
        let cfg = SandwichTrainConfig {
            steps: 0,
            ..small_cfg()
        };
        let out = train_sandwich(&mut m, &keys, &data, &cfg, 0).unwrap();
        assert_eq!(m, before);
        assert_eq!(out.holdout_best, out.holdout_initial);
        assert!(!out.success);
    }

    #[test]
    fn targets_come_from_the_teacher() {
        let (teacher, m, task, plan) = replaced();
        let batch = task.draw(Purpose::Sandwich, 0, 0, 4);
        let data = collect_sandwich_data(&m, &teacher, &plan, &batch, InputSource::Pruned).unwrap();
        let tdata =
            collect_sandwich_data(&teacher, &teacher, &plan, &batch, InputSource::Pruned).unwrap();
        assert!(data.targets.bit_eq(&tdata.targets));
        // block 2 lies inside the span, upstream of lo nothing changed
        assert!(data.inputs.bit_eq(&tdata.inputs));
    }
}
