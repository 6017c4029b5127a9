//! Evaluation of assembled models against the teacher, latency
//! micro-benchmarks, baselines and the ablation matrix.

mod baselines;
mod matrix;

use std::time::Instant;

use numkit::{ops, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Purpose, Task};
use crate::error::{Error, Result};
use crate::importance::{clip_proxy, frechet_proxy, median, pooled_features};
use crate::manifest::{assemble, PrunedModelManifest};
use crate::store::{BenchConfig, EvalConfig};
use crate::toymodel::ToyModel;

pub use baselines::{
    baseline_delete, baseline_l1, hidden_channel_flops, l1_flops_budget, L1Config,
};
pub use matrix::{
    run_ablation_matrix, sweep_block_counts, AblationMatrix, AblationMatrixConfig, Cell,
    CellResult, CellSummary, DirectionTest, SweepRow, TransplantRow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_us: f64,
    pub q1_us: f64,
    pub q3_us: f64,
    pub iqr_us: f64,
    pub runs: usize,
    /// Discarded leading runs.
    pub warmup: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub label: String,
    pub ratio: f64,
    pub blocks_pruned: usize,
    /// Fréchet distance between pooled outputs of the model and the teacher.
    pub fid_proxy: f64,
    /// Mean cosine between pooled outputs of the model and the teacher.
    pub clip_proxy: f64,
    /// MSE between model and teacher outputs.
    pub mse_vs_teacher: f64,
    /// MSE against the clean denoising targets.
    pub task_mse: f64,
    pub flops: u64,
    pub flops_ratio: f64,
    pub params_ratio: f64,
    pub latency: Option<LatencyStats>,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub eval_samples: usize,
}

/// Held-out evaluation samples; the `Eval` purpose keeps them disjoint from
/// every scoring, fitting, training and fine-tuning set.
pub fn eval_batch(task: &Task, cfg: &EvalConfig) -> Batch {
    task.draw(Purpose::Eval, cfg.stream, 0, cfg.samples)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Wall-clock forward latency on the calling thread.
pub fn bench_latency(model: &ToyModel, task: &Task, cfg: &BenchConfig) -> Result<LatencyStats> {
    Ok(bench_interleaved(&[model], task, cfg)?.remove(0))
}

/// Benchmarks several models in lockstep: every round times one forward of
/// each model, starting at a rotating position. Slow drift in machine speed
/// then shifts all models alike instead of whichever one ran during it.
pub fn bench_interleaved(
    models: &[&ToyModel],
    task: &Task,
    cfg: &BenchConfig,
) -> Result<Vec<LatencyStats>> {
    if cfg.runs == 0 || cfg.batch == 0 {
        return Err(Error::Config(
            "bench.runs and bench.batch must be positive".into(),
        ));
    }
    // Adapters are timed merged, as deployed.
    let models = models
        .iter()
        .map(|&m| {
            let mut m = m.clone();
            m.fold_adapters()?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = task.draw(Purpose::Bench, 0, 0, cfg.batch);
    let n = models.len();
    let mut times = vec![Vec::with_capacity(cfg.runs); n];
    for round in 0..cfg.warmup + cfg.runs {
        for k in 0..n {
            let m = (round + k) % n;
            let start = Instant::now();
            let y = models[m].predict(&batch)?;
            let us = start.elapsed().as_secs_f64() * 1e6;
            std::hint::black_box(y);
            if round >= cfg.warmup {
                times[m].push(us);
            }
        }
    }
    Ok(times
        .into_iter()
        .map(|mut t| {
            t.sort_by(f64::total_cmp);
            let q1 = quantile(&t, 0.25);
            let q3 = quantile(&t, 0.75);
            LatencyStats {
                median_us: median(&t),
                q1_us: q1,
                q3_us: q3,
                iqr_us: q3 - q1,
                runs: cfg.runs,
                warmup: cfg.warmup,
                batch: cfg.batch,
            }
        })
        .collect())
}

/// Teacher outputs on the evaluation batch, computed once and shared by
/// every report.
#[derive(Debug, Clone)]
pub struct EvalReference {
    pub batch: Batch,
    pub teacher_out: Tensor,
    pooled: Tensor,
}

impl EvalReference {
    pub fn new(teacher: &ToyModel, batch: Batch) -> Result<Self> {
        if batch.len() < 2 {
            return Err(Error::Config("evaluation needs at least 2 samples".into()));
        }
        let teacher_out = teacher.predict(&batch)?;
        let pooled = pooled_features(&teacher_out)?;
        Ok(Self {
            batch,
            teacher_out,
            pooled,
        })
    }
}

pub struct EvalContext<'a> {
    pub teacher: &'a ToyModel,
    pub task: &'a Task,
    pub reference: &'a EvalReference,
    /// `None` skips the latency benchmark.
    pub bench: Option<&'a BenchConfig>,
    pub config_digest: &'a str,
}

/// Scores an assembled model against the teacher.
pub fn evaluate_model(
    ctx: &EvalContext<'_>,
    model: &ToyModel,
    model_id: &str,
    label: &str,
    ratio: f64,
    seeds: Vec<u64>,
) -> Result<EvalReport> {
    let r = ctx.reference;
    let out = model.predict(&r.batch)?;
    let fid = frechet_proxy(&pooled_features(&out)?, &r.pooled)?;
    let clip = clip_proxy(&out, &r.teacher_out)?.value;
    let mse_vs_teacher = ops::mse(&out, &r.teacher_out)?.item() as f64;
    let task_mse = ops::mse(&out, &r.batch.clean)?.item() as f64;
    let cost = model.count_cost_vs(ctx.teacher);
    let latency = ctx
        .bench
        .map(|b| bench_latency(model, ctx.task, b))
        .transpose()?;
    let report = EvalReport {
        model_id: model_id.into(),
        label: label.into(),
        ratio,
        blocks_pruned: model.pruned_set().len(),
        fid_proxy: fid,
        clip_proxy: clip,
        mse_vs_teacher,
        task_mse,
        flops: cost.total_flops,
        flops_ratio: cost.flops_ratio,
        params_ratio: cost.params_ratio,
        latency,
        seeds,
        config_digest: ctx.config_digest.into(),
        eval_samples: r.batch.len(),
    };
    let metrics = [fid, clip, mse_vs_teacher, task_mse];
    if metrics.iter().any(|v| !v.is_finite()) {
        return Err(Error::State(format!(
            "non-finite metrics for {model_id}: {metrics:?}"
        )));
    }
    Ok(report)
}

/// Assembles a manifest and scores it.
pub fn evaluate(
    ctx: &EvalContext<'_>,
    manifest: &PrunedModelManifest,
    model_id: &str,
) -> Result<EvalReport> {
    let model = assemble(ctx.teacher, manifest)?;
    evaluate_model(
        ctx,
        &model,
        model_id,
        &manifest.label,
        manifest.ratio,
        vec![manifest.log.seed],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskConfig;
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
    fn teacher_against_itself() {
        let (t, task) = setup();
        let r = EvalReference::new(
            &t,
            eval_batch(
                &task,
                &EvalConfig {
                    samples: 64,
                    stream: 0,
                },
            ),
        )
        .unwrap();
        let ctx = EvalContext {
            teacher: &t,
            task: &task,
            reference: &r,
            bench: None,
            config_digest: "x",
        };
        let rep = evaluate_model(&ctx, &t, "teacher", "teacher", 0.0, vec![]).unwrap();
        assert!(rep.fid_proxy < 1e-6, "{}", rep.fid_proxy);
        assert!(rep.clip_proxy > 1.0 - 1e-6);
        assert_eq!(rep.mse_vs_teacher, 0.0);
        assert_eq!(rep.flops_ratio, 1.0);
    }

    #[test]
    fn latency_excludes_warmup() {
        let (t, task) = setup();
        let cfg = BenchConfig {
            runs: 12,
            warmup: 3,
            batch: 2,
        };
        let s = bench_latency(&t, &task, &cfg).unwrap();
        assert_eq!((s.runs, s.warmup), (12, 3));
        assert!(s.q1_us <= s.median_us && s.median_us <= s.q3_us);
    }

    #[test]
    fn interleaved_bench_reports_every_model() {
        let (t, task) = setup();
        let mut small = t.clone();
        crate::brll::apply_deletion(&mut small, 1).unwrap();
        let cfg = BenchConfig {
            runs: 30,
            warmup: 2,
            batch: 4,
        };
        let s = bench_interleaved(&[&t, &small, &t], &task, &cfg).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|l| l.runs == 30 && l.median_us > 0.0));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }
}
