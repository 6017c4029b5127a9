use serde::{Deserialize, Serialize};

use super::lora::{attach_or_reuse_lora, trainable_keys, LoraConfig};
use super::plan::plan_sandwich_width;
use super::train::{collect_sandwich_data, train_sandwich, InputSource, SandwichTrainConfig};
use crate::brll::{
    apply_deletion, apply_replacement, blocks_for_ratio, collect_pairs, fit_linear, FitOptions,
    LambdaPolicy,
};
use crate::data::{mix_seeds, Purpose, Task};
use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::manifest::{assemble, PrunedModelManifest, StageLog};
use crate::toymodel::ToyModel;

/// Order in which blocks are chosen for pruning.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// Ascending importance score.
    #[default]
    Importance,
    Start2end,
    End2start,
}

impl Ordering {
    pub fn as_str(self) -> &'static str {
        match self {
            Ordering::Importance => "importance",
            Ordering::Start2end => "start2end",
            Ordering::End2start => "end2start",
        }
    }
}

/// What happens to a selected block's residual branch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementKind {
    /// Least-squares affine surrogate.
    #[default]
    Linear,
    /// Branch removed, shortcut only.
    Delete,
}

impl ReplacementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplacementKind::Linear => "linear",
            ReplacementKind::Delete => "delete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub ordering: Ordering,
    /// Sandwich training after every replacement.
    pub st: bool,
    pub replacement: ReplacementKind,
    pub width: usize,
    pub fit_samples: usize,
    pub train_samples: usize,
    pub lambda: LambdaPolicy,
    pub fit: FitOptions,
    pub lora: LoraConfig,
    pub train: SandwichTrainConfig,
    pub inputs: InputSource,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ordering: Ordering::Importance,
            st: true,
            replacement: ReplacementKind::Linear,
            width: 3,
            fit_samples: 512,
            train_samples: 512,
            lambda: LambdaPolicy::default(),
            fit: FitOptions::default(),
            lora: LoraConfig::default(),
            train: SandwichTrainConfig::default(),
            inputs: InputSource::Pruned,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/w{}",
            self.ordering.as_str(),
            if self.st { "st" } else { "no-st" },
            self.replacement.as_str(),
            self.width
        )
    }

    pub fn stage_seed(&self, stage: usize) -> u64 {
        mix_seeds(&[self.seed, stage as u64, 0x57a6e])
    }
}

/// Blocks in pruning order. Importance ordering needs a table.
pub fn selection_order(
    ordering: Ordering,
    table: Option<&ImportanceTable>,
    n: usize,
) -> Result<Vec<usize>> {
    match ordering {
        Ordering::Importance => {
            let t = table.ok_or_else(|| Error::MissingArtifact("importance table".into()))?;
            if t.n_blocks() != n {
                return Err(Error::State(format!(
                    "importance table covers {} blocks, model has {n}",
                    t.n_blocks()
                )));
            }
            Ok(t.order.clone())
        }
        Ordering::Start2end => Ok((0..n).collect()),
        Ordering::End2start => Ok((0..n).rev().collect()),
    }
}

fn run_stage(
    model: &mut ToyModel,
    teacher: &ToyModel,
    task: &Task,
    manifest: &mut PrunedModelManifest,
    block: usize,
    cfg: &PipelineConfig,
) -> Result<()> {
    let stage = manifest.selection.len();
    let seed = cfg.stage_seed(stage);
    let prior = model.pruned_set();
    let mut log = StageLog {
        stage,
        block,
        seed,
        plan: None,
        fit: None,
        adapters_attached: 0,
        adapters_reused: 0,
        train: None,
    };
    match cfg.replacement {
        ReplacementKind::Linear => {
            let fit_batch = task.draw(Purpose::Fit, seed, 0, cfg.fit_samples);
            let problem = collect_pairs(model, block, &fit_batch, cfg.lambda)?;
            let mut record = fit_linear(&problem, &cfg.fit)?;
            record.provenance.stage = stage;
            apply_replacement(model, &record)?;
            log.fit = Some(record.diagnostics.clone());
            manifest.records.push(record);
        }
        ReplacementKind::Delete => {
            apply_deletion(model, block)?;
            manifest.deleted.push(block);
        }
    }
    manifest.selection.push(block);
    if cfg.st {
        let plan = plan_sandwich_width(block, &prior, model.n_blocks(), cfg.width)?;
        let attach = attach_or_reuse_lora(model, &plan, cfg.lora, seed)?;
        log.adapters_attached = attach.attached.len();
        log.adapters_reused = attach.reused.len();
        let batch = task.draw(Purpose::Sandwich, seed, 0, cfg.train_samples);
        let data = collect_sandwich_data(model, teacher, &plan, &batch, cfg.inputs)?;
        let keys = trainable_keys(model, &plan);
        let outcome = train_sandwich(model, &keys, &data, &cfg.train, seed)?;
        log::info!(
            "stage {stage} block {block}: holdout {:.3e} -> {:.3e}",
            outcome.holdout_initial,
            outcome.holdout_best
        );
        log.plan = Some(plan);
        log.train = Some(outcome);
    }
    manifest.sync_from(model)?;
    manifest.log.stages.push(log);
    Ok(())
}

/// Continues a pipeline from `start` (a manifest of completed stages) until
/// `target` blocks are pruned. `on_stage` sees the manifest after every stage.
pub fn resume_prune(
    teacher: &ToyModel,
    task: &Task,
    order: &[usize],
    start: PrunedModelManifest,
    target: usize,
    cfg: &PipelineConfig,
    mut on_stage: impl FnMut(&PrunedModelManifest) -> Result<()>,
) -> Result<PrunedModelManifest> {
    let n = teacher.n_blocks();
    if target > order.len() || target > n {
        return Err(Error::Config(format!(
            "cannot prune {target} of {n} blocks"
        )));
    }
    if start.selection.len() > target || order[..start.selection.len()] != start.selection[..] {
        return Err(Error::State(
            "partial manifest does not follow the selection order".into(),
        ));
    }
    if cfg.replacement == ReplacementKind::Linear && cfg.fit_samples == 0 {
        return Err(Error::Config("fit_samples must be positive".into()));
    }
    if cfg.st && cfg.train_samples == 0 {
        return Err(Error::Config("train_samples must be positive".into()));
    }
    let mut model = assemble(teacher, &start)?;
    let mut manifest = start;
    manifest.log.seed = cfg.seed;
    for &block in &order[manifest.selection.len()..target] {
        let stage = manifest.selection.len();
        let snapshot = manifest.clone();
        if let Err(e) = run_stage(&mut model, teacher, task, &mut manifest, block, cfg) {
            return Err(Error::Stage {
                stage,
                block,
                completed: Box::new(snapshot),
                source: Box::new(e),
            });
        }
        manifest.ratio = manifest.selection.len() as f64 / n as f64;
        on_stage(&manifest)?;
    }
    Ok(manifest)
}

/// Full pipeline to `⌊ratio·N⌋` pruned blocks.
pub fn progressive_prune(
    teacher: &ToyModel,
    task: &Task,
    table: Option<&ImportanceTable>,
    ratio: f64,
    cfg: &PipelineConfig,
) -> Result<PrunedModelManifest> {
    let n = teacher.n_blocks();
    let count = blocks_for_ratio(ratio, n)?;
    let order = selection_order(cfg.ordering, table, n)?;
    let start = PrunedModelManifest::empty(teacher, cfg.label(), 0.0);
    let mut m = resume_prune(teacher, task, &order, start, count, cfg, |_| Ok(()))?;
    m.ratio = ratio;
    Ok(m)
}

/// One pipeline run with a manifest snapshot at every requested ratio.
/// Because stage seeds depend only on the stage index, each snapshot equals
/// the manifest a separate run at that ratio would produce.
pub fn progressive_sweep(
    teacher: &ToyModel,
    task: &Task,
    table: Option<&ImportanceTable>,
    ratios: &[f64],
    cfg: &PipelineConfig,
) -> Result<Vec<PrunedModelManifest>> {
    let n = teacher.n_blocks();
    let counts: Vec<usize> = ratios
        .iter()
        .map(|&r| blocks_for_ratio(r, n))
        .collect::<Result<_>>()?;
    let order = selection_order(cfg.ordering, table, n)?;
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut snaps: Vec<Option<PrunedModelManifest>> = vec![None; ratios.len()];
    let start = PrunedModelManifest::empty(teacher, cfg.label(), 0.0);
    let mut fill = |m: &PrunedModelManifest| {
        for (i, &c) in counts.iter().enumerate() {
            if c == m.selection.len() && snaps[i].is_none() {
                let mut s = m.clone();
                s.ratio = ratios[i];
                snaps[i] = Some(s);
            }
        }
    };
    fill(&start);
    let done = resume_prune(teacher, task, &order, start, max, cfg, |m| {
        fill(m);
        Ok(())
    })?;
    fill(&done);
    Ok(snaps
        .into_iter()
        .map(|s| s.expect("every count is reached"))
        .collect())
}

/// Builds a low-ratio manifest whose components come from a higher-ratio
/// run: surrogates for the low-ratio blocks and the adapters of the high run.
pub fn transplant_components(
    low: &PrunedModelManifest,
    high: &PrunedModelManifest,
) -> Result<PrunedModelManifest> {
    if low.teacher_digest != high.teacher_digest {
        return Err(Error::State(
            "manifests come from different teachers".into(),
        ));
    }
    let k = low.selection.len();
    if high.selection.len() < k || high.selection[..k] != low.selection[..] {
        return Err(Error::State(
            "low-ratio selection is not a prefix of the high-ratio selection".into(),
        ));
    }
    if !low.deleted.is_empty() || !high.deleted.is_empty() {
        return Err(Error::State(
            "transplant needs surrogate replacements, not deletions".into(),
        ));
    }
    let mut hybrid = low.clone();
    hybrid.records = low
        .records
        .iter()
        .map(|r| {
            high.record(r.block)
                .cloned()
                .ok_or_else(|| Error::State(format!("high-ratio manifest lacks block {}", r.block)))
        })
        .collect::<Result<_>>()?;
    // Adapters of the high run live on blocks unpruned at the high ratio,
    // hence also unpruned here. Adapters whose host was pruned later in the
    // high run were discarded with that host and are not revived.
    hybrid.adapters = high.adapters.clone();
    if high.selection.len() > k {
        hybrid.log.notes.push(format!(
            "components transplanted from a {}-block run ({})",
            high.selection.len(),
            high.label
        ));
    }
    Ok(hybrid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskConfig;
    use crate::sandwich::SandwichTrainConfig;
    use crate::toymodel::{build_teacher, ModelConfig};

    fn setup() -> (ToyModel, Task) {
        let cfg = ModelConfig {
            n_double: 2,
            n_single: 4,
            ..ModelConfig::default()
        };
        let task = Task::new(TaskConfig::default(), cfg.n_tokens, cfg.d_model).unwrap();
        (build_teacher(&cfg).unwrap(), task)
    }

    fn quick(ordering: Ordering, st: bool) -> PipelineConfig {
        PipelineConfig {
            ordering,
            st,
            fit_samples: 48,
            train_samples: 24,
            train: SandwichTrainConfig {
                steps: 6,
                minibatch: 8,
                eval_every: 3,
                ..SandwichTrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn ratio_zero_is_the_teacher() {
        let (t, task) = setup();
        let m = progressive_prune(&t, &task, None, 0.0, &quick(Ordering::Start2end, true)).unwrap();
        assert!(m.selection.is_empty());
        assert_eq!(assemble(&t, &m).unwrap(), t);
    }

    #[test]
    fn importance_ordering_needs_a_table() {
        let (t, task) = setup();
        let err = progressive_prune(&t, &task, None, 0.5, &quick(Ordering::Importance, false))
            .unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn training_free_path_equals_manual_fits() {
        let (t, task) = setup();
        let cfg = quick(Ordering::End2start, false);
        let m = progressive_prune(&t, &task, None, 2.0 / 6.0, &cfg).unwrap();
        assert_eq!(m.selection, vec![5, 4]);
        let mut manual = t.clone();
        for (stage, &b) in [5usize, 4].iter().enumerate() {
            let batch = task.draw(Purpose::Fit, cfg.stage_seed(stage), 0, cfg.fit_samples);
            let p = collect_pairs(&manual, b, &batch, cfg.lambda).unwrap();
            let rec = fit_linear(&p, &cfg.fit).unwrap();
            assert!(rec.w.bit_eq(&m.records[stage].w));
            apply_replacement(&mut manual, &rec).unwrap();
        }
        assert_eq!(assemble(&t, &m).unwrap(), manual);
        assert!(m.adapters.is_empty());
    }

    #[test]
    fn sweep_snapshots_equal_separate_runs() {
        let (t, task) = setup();
        let cfg = quick(Ordering::Start2end, true);
        let ratios = [1.0 / 6.0, 2.0 / 6.0];
        let snaps = progressive_sweep(&t, &task, None, &ratios, &cfg).unwrap();
        for (r, s) in ratios.iter().zip(&snaps) {
            let alone = progressive_prune(&t, &task, None, *r, &cfg).unwrap();
            assert_eq!(&alone, s);
        }
    }

    #[test]
    fn resume_continues_a_partial_run() {
        let (t, task) = setup();
        let cfg = quick(Ordering::Start2end, true);
        let full = progressive_prune(&t, &task, None, 3.0 / 6.0, &cfg).unwrap();
        let order: Vec<usize> = (0..6).collect();
        let first = progressive_prune(&t, &task, None, 1.0 / 6.0, &cfg).unwrap();
        let mut resumed = resume_prune(&t, &task, &order, first, 3, &cfg, |_| Ok(())).unwrap();
        resumed.ratio = full.ratio;
        assert_eq!(resumed, full);
    }

    #[test]
    fn transplant_takes_high_components() {
        let (t, task) = setup();
        let cfg = quick(Ordering::End2start, true);
        let snaps = progressive_sweep(&t, &task, None, &[1.0 / 6.0, 3.0 / 6.0], &cfg).unwrap();
        let hybrid = transplant_components(&snaps[0], &snaps[1]).unwrap();
        assert_eq!(hybrid.selection, snaps[0].selection);
        assert_eq!(hybrid.records[0], *snaps[1].record(5).unwrap());
        assert_eq!(hybrid.adapters, snaps[1].adapters);
        let model = assemble(&t, &hybrid).unwrap();
        assert_eq!(model.pruned_set(), vec![5]);
        assert!(transplant_components(&snaps[1], &snaps[0]).is_err());
    }

    #[test]
    fn deletion_replaces_nothing_and_costs_nothing() {
        let (t, task) = setup();
        let cfg = PipelineConfig {
            replacement: ReplacementKind::Delete,
            ..quick(Ordering::Start2end, false)
        };
        let m = progressive_prune(&t, &task, None, 1.0 / 6.0, &cfg).unwrap();
        assert_eq!(m.deleted, vec![0]);
        assert!(m.records.is_empty());
        let model = assemble(&t, &m).unwrap();
        assert_eq!(model.count_cost().blocks[0].flops, 0);
    }
}
