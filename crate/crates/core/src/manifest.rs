//! Description of a pruned model as a delta over the frozen teacher.

use numkit::Tensor;
use serde::{Deserialize, Serialize};

use crate::brll::{apply_deletion, apply_replacement, FitDiagnostics, ReplacementRecord};
use crate::error::{Error, Result};
use crate::sandwich::{SandwichPlan, TrainOutcome};
use crate::store::model_digest;
use crate::toymodel::{LoraAdapter, ParamKey, ToyModel};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub block: usize,
    pub seed: u64,
    pub plan: Option<SandwichPlan>,
    pub fit: Option<FitDiagnostics>,
    pub adapters_attached: usize,
    pub adapters_reused: usize,
    pub train: Option<TrainOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineLog {
    pub seed: u64,
    pub stages: Vec<StageLog>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModelManifest {
    pub format_version: u32,
    pub teacher_digest: String,
    /// Digest of the effective configuration that produced the manifest.
    pub config_digest: String,
    /// Short method description, e.g. `importance/st/linear/w3`.
    pub label: String,
    pub ratio: f64,
    /// Pruned blocks in the order they were processed.
    pub selection: Vec<usize>,
    pub records: Vec<ReplacementRecord>,
    pub deleted: Vec<usize>,
    pub adapters: Vec<LoraAdapter>,
    /// Magnitude-pruning masks over MLP hidden channels, per block.
    pub hidden_masks: Vec<(usize, Vec<bool>)>,
    /// Teacher parameters replaced wholesale (global fine-tuning).
    pub overrides: Vec<(ParamKey, Tensor)>,
    pub log: PipelineLog,
}

impl PrunedModelManifest {
    pub fn empty(teacher: &ToyModel, label: impl Into<String>, ratio: f64) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            teacher_digest: model_digest(teacher),
            config_digest: String::new(),
            label: label.into(),
            ratio,
            selection: Vec::new(),
            records: Vec::new(),
            deleted: Vec::new(),
            adapters: Vec::new(),
            hidden_masks: Vec::new(),
            overrides: Vec::new(),
            log: PipelineLog::default(),
        }
    }

    pub fn pruned_blocks(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .records
            .iter()
            .map(|r| r.block)
            .chain(self.deleted.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }

    pub fn record(&self, block: usize) -> Option<&ReplacementRecord> {
        self.records.iter().find(|r| r.block == block)
    }

    /// Structural checks that need no teacher.
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        let pruned = self.pruned_blocks();
        if pruned.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::State("manifest prunes a block twice".into()));
        }
        if let Some(&b) = pruned.iter().find(|&&b| b >= n_blocks) {
            return Err(Error::State(format!(
                "manifest block {b} out of range (N = {n_blocks})"
            )));
        }
        if let Some(a) = self
            .adapters
            .iter()
            .find(|a| pruned.binary_search(&a.block).is_ok())
        {
            return Err(Error::State(format!(
                "adapter on {} targets pruned block {}",
                a.weight.as_str(),
                a.block
            )));
        }
        Ok(())
    }

    /// Refreshes surrogates and adapters from a model that the pipeline is
    /// training in place.
    pub(crate) fn sync_from(&mut self, model: &ToyModel) -> Result<()> {
        for rec in &mut self.records {
            let blk = model.block(rec.block)?;
            if let crate::toymodel::Branch::Linear(l) = &blk.branch {
                if !l.w.bit_eq(&rec.w) || !l.b.bit_eq(&rec.b) {
                    rec.w = l.w.clone();
                    rec.b = l.b.clone();
                    rec.provenance.st_updated = true;
                }
            }
        }
        self.adapters = model.adapters().cloned().collect();
        Ok(())
    }
}

/// Rebuilds the pruned model from the teacher and a manifest.
pub fn assemble(teacher: &ToyModel, manifest: &PrunedModelManifest) -> Result<ToyModel> {
    manifest.validate(teacher.n_blocks())?;
    let digest = model_digest(teacher);
    if digest != manifest.teacher_digest {
        return Err(Error::State(format!(
            "manifest was built from teacher {} but got {}",
            manifest.teacher_digest, digest
        )));
    }
    let mut model = teacher.clone();
    for (key, t) in &manifest.overrides {
        let p = model
            .param_mut(*key)
            .ok_or_else(|| Error::State(format!("override for missing parameter {key}")))?;
        if p.shape() != t.shape() {
            return Err(Error::State(format!(
                "override {key} has shape {:?}",
                t.shape()
            )));
        }
        *p = t.clone();
    }
    for (b, mask) in &manifest.hidden_masks {
        let d = model
            .block_mut(*b)?
            .dense_mut()
            .ok_or_else(|| Error::State(format!("mask on non-dense block {b}")))?;
        if mask.len() != d.b1.len() {
            return Err(Error::State(format!(
                "mask for block {b} has {} entries",
                mask.len()
            )));
        }
        d.hidden_mask = Some(mask.clone());
        d.apply_mask();
    }
    for rec in &manifest.records {
        apply_replacement(&mut model, rec)?;
    }
    for &b in &manifest.deleted {
        apply_deletion(&mut model, b)?;
    }
    for ad in &manifest.adapters {
        let blk = model.block_mut(ad.block)?;
        let dense = blk
            .dense()
            .ok_or_else(|| Error::State(format!("adapter host {} is not dense", ad.block)))?;
        let w = dense.weight(ad.weight).ok_or_else(|| {
            Error::State(format!(
                "block {} has no weight {}",
                ad.block,
                ad.weight.as_str()
            ))
        })?;
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        if ad.a.shape() != [ad.rank, inp] || ad.b.shape() != [out, ad.rank] {
            return Err(Error::State(format!(
                "adapter {}.{} shapes do not match its host",
                ad.block,
                ad.weight.as_str()
            )));
        }
        if blk.adapters.insert(ad.weight, ad.clone()).is_some() {
            return Err(Error::State(format!(
                "duplicate adapter {}.{}",
                ad.block,
                ad.weight.as_str()
            )));
        }
    }
    Ok(model)
}
