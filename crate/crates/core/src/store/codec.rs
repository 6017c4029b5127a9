//! Mapping between models / manifests and on-disk checkpoints.

use numkit::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::sha256_hex;
use crate::brll::{FitDiagnostics, Provenance, ReplacementRecord};
use crate::error::{Error, Result};
use crate::manifest::{PipelineLog, PrunedModelManifest};
use crate::toymodel::{
    build_teacher, BlockState, LoraAdapter, ModelConfig, ParamKey, ToyModel, WeightName,
};

pub const TEACHER_KIND: &str = "teacher";
pub const MANIFEST_KIND: &str = "pruned-manifest";

fn take(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = ck
        .tensor(name)
        .ok_or_else(|| Error::Corrupt(format!("checkpoint has no tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::Corrupt(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t.clone())
}

fn meta<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, field: &str) -> Result<T> {
    let v = ck
        .metadata
        .get(field)
        .ok_or_else(|| Error::Corrupt(format!("checkpoint metadata lacks {field}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Corrupt(format!("metadata {field}: {e}")))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("metadata types serialize")
}

/// Only dense, adapter-free models are stored as teachers.
pub fn teacher_to_checkpoint(model: &ToyModel, config_digest: &str) -> Result<Checkpoint> {
    if let Some(b) = model
        .blocks
        .iter()
        .find(|b| b.state() != BlockState::Dense || !b.adapters.is_empty())
    {
        return Err(Error::State(format!(
            "block {} is not a plain dense block",
            b.index
        )));
    }
    let tensors = model
        .param_keys()
        .into_iter()
        .map(|k| (k.to_string(), model.param(k).expect("listed key").clone()))
        .collect();
    Ok(Checkpoint {
        kind: TEACHER_KIND.into(),
        config_digest: config_digest.into(),
        metadata: json!({ "model": model.config }),
        tensors,
    })
}

pub fn teacher_from_checkpoint(ck: &Checkpoint) -> Result<ToyModel> {
    if ck.kind != TEACHER_KIND {
        return Err(Error::Parse(format!(
            "expected a {TEACHER_KIND} checkpoint, got {:?}",
            ck.kind
        )));
    }
    let cfg: ModelConfig = meta(ck, "model")?;
    let mut model =
        build_teacher(&cfg).map_err(|e| Error::Corrupt(format!("stored model config: {e}")))?;
    let keys = model.param_keys();
    if keys.len() != ck.tensors.len() {
        return Err(Error::Corrupt(format!(
            "teacher checkpoint has {} tensors, the model needs {}",
            ck.tensors.len(),
            keys.len()
        )));
    }
    for k in keys {
        let slot = model.param_mut(k).expect("listed key");
        *slot = take(ck, &k.to_string(), slot.shape())?;
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    block: usize,
    diagnostics: FitDiagnostics,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    block: usize,
    weight: WeightName,
    rank: usize,
    alpha: f32,
}

pub fn manifest_to_checkpoint(m: &PrunedModelManifest) -> Result<Checkpoint> {
    let d = m.records.first().map(|r| r.b.len());
    let mut tensors = Vec::new();
    let mut records = Vec::new();
    for r in &m.records {
        let dd = d.expect("non-empty");
        if r.w.shape() != [dd, dd] || r.b.shape() != [dd] {
            return Err(Error::State(format!(
                "record {} has inconsistent shapes",
                r.block
            )));
        }
        tensors.push((format!("records.{}.w", r.block), r.w.clone()));
        tensors.push((format!("records.{}.b", r.block), r.b.clone()));
        records.push(RecordMeta {
            block: r.block,
            diagnostics: r.diagnostics.clone(),
            provenance: r.provenance.clone(),
        });
    }
    let mut adapters = Vec::new();
    for a in &m.adapters {
        let stem = format!("adapters.{}.{}", a.block, a.weight.as_str());
        tensors.push((format!("{stem}.a"), a.a.clone()));
        tensors.push((format!("{stem}.b"), a.b.clone()));
        adapters.push(AdapterMeta {
            block: a.block,
            weight: a.weight,
            rank: a.rank,
            alpha: a.alpha,
        });
    }
    let mut overrides = Vec::new();
    for (k, t) in &m.overrides {
        tensors.push((format!("overrides.{k}"), t.clone()));
        overrides.push(k.to_string());
    }
    Ok(Checkpoint {
        kind: MANIFEST_KIND.into(),
        config_digest: m.config_digest.clone(),
        metadata: json!({
            "format_version": m.format_version,
            "teacher_digest": m.teacher_digest,
            "label": m.label,
            "ratio": m.ratio,
            "selection": m.selection,
            "records": to_value(&records),
            "deleted": m.deleted,
            "adapters": to_value(&adapters),
            "hidden_masks": to_value(&m.hidden_masks),
            "overrides": overrides,
            "log": to_value(&m.log),
        }),
        tensors,
    })
}

pub fn manifest_from_checkpoint(ck: &Checkpoint) -> Result<PrunedModelManifest> {
    if ck.kind != MANIFEST_KIND {
        return Err(Error::Parse(format!(
            "expected a {MANIFEST_KIND} checkpoint, got {:?}",
            ck.kind
        )));
    }
    let records_meta: Vec<RecordMeta> = meta(ck, "records")?;
    let adapters_meta: Vec<AdapterMeta> = meta(ck, "adapters")?;
    let override_names: Vec<String> = meta(ck, "overrides")?;
    let expected = 2 * records_meta.len() + 2 * adapters_meta.len() + override_names.len();
    if expected != ck.tensors.len() {
        return Err(Error::Corrupt(format!(
            "manifest checkpoint has {} tensors but its metadata describes {expected}",
            ck.tensors.len()
        )));
    }
    let mut records = Vec::with_capacity(records_meta.len());
    for r in records_meta {
        let b = ck
            .tensor(&format!("records.{}.b", r.block))
            .ok_or_else(|| Error::Corrupt(format!("missing bias of record {}", r.block)))?;
        let d = b.len();
        records.push(ReplacementRecord {
            block: r.block,
            w: take(ck, &format!("records.{}.w", r.block), &[d, d])?,
            b: take(ck, &format!("records.{}.b", r.block), &[d])?,
            diagnostics: r.diagnostics,
            provenance: r.provenance,
        });
    }
    let mut adapters = Vec::with_capacity(adapters_meta.len());
    for a in adapters_meta {
        let stem = format!("adapters.{}.{}", a.block, a.weight.as_str());
        let at = ck
            .tensor(&format!("{stem}.a"))
            .ok_or_else(|| Error::Corrupt(format!("missing {stem}.a")))?;
        let bt = ck
            .tensor(&format!("{stem}.b"))
            .ok_or_else(|| Error::Corrupt(format!("missing {stem}.b")))?;
        if at.rank() != 2 || bt.rank() != 2 || at.shape()[0] != a.rank || bt.shape()[1] != a.rank {
            return Err(Error::Corrupt(format!(
                "adapter {stem} does not have rank {}",
                a.rank
            )));
        }
        adapters.push(LoraAdapter {
            block: a.block,
            weight: a.weight,
            a: at.clone(),
            b: bt.clone(),
            rank: a.rank,
            alpha: a.alpha,
        });
    }
    let mut overrides = Vec::with_capacity(override_names.len());
    for name in override_names {
        let key = ParamKey::parse(&name)
            .ok_or_else(|| Error::Corrupt(format!("unknown override parameter {name}")))?;
        let t = ck
            .tensor(&format!("overrides.{name}"))
            .ok_or_else(|| Error::Corrupt(format!("missing override {name}")))?;
        overrides.push((key, t.clone()));
    }
    let log: PipelineLog = meta(ck, "log")?;
    Ok(PrunedModelManifest {
        format_version: meta(ck, "format_version")?,
        teacher_digest: meta(ck, "teacher_digest")?,
        config_digest: ck.config_digest.clone(),
        label: meta(ck, "label")?,
        ratio: meta(ck, "ratio")?,
        selection: meta(ck, "selection")?,
        records,
        deleted: meta(ck, "deleted")?,
        adapters,
        hidden_masks: meta(ck, "hidden_masks")?,
        overrides,
        log,
    })
}

/// Digest of a manifest's serialized form, independent of where it is stored.
pub fn manifest_digest(m: &PrunedModelManifest) -> Result<String> {
    let (json, blob) = manifest_to_checkpoint(m)?.encode()?;
    let mut bytes = sha256_hex(&blob).into_bytes();
    let header: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| Error::Parse(e.to_string()))?;
    // The tool version is not part of the content.
    let mut header = header;
    header["tool_version"] = serde_json::Value::Null;
    bytes.extend(serde_json::to_vec(&header).map_err(|e| Error::Parse(e.to_string()))?);
    Ok(sha256_hex(&bytes))
}
