//! Persistence: run configuration, tensor checkpoints (JSON manifest plus a
//! little-endian `f32` blob) and versioned JSON reports.

mod checkpoint;
mod codec;
mod config;
mod report;

use sha2::{Digest, Sha256};

pub use checkpoint::{
    Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use codec::{
    manifest_digest, manifest_from_checkpoint, manifest_to_checkpoint, teacher_from_checkpoint,
    teacher_to_checkpoint,
};
pub use config::{
    BenchConfig, EvalConfig, ImportanceConfig, PathsConfig, RunConfig, CONFIG_VERSION, DATA_DIR_ENV,
};
pub use report::{load_report, save_report, Report, REPORT_FORMAT, REPORT_VERSION};

use crate::toymodel::ToyModel;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content digest of every parameter (name, shape, little-endian values)
/// and hidden-channel mask of a model.
pub fn model_digest(model: &ToyModel) -> String {
    let mut h = Sha256::new();
    for key in model.param_keys() {
        let t = model.param(key).expect("listed key exists");
        h.update(key.to_string().as_bytes());
        h.update([0u8]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    for blk in &model.blocks {
        if let Some(mask) = blk.dense().and_then(|d| d.hidden_mask.as_ref()) {
            h.update((blk.index as u64).to_le_bytes());
            h.update(mask.iter().map(|&k| k as u8).collect::<Vec<u8>>());
        }
    }
    hex::encode(h.finalize())
}
