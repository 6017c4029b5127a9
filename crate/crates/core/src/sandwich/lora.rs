use numkit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::SandwichPlan;
use crate::data::mix_seeds;
use crate::error::{Error, Result};
use crate::toymodel::{LinPart, LoraAdapter, LoraPart, ParamKey, ToyModel, WeightName};

/// Standard deviation of the initial `A` factor.
pub const LORA_INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttachReport {
    pub attached: Vec<(usize, WeightName)>,
    pub reused: Vec<(usize, WeightName)>,
}

fn new_adapter(
    block: usize,
    weight: WeightName,
    w: &Tensor,
    cfg: LoraConfig,
    seed: u64,
) -> Result<LoraAdapter> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if cfg.rank == 0 || cfg.rank > out.min(inp) {
        return Err(Error::Config(format!(
            "LoRA rank must be in 1..={}, got {}",
            out.min(inp),
            cfg.rank
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[seed, block as u64, weight as u64]));
    Ok(LoraAdapter {
        block,
        weight,
        a: Tensor::randn(&[cfg.rank, inp], LORA_INIT_STD, &mut rng),
        b: Tensor::zeros(&[out, cfg.rank]),
        rank: cfg.rank,
        alpha: cfg.alpha,
    })
}

fn attach_impl(
    model: &mut ToyModel,
    plan: &SandwichPlan,
    cfg: LoraConfig,
    seed: u64,
    reuse: bool,
) -> Result<AttachReport> {
    let mut report = AttachReport::default();
    let mut fresh = Vec::new();
    for b in plan.adapter_blocks() {
        let blk = model.block(b)?;
        let dense = blk.dense().ok_or_else(|| {
            Error::State(format!(
                "flank block {b} is {:?}; adapters need a dense branch",
                blk.state()
            ))
        })?;
        for name in dense.weight_names() {
            if blk.adapters.contains_key(&name) {
                if !reuse {
                    return Err(Error::State(format!(
                        "block {b} already has an adapter on {}",
                        name.as_str()
                    )));
                }
                report.reused.push((b, name));
                continue;
            }
            let w = dense.weight(name).expect("listed by weight_names");
            fresh.push(new_adapter(b, name, w, cfg, seed)?);
        }
    }
    for ad in fresh {
        report.attached.push((ad.block, ad.weight));
        model.blocks[ad.block].adapters.insert(ad.weight, ad);
    }
    Ok(report)
}

/// Adds zero-initialized adapters to every weight of the plan's flank
/// blocks. Fails if any of those weights already has one.
pub fn attach_lora(
    model: &mut ToyModel,
    plan: &SandwichPlan,
    cfg: LoraConfig,
    seed: u64,
) -> Result<AttachReport> {
    attach_impl(model, plan, cfg, seed, false)
}

/// Like [`attach_lora`], but an existing adapter is kept and reported as
/// reused instead of being an error.
pub fn attach_or_reuse_lora(
    model: &mut ToyModel,
    plan: &SandwichPlan,
    cfg: LoraConfig,
    seed: u64,
) -> Result<AttachReport> {
    attach_impl(model, plan, cfg, seed, true)
}

/// Parameters updated by sandwich training: every surrogate inside the span
/// and every adapter on the flanks.
pub fn trainable_keys(model: &ToyModel, plan: &SandwichPlan) -> Vec<ParamKey> {
    let mut keys = Vec::new();
    for &b in &plan.trainable_surrogates {
        for part in [LinPart::W, LinPart::B] {
            let k = ParamKey::Surrogate { block: b, part };
            if model.param(k).is_some() {
                keys.push(k);
            }
        }
    }
    for b in plan.adapter_blocks() {
        if let Some(blk) = model.blocks.get(b) {
            for &weight in blk.adapters.keys() {
                for part in [LoraPart::A, LoraPart::B] {
                    keys.push(ParamKey::Adapter {
                        block: b,
                        weight,
                        part,
                    });
                }
            }
        }
    }
    keys
}

pub fn trainable_param_count(model: &ToyModel, keys: &[ParamKey]) -> usize {
    keys.iter()
        .filter_map(|&k| model.param(k))
        .map(Tensor::len)
        .sum()
}
