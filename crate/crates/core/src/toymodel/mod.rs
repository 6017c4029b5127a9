//! FLUX-shaped toy: double blocks (attention + MLP) followed by single blocks
//! (MLP only), each computing `f(X) + X` with an identity shortcut.

mod cost;
mod forward;
mod params;
pub(crate) mod train;

use std::collections::BTreeMap;

use numkit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::mix_seeds;
use crate::error::{Error, Result};

pub use cost::{
    linear_flops, BlockCost, CostReport, GELU_FLOPS_PER_ELEM, LAYERNORM_FLOPS_PER_ELEM,
    SOFTMAX_FLOPS_PER_ELEM,
};
pub use forward::{ActivationTap, Binder, ForwardOutput, TapMode, TapRequest};
pub use params::{DenseParam, LinPart, LoraPart, ParamKey};
pub use train::{train_teacher, TeacherTrainConfig, TeacherTrainReport};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_tokens: usize,
    pub n_double: usize,
    pub n_single: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_tokens: 16,
            n_double: 8,
            n_single: 16,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn n_blocks(&self) -> usize {
        self.n_double + self.n_single
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_tokens", self.n_tokens),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.n_blocks() == 0 {
            return Err(Error::Config("model needs at least one block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Double,
    Single,
}

/// Weight matrices inside a dense residual branch that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightName {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl WeightName {
    pub const ALL: [WeightName; 6] = [
        WeightName::Wq,
        WeightName::Wk,
        WeightName::Wv,
        WeightName::Wo,
        WeightName::W1,
        WeightName::W2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightName::Wq => "wq",
            WeightName::Wk => "wk",
            WeightName::Wv => "wv",
            WeightName::Wo => "wo",
            WeightName::W1 => "w1",
            WeightName::W2 => "w2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.as_str() == s)
    }
}

/// `y = x·wᵀ + b` with `w` stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBranch {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// Per-channel gain on the condition embedding added after layernorm.
    pub modulation: Tensor,
    pub attn: Option<Attention>,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Hidden channels kept by magnitude pruning; `None` keeps all.
    pub hidden_mask: Option<Vec<bool>>,
}

impl DenseBranch {
    pub fn weight(&self, name: WeightName) -> Option<&Tensor> {
        match name {
            WeightName::Wq => self.attn.as_ref().map(|a| &a.wq),
            WeightName::Wk => self.attn.as_ref().map(|a| &a.wk),
            WeightName::Wv => self.attn.as_ref().map(|a| &a.wv),
            WeightName::Wo => self.attn.as_ref().map(|a| &a.wo),
            WeightName::W1 => Some(&self.w1),
            WeightName::W2 => Some(&self.w2),
        }
    }

    pub fn weight_mut(&mut self, name: WeightName) -> Option<&mut Tensor> {
        match name {
            WeightName::Wq => self.attn.as_mut().map(|a| &mut a.wq),
            WeightName::Wk => self.attn.as_mut().map(|a| &mut a.wk),
            WeightName::Wv => self.attn.as_mut().map(|a| &mut a.wv),
            WeightName::Wo => self.attn.as_mut().map(|a| &mut a.wo),
            WeightName::W1 => Some(&mut self.w1),
            WeightName::W2 => Some(&mut self.w2),
        }
    }

    pub fn weight_names(&self) -> Vec<WeightName> {
        WeightName::ALL
            .into_iter()
            .filter(|&n| self.weight(n).is_some())
            .collect()
    }

    pub fn active_hidden(&self) -> usize {
        match &self.hidden_mask {
            Some(m) => m.iter().filter(|&&k| k).count(),
            None => self.b1.len(),
        }
    }

    /// Zero the rows of `w1`/`b1` and columns of `w2` for dropped channels.
    pub fn apply_mask(&mut self) {
        let Some(mask) = self.hidden_mask.clone() else {
            return;
        };
        let d_in = self.w1.shape()[1];
        let h = self.b1.len();
        for (j, &keep) in mask.iter().enumerate() {
            if keep {
                continue;
            }
            self.w1.data_mut()[j * d_in..(j + 1) * d_in].fill(0.0);
            self.b1.data_mut()[j] = 0.0;
            let d_out = self.w2.shape()[0];
            for r in 0..d_out {
                self.w2.data_mut()[r * h + j] = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    Dense(DenseBranch),
    /// Affine surrogate `g(X) = W·X + b`.
    Linear(Linear),
    /// Residual branch removed; the block is the identity.
    Bypassed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockState {
    Dense,
    Linear,
    Bypassed,
}

/// Low-rank adapter on a frozen weight: `W + (alpha / rank)·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub block: usize,
    pub weight: WeightName,
    /// rank × in
    pub a: Tensor,
    /// out × rank
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub index: usize,
    pub kind: BlockKind,
    pub branch: Branch,
    pub adapters: BTreeMap<WeightName, LoraAdapter>,
}

impl Block {
    pub fn state(&self) -> BlockState {
        match self.branch {
            Branch::Dense(_) => BlockState::Dense,
            Branch::Linear(_) => BlockState::Linear,
            Branch::Bypassed => BlockState::Bypassed,
        }
    }

    pub fn dense(&self) -> Option<&DenseBranch> {
        match &self.branch {
            Branch::Dense(d) => Some(d),
            _ => None,
        }
    }

    pub fn dense_mut(&mut self) -> Option<&mut DenseBranch> {
        match &mut self.branch {
            Branch::Dense(d) => Some(d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub embed: Linear,
    pub cond_embed: Linear,
    pub head: Linear,
    pub blocks: Vec<Block>,
}

fn near_identity(d: usize, std: f32, rng: &mut ChaCha8Rng) -> Linear {
    let mut w = Tensor::randn(&[d, d], std, rng);
    for i in 0..d {
        w.data_mut()[i * d + i] += 1.0;
    }
    Linear {
        w,
        b: Tensor::zeros(&[d]),
    }
}

/// Seeded initialization. Double blocks come first.
pub fn build_teacher(cfg: &ModelConfig) -> Result<ToyModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[cfg.seed, 0x1417]));
    let (d, h, n) = (cfg.d_model, cfg.hidden(), cfg.n_blocks());
    let std_in = 1.0 / (d as f32).sqrt();
    let std_hidden = 1.0 / (h as f32).sqrt();
    // Keep the summed residual stream at unit scale at initialization.
    let depth = 1.0 / (2.0 * n as f32).sqrt();

    let embed = near_identity(d, 0.02, &mut rng);
    let cond_embed = Linear {
        w: Tensor::randn(&[d, d], std_in, &mut rng),
        b: Tensor::zeros(&[d]),
    };
    let head = near_identity(d, 0.02, &mut rng);

    let mut blocks = Vec::with_capacity(n);
    for index in 0..n {
        let kind = if index < cfg.n_double {
            BlockKind::Double
        } else {
            BlockKind::Single
        };
        let attn = (kind == BlockKind::Double).then(|| Attention {
            wq: Tensor::randn(&[d, d], std_in, &mut rng),
            wk: Tensor::randn(&[d, d], std_in, &mut rng),
            wv: Tensor::randn(&[d, d], std_in, &mut rng),
            wo: Tensor::randn(&[d, d], std_in * depth, &mut rng),
        });
        let branch = DenseBranch {
            ln_gamma: Tensor::full(&[d], 1.0),
            ln_beta: Tensor::zeros(&[d]),
            modulation: Tensor::randn(&[d], 0.1, &mut rng),
            attn,
            w1: Tensor::randn(&[h, d], std_in, &mut rng),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::randn(&[d, h], std_hidden * depth, &mut rng),
            b2: Tensor::zeros(&[d]),
            hidden_mask: None,
        };
        blocks.push(Block {
            index,
            kind,
            branch: Branch::Dense(branch),
            adapters: BTreeMap::new(),
        });
    }
    Ok(ToyModel {
        config: cfg.clone(),
        embed,
        cond_embed,
        head,
        blocks,
    })
}

impl ToyModel {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> Result<&Block> {
        self.blocks.get(i).ok_or_else(|| {
            Error::State(format!(
                "block {i} out of range (N = {})",
                self.blocks.len()
            ))
        })
    }

    pub fn block_mut(&mut self, i: usize) -> Result<&mut Block> {
        let n = self.blocks.len();
        self.blocks
            .get_mut(i)
            .ok_or_else(|| Error::State(format!("block {i} out of range (N = {n})")))
    }

    /// Indices of blocks whose branch is not the original dense branch.
    pub fn pruned_set(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.state() != BlockState::Dense)
            .map(|b| b.index)
            .collect()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks.iter().flat_map(|b| b.adapters.values())
    }
}
