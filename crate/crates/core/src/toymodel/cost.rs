//! Parameter and FLOP accounting, per sample.
//!
//! | term                         | FLOPs                        |
//! |------------------------------|------------------------------|
//! | linear, rows × in → out      | 2·rows·in·out (+ rows·out bias) |
//! | layernorm                    | 8 per element                |
//! | condition modulation         | d (scale) + rows·d (add)     |
//! | attention scores / mixing    | 2·T·T·d each                 |
//! | softmax                      | 5 per score                  |
//! | tanh GELU                    | 8 per element                |
//! | branch sum, shortcut add     | rows·d each                  |
//!
//! Adapters are counted as folded into their host weight, so they add no
//! FLOPs or deployed parameters.

use serde::{Deserialize, Serialize};

use super::{BlockKind, BlockState, Branch, ToyModel};

pub const LAYERNORM_FLOPS_PER_ELEM: u64 = 8;
pub const GELU_FLOPS_PER_ELEM: u64 = 8;
pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;

pub fn linear_flops(rows: u64, fan_in: u64, fan_out: u64, bias: bool) -> u64 {
    2 * rows * fan_in * fan_out + if bias { rows * fan_out } else { 0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCost {
    pub index: usize,
    pub kind: BlockKind,
    pub state: BlockState,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub blocks: Vec<BlockCost>,
    pub embed_params: u64,
    pub embed_flops: u64,
    pub head_params: u64,
    pub head_flops: u64,
    pub total_params: u64,
    pub total_flops: u64,
    pub reference_params: u64,
    pub reference_flops: u64,
    pub params_ratio: f64,
    pub flops_ratio: f64,
}

impl ToyModel {
    fn block_cost(&self, i: usize) -> BlockCost {
        let blk = &self.blocks[i];
        let t = self.config.n_tokens as u64;
        let d = self.config.d_model as u64;
        let (params, flops) = match &blk.branch {
            Branch::Bypassed => (0, 0),
            Branch::Linear(l) => (
                (l.w.len() + l.b.len()) as u64,
                linear_flops(t, d, d, true) + t * d,
            ),
            Branch::Dense(br) => {
                let h = br.active_hidden() as u64;
                let mut p = 3 * d + d * h + h + h * d + d;
                let mut f = LAYERNORM_FLOPS_PER_ELEM * t * d
                    + d
                    + t * d
                    + linear_flops(t, d, h, true)
                    + GELU_FLOPS_PER_ELEM * t * h
                    + linear_flops(t, h, d, true)
                    + t * d;
                if br.attn.is_some() {
                    p += 4 * d * d;
                    f += 4 * linear_flops(t, d, d, false)
                        + 2 * (2 * t * t * d)
                        + SOFTMAX_FLOPS_PER_ELEM * t * t
                        + t * d;
                }
                (p, f)
            }
        };
        BlockCost {
            index: i,
            kind: blk.kind,
            state: blk.state(),
            params,
            flops,
        }
    }

    /// Cost of this model relative to itself.
    pub fn count_cost(&self) -> CostReport {
        self.count_cost_vs(self)
    }

    /// Cost of this model with ratios against `reference`.
    pub fn count_cost_vs(&self, reference: &ToyModel) -> CostReport {
        let mut report = self.raw_cost();
        let r = reference.raw_cost();
        report.reference_params = r.total_params;
        report.reference_flops = r.total_flops;
        report.params_ratio = report.total_params as f64 / r.total_params as f64;
        report.flops_ratio = report.total_flops as f64 / r.total_flops as f64;
        report
    }

    fn raw_cost(&self) -> CostReport {
        let t = self.config.n_tokens as u64;
        let d = self.config.d_model as u64;
        let blocks: Vec<BlockCost> = (0..self.n_blocks()).map(|i| self.block_cost(i)).collect();
        let embed_params = 2 * (d * d + d);
        let embed_flops = linear_flops(t, d, d, true) + linear_flops(1, d, d, true);
        let head_params = d * d + d;
        let head_flops = linear_flops(t, d, d, true);
        let total_params =
            embed_params + head_params + blocks.iter().map(|b| b.params).sum::<u64>();
        let total_flops = embed_flops + head_flops + blocks.iter().map(|b| b.flops).sum::<u64>();
        CostReport {
            blocks,
            embed_params,
            embed_flops,
            head_params,
            head_flops,
            total_params,
            total_flops,
            reference_params: total_params,
            reference_flops: total_flops,
            params_ratio: 1.0,
            flops_ratio: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{build_teacher, Linear, ModelConfig};
    use numkit::Tensor;

    #[test]
    fn linear_layer_example() {
        assert_eq!(linear_flops(16, 32, 32, true), 2 * 16 * 32 * 32 + 16 * 32);
        assert_eq!(linear_flops(16, 32, 32, true), 33_280);
    }

    #[test]
    fn totals_are_sums_and_param_count_matches_tensors() {
        let m = build_teacher(&ModelConfig::default()).unwrap();
        let c = m.count_cost();
        let blocks: u64 = c.blocks.iter().map(|b| b.flops).sum();
        assert_eq!(c.total_flops, blocks + c.embed_flops + c.head_flops);
        assert_eq!(c.total_params as usize, m.param_count());
        assert_eq!(c.flops_ratio, 1.0);
    }

    #[test]
    fn replacing_any_block_lowers_cost() {
        let teacher = build_teacher(&ModelConfig::default()).unwrap();
        let base = teacher.count_cost();
        for i in [0, 7, 8, 23] {
            let mut m = teacher.clone();
            m.blocks[i].branch = Branch::Linear(Linear {
                w: Tensor::zeros(&[32, 32]),
                b: Tensor::zeros(&[32]),
            });
            let c = m.count_cost_vs(&teacher);
            assert!(c.total_flops < base.total_flops);
            assert!(c.total_params < base.total_params);
            assert!(c.flops_ratio > 0.0 && c.flops_ratio < 1.0);
            assert_eq!(c.blocks[i].flops, 33_280 + 16 * 32);
            assert_eq!(c.total_params as usize, m.param_count());
        }
    }
}
