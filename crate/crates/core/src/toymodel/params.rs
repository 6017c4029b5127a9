use std::fmt;

use numkit::Tensor;

use super::{Branch, ToyModel, WeightName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinPart {
    W,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LoraPart {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DenseParam {
    LnGamma,
    LnBeta,
    Modulation,
    Weight(WeightName),
    B1,
    B2,
}

impl DenseParam {
    pub const ALL: [DenseParam; 11] = [
        DenseParam::LnGamma,
        DenseParam::LnBeta,
        DenseParam::Modulation,
        DenseParam::Weight(WeightName::Wq),
        DenseParam::Weight(WeightName::Wk),
        DenseParam::Weight(WeightName::Wv),
        DenseParam::Weight(WeightName::Wo),
        DenseParam::Weight(WeightName::W1),
        DenseParam::B1,
        DenseParam::Weight(WeightName::W2),
        DenseParam::B2,
    ];

    fn as_str(self) -> &'static str {
        match self {
            DenseParam::LnGamma => "ln_gamma",
            DenseParam::LnBeta => "ln_beta",
            DenseParam::Modulation => "modulation",
            DenseParam::Weight(w) => w.as_str(),
            DenseParam::B1 => "b1",
            DenseParam::B2 => "b2",
        }
    }
}

/// Address of one parameter tensor inside a [`ToyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Embed(LinPart),
    CondEmbed(LinPart),
    Head(LinPart),
    Dense {
        block: usize,
        param: DenseParam,
    },
    Surrogate {
        block: usize,
        part: LinPart,
    },
    Adapter {
        block: usize,
        weight: WeightName,
        part: LoraPart,
    },
}

fn lin_str(p: LinPart) -> &'static str {
    match p {
        LinPart::W => "w",
        LinPart::B => "b",
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamKey::Embed(p) => write!(f, "embed.{}", lin_str(p)),
            ParamKey::CondEmbed(p) => write!(f, "cond_embed.{}", lin_str(p)),
            ParamKey::Head(p) => write!(f, "head.{}", lin_str(p)),
            ParamKey::Dense { block, param } => write!(f, "blocks.{block}.{}", param.as_str()),
            ParamKey::Surrogate { block, part } => {
                write!(f, "blocks.{block}.surrogate.{}", lin_str(part))
            }
            ParamKey::Adapter {
                block,
                weight,
                part,
            } => {
                let p = match part {
                    LoraPart::A => "a",
                    LoraPart::B => "b",
                };
                write!(f, "blocks.{block}.lora.{}.{p}", weight.as_str())
            }
        }
    }
}

impl ParamKey {
    pub fn parse(s: &str) -> Option<Self> {
        let lin = |p: &str| match p {
            "w" => Some(LinPart::W),
            "b" => Some(LinPart::B),
            _ => None,
        };
        let parts: Vec<&str> = s.split('.').collect();
        match parts.as_slice() {
            ["embed", p] => lin(p).map(ParamKey::Embed),
            ["cond_embed", p] => lin(p).map(ParamKey::CondEmbed),
            ["head", p] => lin(p).map(ParamKey::Head),
            ["blocks", i, "surrogate", p] => Some(ParamKey::Surrogate {
                block: i.parse().ok()?,
                part: lin(p)?,
            }),
            ["blocks", i, "lora", w, p] => Some(ParamKey::Adapter {
                block: i.parse().ok()?,
                weight: WeightName::parse(w)?,
                part: match *p {
                    "a" => LoraPart::A,
                    "b" => LoraPart::B,
                    _ => return None,
                },
            }),
            ["blocks", i, name] => Some(ParamKey::Dense {
                block: i.parse().ok()?,
                param: DenseParam::ALL.into_iter().find(|p| p.as_str() == *name)?,
            }),
            _ => None,
        }
    }

    pub fn block(&self) -> Option<usize> {
        match *self {
            ParamKey::Dense { block, .. }
            | ParamKey::Surrogate { block, .. }
            | ParamKey::Adapter { block, .. } => Some(block),
            _ => None,
        }
    }
}

impl ToyModel {
    /// Every parameter in a fixed order: embeddings, blocks, head.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = vec![
            ParamKey::Embed(LinPart::W),
            ParamKey::Embed(LinPart::B),
            ParamKey::CondEmbed(LinPart::W),
            ParamKey::CondEmbed(LinPart::B),
        ];
        for blk in &self.blocks {
            let block = blk.index;
            match &blk.branch {
                Branch::Dense(d) => {
                    for param in DenseParam::ALL {
                        if let DenseParam::Weight(w) = param {
                            if d.weight(w).is_none() {
                                continue;
                            }
                        }
                        keys.push(ParamKey::Dense { block, param });
                    }
                }
                Branch::Linear(_) => {
                    keys.push(ParamKey::Surrogate {
                        block,
                        part: LinPart::W,
                    });
                    keys.push(ParamKey::Surrogate {
                        block,
                        part: LinPart::B,
                    });
                }
                Branch::Bypassed => {}
            }
            for &weight in blk.adapters.keys() {
                for part in [LoraPart::A, LoraPart::B] {
                    keys.push(ParamKey::Adapter {
                        block,
                        weight,
                        part,
                    });
                }
            }
        }
        keys.push(ParamKey::Head(LinPart::W));
        keys.push(ParamKey::Head(LinPart::B));
        keys
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        match key {
            ParamKey::Embed(p) => Some(pick(&self.embed, p)),
            ParamKey::CondEmbed(p) => Some(pick(&self.cond_embed, p)),
            ParamKey::Head(p) => Some(pick(&self.head, p)),
            ParamKey::Dense { block, param } => {
                let d = self.blocks.get(block)?.dense()?;
                match param {
                    DenseParam::LnGamma => Some(&d.ln_gamma),
                    DenseParam::LnBeta => Some(&d.ln_beta),
                    DenseParam::Modulation => Some(&d.modulation),
                    DenseParam::Weight(w) => d.weight(w),
                    DenseParam::B1 => Some(&d.b1),
                    DenseParam::B2 => Some(&d.b2),
                }
            }
            ParamKey::Surrogate { block, part } => match &self.blocks.get(block)?.branch {
                Branch::Linear(l) => Some(pick(l, part)),
                _ => None,
            },
            ParamKey::Adapter {
                block,
                weight,
                part,
            } => {
                let a = self.blocks.get(block)?.adapters.get(&weight)?;
                Some(match part {
                    LoraPart::A => &a.a,
                    LoraPart::B => &a.b,
                })
            }
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        match key {
            ParamKey::Embed(p) => Some(pick_mut(&mut self.embed, p)),
            ParamKey::CondEmbed(p) => Some(pick_mut(&mut self.cond_embed, p)),
            ParamKey::Head(p) => Some(pick_mut(&mut self.head, p)),
            ParamKey::Dense { block, param } => {
                let d = self.blocks.get_mut(block)?.dense_mut()?;
                match param {
                    DenseParam::LnGamma => Some(&mut d.ln_gamma),
                    DenseParam::LnBeta => Some(&mut d.ln_beta),
                    DenseParam::Modulation => Some(&mut d.modulation),
                    DenseParam::Weight(w) => {
                        let attn = d.attn.as_mut();
                        match w {
                            WeightName::W1 => Some(&mut d.w1),
                            WeightName::W2 => Some(&mut d.w2),
                            WeightName::Wq => attn.map(|a| &mut a.wq),
                            WeightName::Wk => attn.map(|a| &mut a.wk),
                            WeightName::Wv => attn.map(|a| &mut a.wv),
                            WeightName::Wo => attn.map(|a| &mut a.wo),
                        }
                    }
                    DenseParam::B1 => Some(&mut d.b1),
                    DenseParam::B2 => Some(&mut d.b2),
                }
            }
            ParamKey::Surrogate { block, part } => match &mut self.blocks.get_mut(block)?.branch {
                Branch::Linear(l) => Some(pick_mut(l, part)),
                _ => None,
            },
            ParamKey::Adapter {
                block,
                weight,
                part,
            } => {
                let a = self.blocks.get_mut(block)?.adapters.get_mut(&weight)?;
                Some(match part {
                    LoraPart::A => &mut a.a,
                    LoraPart::B => &mut a.b,
                })
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_keys()
            .into_iter()
            .filter_map(|k| self.param(k).map(Tensor::len))
            .sum()
    }
}

fn pick(l: &super::Linear, p: LinPart) -> &Tensor {
    match p {
        LinPart::W => &l.w,
        LinPart::B => &l.b,
    }
}

fn pick_mut(l: &mut super::Linear, p: LinPart) -> &mut Tensor {
    match p {
        LinPart::W => &mut l.w,
        LinPart::B => &mut l.b,
    }
}
