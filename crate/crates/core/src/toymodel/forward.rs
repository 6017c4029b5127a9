use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use numkit::{Eager, Graph, Tensor};
use serde::{Deserialize, Serialize};

use super::params::{DenseParam, LinPart, LoraPart, ParamKey};
use super::{Block, BlockKind, Branch, ToyModel, WeightName, LN_EPS};
use crate::data::Batch;
use crate::error::{Error, Result};

/// Hands parameters to a graph, marking those in the trainable set and
/// remembering which graph value each trainable key became.
pub struct Binder<'a, V> {
    trainable: Option<&'a BTreeSet<ParamKey>>,
    bound: Vec<(ParamKey, V)>,
}

impl<'a, V: Clone> Binder<'a, V> {
    pub fn frozen() -> Self {
        Self {
            trainable: None,
            bound: Vec::new(),
        }
    }

    pub fn training(trainable: &'a BTreeSet<ParamKey>) -> Self {
        Self {
            trainable: Some(trainable),
            bound: Vec::new(),
        }
    }

    pub fn bind<G: Graph<V = V>>(&mut self, g: &mut G, key: ParamKey, t: &Tensor) -> V {
        let trainable = self.trainable.is_some_and(|s| s.contains(&key));
        let v = g.param(t, trainable);
        if trainable {
            self.bound.push((key, v.clone()));
        }
        v
    }

    pub fn into_bound(self) -> Vec<(ParamKey, V)> {
        self.bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TapMode {
    /// Residual-branch input X and output f(X) of one block.
    ResidualBranch,
    /// Input at the entry of `lo` and output at the exit of `hi`.
    Span { lo: usize, hi: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TapRequest {
    pub blocks: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
}

impl TapRequest {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn blocks(blocks: impl IntoIterator<Item = usize>) -> Self {
        Self {
            blocks: blocks.into_iter().collect(),
            spans: Vec::new(),
        }
    }

    pub fn span(lo: usize, hi: usize) -> Self {
        Self {
            blocks: Vec::new(),
            spans: vec![(lo, hi)],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if let Some(&i) = self.blocks.iter().find(|&&i| i >= n) {
            return Err(Error::State(format!(
                "tap on block {i} out of range (N = {n})"
            )));
        }
        if let Some(&(lo, hi)) = self.spans.iter().find(|&&(lo, hi)| lo > hi || hi >= n) {
            return Err(Error::State(format!(
                "tap span {lo}..={hi} invalid for N = {n}"
            )));
        }
        Ok(())
    }
}

/// Captured activations, each `(batch, n_tokens, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap {
    pub block: usize,
    pub mode: TapMode,
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub taps: Vec<ActivationTap>,
}

impl ForwardOutput {
    pub fn tap(&self, block: usize, mode: TapMode) -> Option<&ActivationTap> {
        self.taps
            .iter()
            .find(|t| t.block == block && t.mode == mode)
    }
}

fn dense_key(block: usize, param: DenseParam) -> ParamKey {
    ParamKey::Dense { block, param }
}

fn effective_weight<G: Graph>(
    g: &mut G,
    binder: &mut Binder<'_, G::V>,
    blk: &Block,
    name: WeightName,
    w: &Tensor,
) -> Result<G::V> {
    let block = blk.index;
    let wv = binder.bind(g, dense_key(block, DenseParam::Weight(name)), w);
    let Some(ad) = blk.adapters.get(&name) else {
        return Ok(wv);
    };
    let key = |part| ParamKey::Adapter {
        block,
        weight: name,
        part,
    };
    let a = binder.bind(g, key(LoraPart::A), &ad.a);
    let b = binder.bind(g, key(LoraPart::B), &ad.b);
    let ba = g.matmul(&b, &a)?;
    let ba = g.scale(&ba, ad.scaling())?;
    Ok(g.add(&wv, &ba)?)
}

impl ToyModel {
    /// Merges every adapter into its host weight with the same arithmetic
    /// the forward pass uses, so outputs are unchanged bit for bit. The
    /// result has no adapters left; used for inference timing.
    pub fn fold_adapters(&mut self) -> Result<()> {
        for blk in &mut self.blocks {
            let names: Vec<WeightName> = blk.adapters.keys().copied().collect();
            for name in names {
                let idx = blk.index;
                let missing = || Error::State(format!("block {idx} has no {name:?} to fold into"));
                let w = blk
                    .dense()
                    .and_then(|d| d.weight(name))
                    .ok_or_else(missing)?;
                let folded = effective_weight(&mut Eager, &mut Binder::frozen(), blk, name, w)?;
                *blk.dense_mut()
                    .and_then(|d| d.weight_mut(name))
                    .ok_or_else(missing)? = folded;
                blk.adapters.remove(&name);
            }
        }
        Ok(())
    }

    fn check_batch(&self, tokens: &Tensor, cond: &Tensor) -> Result<usize> {
        let (t, d) = (self.config.n_tokens, self.config.d_model);
        let s = tokens.shape();
        if s.len() != 3 || s[1] != t || s[2] != d {
            return Err(Error::State(format!(
                "tokens must be (batch, {t}, {d}), got {s:?}"
            )));
        }
        if cond.shape() != [s[0], d] {
            return Err(Error::State(format!(
                "condition must be ({}, {d}), got {:?}",
                s[0],
                cond.shape()
            )));
        }
        Ok(s[0])
    }

    /// One block on the graph. Returns the block output and, for blocks that
    /// still have a residual branch, the branch output f(X).
    pub fn block_graph<G: Graph>(
        &self,
        g: &mut G,
        binder: &mut Binder<'_, G::V>,
        i: usize,
        x: &G::V,
        cemb: &G::V,
        groups: usize,
    ) -> Result<(G::V, Option<G::V>)> {
        let blk = self.block(i)?;
        let f = match &blk.branch {
            Branch::Bypassed => return Ok((x.clone(), None)),
            Branch::Linear(l) => {
                let w = binder.bind(
                    g,
                    ParamKey::Surrogate {
                        block: i,
                        part: LinPart::W,
                    },
                    &l.w,
                );
                let b = binder.bind(
                    g,
                    ParamKey::Surrogate {
                        block: i,
                        part: LinPart::B,
                    },
                    &l.b,
                );
                g.linear(x, &w, Some(&b))?
            }
            Branch::Dense(d) => {
                let gamma = binder.bind(g, dense_key(i, DenseParam::LnGamma), &d.ln_gamma);
                let beta = binder.bind(g, dense_key(i, DenseParam::LnBeta), &d.ln_beta);
                let m = binder.bind(g, dense_key(i, DenseParam::Modulation), &d.modulation);
                let h = g.layernorm(x, &gamma, &beta, LN_EPS)?;
                let shift = g.mul_row(cemb, &m)?;
                let h = g.add_grouped(&h, &shift)?;

                let w1 = effective_weight(g, binder, blk, WeightName::W1, &d.w1)?;
                let b1 = binder.bind(g, dense_key(i, DenseParam::B1), &d.b1);
                let w2 = effective_weight(g, binder, blk, WeightName::W2, &d.w2)?;
                let b2 = binder.bind(g, dense_key(i, DenseParam::B2), &d.b2);
                let u = g.linear(&h, &w1, Some(&b1))?;
                let u = g.gelu_tanh(&u)?;
                let mlp = g.linear(&u, &w2, Some(&b2))?;

                match (&d.attn, blk.kind) {
                    (Some(a), BlockKind::Double) => {
                        let wq = effective_weight(g, binder, blk, WeightName::Wq, &a.wq)?;
                        let wk = effective_weight(g, binder, blk, WeightName::Wk, &a.wk)?;
                        let wv = effective_weight(g, binder, blk, WeightName::Wv, &a.wv)?;
                        let wo = effective_weight(g, binder, blk, WeightName::Wo, &a.wo)?;
                        let q = g.linear(&h, &wq, None)?;
                        let k = g.linear(&h, &wk, None)?;
                        let v = g.linear(&h, &wv, None)?;
                        let att = g.attention(&q, &k, &v, groups)?;
                        let att = g.linear(&att, &wo, None)?;
                        g.add(&att, &mlp)?
                    }
                    (None, BlockKind::Single) => mlp,
                    _ => {
                        return Err(Error::State(format!(
                            "block {i}: attention parameters do not match block kind"
                        )))
                    }
                }
            }
        };
        let out = g.add(x, &f)?;
        Ok((out, Some(f)))
    }

    /// Blocks `lo..=hi` on the graph, starting from the residual stream `x`.
    pub fn span_graph<G: Graph>(
        &self,
        g: &mut G,
        binder: &mut Binder<'_, G::V>,
        span: RangeInclusive<usize>,
        x: G::V,
        cemb: &G::V,
        groups: usize,
    ) -> Result<G::V> {
        let mut x = x;
        for i in span {
            x = self.block_graph(g, binder, i, &x, cemb, groups)?.0;
        }
        Ok(x)
    }

    /// Token and condition embeddings: `(rows × d, batch × d)`.
    pub fn embed_graph<G: Graph>(
        &self,
        g: &mut G,
        binder: &mut Binder<'_, G::V>,
        tokens: &Tensor,
        cond: &Tensor,
    ) -> Result<(G::V, G::V)> {
        let b = self.check_batch(tokens, cond)?;
        let rows = tokens
            .clone()
            .reshape(vec![b * self.config.n_tokens, self.config.d_model])?;
        let x = g.input(rows);
        let c = g.input(cond.clone());
        let ew = binder.bind(g, ParamKey::Embed(LinPart::W), &self.embed.w);
        let eb = binder.bind(g, ParamKey::Embed(LinPart::B), &self.embed.b);
        let cw = binder.bind(g, ParamKey::CondEmbed(LinPart::W), &self.cond_embed.w);
        let cb = binder.bind(g, ParamKey::CondEmbed(LinPart::B), &self.cond_embed.b);
        let x = g.linear(&x, &ew, Some(&eb))?;
        let c = g.linear(&c, &cw, Some(&cb))?;
        Ok((x, c))
    }

    pub fn head_graph<G: Graph>(
        &self,
        g: &mut G,
        binder: &mut Binder<'_, G::V>,
        x: &G::V,
    ) -> Result<G::V> {
        let hw = binder.bind(g, ParamKey::Head(LinPart::W), &self.head.w);
        let hb = binder.bind(g, ParamKey::Head(LinPart::B), &self.head.b);
        Ok(g.linear(x, &hw, Some(&hb))?)
    }

    /// Whole model on the graph; returns `(batch·n_tokens) × d_model`.
    pub fn forward_graph<G: Graph>(
        &self,
        g: &mut G,
        binder: &mut Binder<'_, G::V>,
        tokens: &Tensor,
        cond: &Tensor,
    ) -> Result<G::V> {
        let b = tokens.shape().first().copied().unwrap_or(0);
        let (x, c) = self.embed_graph(g, binder, tokens, cond)?;
        let n = self.n_blocks();
        let x = if n == 0 {
            x
        } else {
            self.span_graph(g, binder, 0..=n - 1, x, &c, b)?
        };
        self.head_graph(g, binder, &x)
    }

    fn to_batch_shape(&self, rows: Tensor) -> Result<Tensor> {
        let (t, d) = (self.config.n_tokens, self.config.d_model);
        let b = rows.shape()[0] / t;
        Ok(rows.reshape(vec![b, t, d])?)
    }

    /// Eager embeddings for a batch.
    pub fn embed(&self, tokens: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        self.embed_graph(&mut Eager, &mut Binder::frozen(), tokens, cond)
    }

    /// Eager run of blocks `lo..=hi` over a residual stream in rows layout.
    pub fn run_span(
        &self,
        span: RangeInclusive<usize>,
        x: Tensor,
        cemb: &Tensor,
    ) -> Result<Tensor> {
        if span.is_empty() {
            return Ok(x);
        }
        let groups = cemb.shape()[0];
        self.span_graph(&mut Eager, &mut Binder::frozen(), span, x, cemb, groups)
    }

    /// Eager head projection; returns `(batch, n_tokens, d_model)`.
    pub fn head_out(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.head_graph(&mut Eager, &mut Binder::frozen(), x)?;
        self.to_batch_shape(y)
    }

    pub fn forward(&self, batch: &Batch, taps: &TapRequest) -> Result<ForwardOutput> {
        self.forward_tokens(&batch.tokens, &batch.cond, taps)
    }

    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.forward(batch, &TapRequest::none())?.output)
    }

    pub fn forward_tokens(
        &self,
        tokens: &Tensor,
        cond: &Tensor,
        taps: &TapRequest,
    ) -> Result<ForwardOutput> {
        let n = self.n_blocks();
        taps.validate(n)?;
        let (mut x, c) = self.embed(tokens, cond)?;
        let groups = c.shape()[0];
        let mut captured = Vec::new();
        let mut span_inputs: Vec<(usize, usize, Tensor)> = Vec::new();
        for i in 0..n {
            for &(lo, hi) in taps.spans.iter().filter(|s| s.0 == i) {
                span_inputs.push((lo, hi, x.clone()));
            }
            let (out, f) =
                self.block_graph(&mut Eager, &mut Binder::frozen(), i, &x, &c, groups)?;
            if taps.blocks.contains(&i) {
                let f = f.unwrap_or_else(|| Tensor::zeros(x.shape()));
                captured.push(ActivationTap {
                    block: i,
                    mode: TapMode::ResidualBranch,
                    input: self.to_batch_shape(x.clone())?,
                    output: self.to_batch_shape(f)?,
                });
            }
            x = out;
            let mut k = 0;
            while k < span_inputs.len() {
                if span_inputs[k].1 == i {
                    let (lo, hi, inp) = span_inputs.swap_remove(k);
                    captured.push(ActivationTap {
                        block: lo,
                        mode: TapMode::Span { lo, hi },
                        input: self.to_batch_shape(inp)?,
                        output: self.to_batch_shape(x.clone())?,
                    });
                } else {
                    k += 1;
                }
            }
        }
        let output = self.head_out(&x)?;
        Ok(ForwardOutput {
            output,
            taps: captured,
        })
    }

    /// Residual stream entering each block plus the final stream, in rows
    /// layout: `N + 1` tensors. Also returns the condition embedding.
    pub fn block_inputs(&self, batch: &Batch) -> Result<(Vec<Tensor>, Tensor)> {
        let (mut x, c) = self.embed(&batch.tokens, &batch.cond)?;
        let mut states = Vec::with_capacity(self.n_blocks() + 1);
        for i in 0..self.n_blocks() {
            let next = self.run_span(i..=i, x.clone(), &c)?;
            states.push(x);
            x = next;
        }
        states.push(x);
        Ok((states, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Purpose, Task, TaskConfig};
    use crate::toymodel::{build_teacher, ModelConfig};

    fn setup() -> (ToyModel, Batch) {
        let cfg = ModelConfig {
            n_double: 2,
            n_single: 3,
            ..ModelConfig::default()
        };
        let m = build_teacher(&cfg).unwrap();
        let task = Task::new(TaskConfig::default(), cfg.n_tokens, cfg.d_model).unwrap();
        (m, task.draw(Purpose::Eval, 0, 0, 6))
    }

    #[test]
    fn output_shape_matches_input() {
        let (m, b) = setup();
        let y = m.predict(&b).unwrap();
        assert_eq!(y.shape(), b.tokens.shape());
    }

    #[test]
    fn folding_adapters_keeps_outputs_bit_identical() {
        use rand::SeedableRng;
        let (mut m, b) = setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (block, name) in [
            (0, WeightName::Wq),
            (0, WeightName::W2),
            (3, WeightName::W1),
        ] {
            let w = m.blocks[block].dense().unwrap().weight(name).unwrap();
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            let ad = super::super::LoraAdapter {
                block,
                weight: name,
                a: Tensor::randn(&[2, inp], 0.3, &mut rng),
                b: Tensor::randn(&[out, 2], 0.3, &mut rng),
                rank: 2,
                alpha: 4.0,
            };
            m.blocks[block].adapters.insert(name, ad);
        }
        let before = m.predict(&b).unwrap();
        let mut folded = m.clone();
        folded.fold_adapters().unwrap();
        assert_eq!(folded.adapters().count(), 0);
        assert!(folded.predict(&b).unwrap().bit_eq(&before));
        let plain = build_teacher(&m.config).unwrap().predict(&b).unwrap();
        assert!(!plain.bit_eq(&before), "adapters had no effect");
    }

    #[test]
    fn tap_captures_branch_output() {
        let (m, b) = setup();
        let out = m.forward(&b, &TapRequest::blocks([0, 3])).unwrap();
        let tap = out.tap(3, TapMode::ResidualBranch).unwrap();
        assert_eq!(tap.input.shape(), b.tokens.shape());
        // The next block's input must be input + f(X) in the same order.
        let next = m.forward(&b, &TapRequest::blocks([4])).unwrap();
        let next_in = &next.taps[0].input;
        let recomputed =
            numkit::ops::binary(numkit::BinaryKind::Add, &tap.input, &tap.output).unwrap();
        assert!(recomputed.bit_eq(next_in));
    }

    #[test]
    fn span_tap_matches_block_taps() {
        let (m, b) = setup();
        let out = m
            .forward(
                &b,
                &TapRequest {
                    blocks: vec![1, 4],
                    spans: vec![(1, 3)],
                },
            )
            .unwrap();
        let span = out.tap(1, TapMode::Span { lo: 1, hi: 3 }).unwrap();
        let b1 = out.tap(1, TapMode::ResidualBranch).unwrap();
        let b4 = out.tap(4, TapMode::ResidualBranch).unwrap();
        assert!(span.input.bit_eq(&b1.input));
        assert!(span.output.bit_eq(&b4.input));
    }

    #[test]
    fn out_of_range_tap_is_rejected() {
        let (m, b) = setup();
        assert!(m.forward(&b, &TapRequest::blocks([5])).is_err());
        assert!(m.forward(&b, &TapRequest::span(3, 2)).is_err());
    }

    #[test]
    fn malformed_batch_is_rejected() {
        let (m, _) = setup();
        let tokens = Tensor::zeros(&[2, 16, 31]);
        let cond = Tensor::zeros(&[2, 32]);
        assert!(m
            .forward_tokens(&tokens, &cond, &TapRequest::none())
            .is_err());
    }

    #[test]
    fn block_inputs_chain_to_output() {
        let (m, b) = setup();
        let (states, _) = m.block_inputs(&b).unwrap();
        assert_eq!(states.len(), 6);
        let y = m.head_out(&states[5]).unwrap();
        assert!(y.bit_eq(&m.predict(&b).unwrap()));
    }
}
