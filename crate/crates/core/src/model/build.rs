//! Differentiable graph construction for teacher-forced training.
//!
//! One graph per example: parameters enter as leaf nodes, so gradients for a
//! batch are the position-wise sum of per-example gradients and examples can
//! be processed independently. Padding is a suffix; positions at or past the
//! real length are excluded from the loss and masked out of attention, which
//! makes logits at real positions independent of pad content.

use super::TranslationModel;
use crate::corpus::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::seed::{counter_uniform, dropout_site};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

pub const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

/// Where a training step's dropout masks come from. Masks are a pure
/// function of (seed, step, example_key, site label), so a step can be
/// replayed exactly and examples stay decorrelated however they are batched.
#[derive(Debug, Clone)]
pub struct DropoutPlan {
    pub seed: u64,
    pub step: u64,
    pub example_key: String,
}

pub struct ExampleGraph<S: Scalar> {
    pub graph: Graph<S>,
    /// Smoothed cross entropy summed over non-pad target positions.
    pub loss_sum: NodeId,
    pub non_pad: usize,
    /// [tgt_padded_len + 1, vocab] rows of next-token logits.
    pub logits: NodeId,
    /// Decoder input embedding rows, before position addition. Kept visible
    /// so tests can read gradients flowing into individual target positions.
    pub dec_embed: NodeId,
}

struct Builder<'m, S: Scalar> {
    g: Graph<S>,
    model: &'m TranslationModel,
    param_ids: BTreeMap<String, NodeId>,
    dropout: Option<DropoutPlan>,
}

impl<'m, S: Scalar> Builder<'m, S> {
    fn new(model: &'m TranslationModel, dropout: Option<&DropoutPlan>) -> Self {
        Builder {
            g: Graph::new(),
            model,
            param_ids: BTreeMap::new(),
            dropout: dropout.cloned(),
        }
    }

    fn p(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = self.g.param(name, self.model.param(name).cast::<S>());
        self.param_ids.insert(name.to_string(), id);
        id
    }

    /// x @ w + b with w, b looked up by name.
    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.p(w);
        let b = self.p(b);
        let xw = self.g.matmul(x, w)?;
        self.g.add_row(xw, b)
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = self.p(&format!("{prefix}.gain"));
        let bias = self.p(&format!("{prefix}.bias"));
        self.g.layer_norm(x, gain, bias, S::from_f64(LN_EPS))
    }

    /// Inverted dropout as multiplication by a precomputed 0 / (1-rate)^-1
    /// mask. Identity when no plan is active or the rate is zero.
    fn dropout(&mut self, x: NodeId, label: &str, rate: f64, rows: usize, cols: usize) -> Result<NodeId> {
        let Some(plan) = self.dropout.clone() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let site = dropout_site(&format!("{}|{label}", plan.example_key), 0);
        let keep_scale = 1.0 / (1.0 - rate);
        let data: Vec<S> = (0..rows * cols)
            .map(|i| {
                if counter_uniform(plan.seed, plan.step, site, i as u64) < rate {
                    S::zero()
                } else {
                    S::from_f64(keep_scale)
                }
            })
            .collect();
        let mask = self.g.constant(Tensor::new(vec![rows, cols], data)?);
        self.g.mul(x, mask)
    }

    /// Multi-head attention over already-normalized inputs. `key_mask_row`
    /// is an additive [1, t_k] row applied to every query's scores;
    /// `causal` is an additive [t_q, t_k] matrix.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        prefix: &str,
        t_q: usize,
        t_k: usize,
        key_mask_row: Option<NodeId>,
        causal: Option<NodeId>,
    ) -> Result<NodeId> {
        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let q = self.linear(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(cfg.heads);
        for hi in 0..cfg.heads {
            let qh = self.g.slice_cols(q, hi * dh, dh)?;
            let kh = self.g.slice_cols(k, hi * dh, dh)?;
            let vh = self.g.slice_cols(v, hi * dh, dh)?;
            let mut scores = self.g.matmul_nt(qh, kh)?;
            scores = self.g.scale(scores, scale);
            if let Some(m) = key_mask_row {
                scores = self.g.add_row(scores, m)?;
            }
            if let Some(c) = causal {
                scores = self.g.add(scores, c)?;
            }
            let mut attn = self.g.softmax(scores);
            attn = self.dropout(
                attn,
                &format!("{prefix}.h{hi}.attn"),
                cfg.attention_dropout,
                t_q,
                t_k,
            )?;
            heads.push(self.g.matmul(attn, vh)?);
        }
        let ctx = self.g.concat_cols(&heads)?;
        self.linear(ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// Shared embed-scale-position-dropout stem for both stacks.
    fn embed_stem(&mut self, ids: &[usize], label: &str) -> Result<(NodeId, NodeId)> {
        let cfg = &self.model.config;
        let table = self.p("embed");
        let emb = self.g.embedding(table, ids)?;
        let scaled = self.g.scale(emb, S::from_f64(self.model.embed_scale()));
        let pos = self
            .g
            .constant(self.model.position_slice(0, ids.len())?.cast::<S>());
        let x = self.g.add(scaled, pos)?;
        let x = self.dropout(x, label, cfg.dropout, ids.len(), cfg.d_model)?;
        Ok((emb, x))
    }

    fn ff_block(&mut self, x: NodeId, prefix: &str, label: &str, t: usize) -> Result<NodeId> {
        let cfg = &self.model.config;
        let f1 = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let f1 = self.g.relu(f1);
        let f2 = self.linear(f1, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
        self.dropout(f2, label, cfg.dropout, t, cfg.d_model)
    }

    fn encoder(&mut self, src_ids: &[usize], key_mask_row: Option<NodeId>) -> Result<NodeId> {
        let cfg = self.model.config.clone();
        let s = src_ids.len();
        let (_, mut x) = self.embed_stem(src_ids, "enc.embed")?;
        for l in 0..cfg.layers_enc {
            let h = self.norm(x, &format!("enc.{l}.ln1"))?;
            let a = self.attention(h, h, &format!("enc.{l}.attn"), s, s, key_mask_row, None)?;
            let a = self.dropout(a, &format!("enc.{l}.attn.out"), cfg.dropout, s, cfg.d_model)?;
            x = self.g.add(x, a)?;
            let h = self.norm(x, &format!("enc.{l}.ln2"))?;
            let f = self.ff_block(h, &format!("enc.{l}.ff"), &format!("enc.{l}.ff.out"), s)?;
            x = self.g.add(x, f)?;
        }
        self.norm(x, "enc.ln")
    }

    fn decoder(
        &mut self,
        dec_ids: &[usize],
        enc_out: NodeId,
        s: usize,
        src_mask_row: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let cfg = self.model.config.clone();
        let t = dec_ids.len();
        let (dec_embed, mut x) = self.embed_stem(dec_ids, "dec.embed")?;
        let causal = {
            let mut m = Tensor::zeros(vec![t, t]);
            for i in 0..t {
                let row = m.row_mut(i);
                for item in row.iter_mut().take(t).skip(i + 1) {
                    *item = S::from_f64(MASK_NEG);
                }
            }
            self.g.constant(m)
        };
        for l in 0..cfg.layers_dec {
            let h = self.norm(x, &format!("dec.{l}.ln1"))?;
            let a = self.attention(h, h, &format!("dec.{l}.self"), t, t, None, Some(causal))?;
            let a = self.dropout(a, &format!("dec.{l}.self.out"), cfg.dropout, t, cfg.d_model)?;
            x = self.g.add(x, a)?;
            let h = self.norm(x, &format!("dec.{l}.ln2"))?;
            let a = self.attention(h, enc_out, &format!("dec.{l}.cross"), t, s, src_mask_row, None)?;
            let a = self.dropout(a, &format!("dec.{l}.cross.out"), cfg.dropout, t, cfg.d_model)?;
            x = self.g.add(x, a)?;
            let h = self.norm(x, &format!("dec.{l}.ln3"))?;
            let f = self.ff_block(h, &format!("dec.{l}.ff"), &format!("dec.{l}.ff.out"), t)?;
            x = self.g.add(x, f)?;
        }
        let h = self.norm(x, "dec.ln")?;
        let embed = self.p("embed");
        let logits = self.g.matmul_nt(h, embed)?;
        Ok((dec_embed, logits))
    }
}

fn to_ids(tokens: &[u32], vocab_size: usize, what: &str) -> Result<Vec<usize>> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "{what} token {bad} out of range for vocabulary of {vocab_size}"
        )));
    }
    Ok(tokens.iter().map(|&t| t as usize).collect())
}

fn check_lengths(real: usize, padded: usize, what: &str) -> Result<()> {
    if real == 0 || real > padded {
        return Err(Error::InvalidArgument(format!(
            "{what} length {real} invalid for a row of {padded} tokens"
        )));
    }
    Ok(())
}

/// Assemble the teacher-forced graph for one (possibly pad-suffixed)
/// example. `src_len` / `tgt_len` give the real token counts; everything
/// past them is padding whose content must not influence real positions.
pub fn build_example_graph<S: Scalar>(
    model: &TranslationModel,
    src_tokens: &[u32],
    src_len: usize,
    tgt_tokens: &[u32],
    tgt_len: usize,
    smoothing: f64,
    dropout: Option<&DropoutPlan>,
) -> Result<ExampleGraph<S>> {
    check_lengths(src_len, src_tokens.len(), "source")?;
    check_lengths(tgt_len, tgt_tokens.len(), "target")?;
    let max = model.config.max_positions;
    if src_tokens.len() > max || tgt_tokens.len() + 1 > max {
        return Err(Error::InvalidArgument(format!(
            "example of {} source / {} target tokens exceeds max positions {max}",
            src_tokens.len(),
            tgt_tokens.len() + 1
        )));
    }
    let src_ids = to_ids(src_tokens, model.vocab_size, "source")?;
    let tgt_ids = to_ids(tgt_tokens, model.vocab_size, "target")?;

    let mut b = Builder::new(model, dropout);
    let src_mask_row = if src_len < src_ids.len() {
        let mut row = Tensor::zeros(vec![1, src_ids.len()]);
        for i in src_len..src_ids.len() {
            row.row_mut(0)[i] = S::from_f64(MASK_NEG);
        }
        Some(b.g.constant(row))
    } else {
        None
    };
    let enc_out = b.encoder(&src_ids, src_mask_row)?;

    let mut dec_ids = Vec::with_capacity(tgt_ids.len() + 1);
    dec_ids.push(BOS as usize);
    dec_ids.extend_from_slice(&tgt_ids);
    let (dec_embed, logits) = b.decoder(&dec_ids, enc_out, src_ids.len(), src_mask_row)?;

    // Row i predicts target position i; the row after the last real token
    // predicts end-of-sequence, and pad rows are excluded from the loss.
    let mut ce_targets: Vec<usize> = Vec::with_capacity(dec_ids.len());
    ce_targets.extend(tgt_ids[..tgt_len].iter().copied());
    ce_targets.push(EOS as usize);
    ce_targets.resize(dec_ids.len(), PAD as usize);
    let (loss_sum, non_pad) =
        b.g.ce_sum(logits, &ce_targets, S::from_f64(smoothing), Some(PAD as usize))?;

    Ok(ExampleGraph {
        graph: b.g,
        loss_sum,
        non_pad,
        logits,
        dec_embed,
    })
}

/// Run the full encoder-decoder once with teacher forcing and no dropout,
/// returning the [tgt_len + 1, vocab] logits. Reference path for decoding
/// and for equivalence tests against the incremental decoder.
pub fn forward_teacher_forced(
    model: &TranslationModel,
    src_tokens: &[u32],
    tgt_tokens: &[u32],
) -> Result<Tensor<f32>> {
    let mut eg = build_example_graph::<f32>(
        model,
        src_tokens,
        src_tokens.len(),
        tgt_tokens,
        tgt_tokens.len(),
        0.0,
        None,
    )?;
    eg.graph.forward(&BTreeMap::new())?;
    Ok(eg.graph.value(eg.logits)?.clone())
}
