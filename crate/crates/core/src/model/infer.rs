//! Eager single-example inference with a key/value cache.
//!
//! Replays the training graph's arithmetic step by step: same matmul
//! routine, same row-wise layer norm and softmax, same operation order.
//! Because decoder states at earlier positions never depend on later ones,
//! caching keys and values yields logits bitwise equal to a teacher-forced
//! pass; tests assert exact equality, not closeness.

use super::build::LN_EPS;
use super::TranslationModel;
use crate::error::{Error, Result};
use crate::graph::softmax_row;
use crate::tensor::{matmul, Scalar, Tensor};

fn ln_eps() -> f32 {
    <f32 as Scalar>::from_f64(LN_EPS)
}

fn add_row_in_place(x: &mut Tensor<f32>, row: &Tensor<f32>) {
    let (m, n) = x.dims2();
    for i in 0..m {
        let r = x.row_mut(i);
        for j in 0..n {
            r[j] = r[j] + row.data()[j];
        }
    }
}

fn linear(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut out = matmul(x, w, false, false)?;
    add_row_in_place(&mut out, b);
    Ok(out)
}

/// Mirror of the graph layer-norm: biased variance, epsilon inside the
/// square root, normalization via multiply by 1/n.
fn layer_norm_rows(x: &Tensor<f32>, gain: &Tensor<f32>, bias: &Tensor<f32>) -> Tensor<f32> {
    let (m, n) = x.dims2();
    let inv_n = 1.0f32 / <f32 as Scalar>::from_f64(n as f64);
    let eps = ln_eps();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..m {
        let row = x.row(i);
        let mut mean = 0.0f32;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = 0.0f32;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = 1.0f32 / (var + eps).sqrt();
        let o = out.row_mut(i);
        for j in 0..n {
            o[j] = (row[j] - mean) * inv_std * gain.data()[j] + bias.data()[j];
        }
    }
    out
}

fn slice_cols(x: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let (m, _) = x.dims2();
    let mut data = Vec::with_capacity(m * len);
    for r in 0..m {
        data.extend_from_slice(&x.row(r)[start..start + len]);
    }
    Tensor::new(vec![m, len], data).expect("slice shape")
}

fn concat_cols(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let m = parts[0].dims2().0;
    let total: usize = parts.iter().map(|p| p.dims2().1).sum();
    let mut data = Vec::with_capacity(m * total);
    for r in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![m, total], data).expect("concat shape")
}

/// Multi-head attention given already-projected q/k/v matrices; returns the
/// concatenated head outputs (before the output projection).
fn multi_head(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    heads: usize,
    dh: usize,
) -> Result<Tensor<f32>> {
    let scale = <f32 as Scalar>::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let qh = slice_cols(q, hi * dh, dh);
        let kh = slice_cols(k, hi * dh, dh);
        let vh = slice_cols(v, hi * dh, dh);
        let scores = matmul(&qh, &kh, false, true)?.map(|x| x * scale);
        let (m, n) = scores.dims2();
        let mut attn = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            softmax_row(scores.row(i), &mut attn.row_mut(i)[..n]);
        }
        outs.push(matmul(&attn, &vh, false, false)?);
    }
    Ok(concat_cols(&outs))
}

#[derive(Clone)]
struct LayerCache {
    self_k: Vec<f32>,
    self_v: Vec<f32>,
    cross_k: Tensor<f32>,
    cross_v: Tensor<f32>,
}

#[derive(Clone)]
pub struct IncrementalDecoder<'m> {
    model: &'m TranslationModel,
    enc_out: Tensor<f32>,
    layers: Vec<LayerCache>,
    len: usize,
}

impl<'m> IncrementalDecoder<'m> {
    /// Run the encoder over an unpadded source and prepare per-layer
    /// cross-attention keys and values.
    pub fn new(model: &'m TranslationModel, src_tokens: &[u32]) -> Result<Self> {
        if src_tokens.is_empty() {
            return Err(Error::InvalidArgument("empty source sequence".into()));
        }
        if src_tokens.len() > model.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "source of {} tokens exceeds max positions {}",
                src_tokens.len(),
                model.config.max_positions
            )));
        }
        let enc_out = encode_source(model, src_tokens)?;
        let mut layers = Vec::with_capacity(model.config.layers_dec);
        for l in 0..model.config.layers_dec {
            let prefix = format!("dec.{l}.cross");
            let cross_k = linear(
                &enc_out,
                model.param(&format!("{prefix}.wk")),
                model.param(&format!("{prefix}.bk")),
            )?;
            let cross_v = linear(
                &enc_out,
                model.param(&format!("{prefix}.wv")),
                model.param(&format!("{prefix}.bv")),
            )?;
            layers.push(LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k,
                cross_v,
            });
        }
        Ok(IncrementalDecoder {
            model,
            enc_out,
            layers,
            len: 0,
        })
    }

    /// Number of decoder tokens consumed so far.
    pub fn position(&self) -> usize {
        self.len
    }

    pub fn encoder_output(&self) -> &Tensor<f32> {
        &self.enc_out
    }

    /// Feed one decoder input token and return the next-token logits row.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let model = self.model;
        let cfg = &model.config;
        if token as usize >= model.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "decoder token {token} out of range for vocabulary of {}",
                model.vocab_size
            )));
        }
        if self.len >= cfg.max_positions {
            return Err(Error::InvalidArgument(format!(
                "decoder exceeded max positions {}",
                cfg.max_positions
            )));
        }
        let t = self.len;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = <f32 as Scalar>::from_f64(model.embed_scale());

        let embed = model.param("embed");
        let mut x = Tensor::new(vec![1, d], embed.row(token as usize).to_vec())?
            .map(|v| v * scale);
        let pos = model.position_slice(t, 1)?;
        add_row_in_place(&mut x, &pos);

        for l in 0..cfg.layers_dec {
            // Self-attention against all cached positions plus this one.
            let h = layer_norm_rows(
                &x,
                model.param(&format!("dec.{l}.ln1.gain")),
                model.param(&format!("dec.{l}.ln1.bias")),
            );
            let prefix = format!("dec.{l}.self");
            let q = linear(&h, model.param(&format!("{prefix}.wq")), model.param(&format!("{prefix}.bq")))?;
            let k = linear(&h, model.param(&format!("{prefix}.wk")), model.param(&format!("{prefix}.bk")))?;
            let v = linear(&h, model.param(&format!("{prefix}.wv")), model.param(&format!("{prefix}.bv")))?;
            let cache = &mut self.layers[l];
            cache.self_k.extend_from_slice(k.data());
            cache.self_v.extend_from_slice(v.data());
            let k_all = Tensor::new(vec![t + 1, d], cache.self_k.clone())?;
            let v_all = Tensor::new(vec![t + 1, d], cache.self_v.clone())?;
            let ctx = multi_head(&q, &k_all, &v_all, cfg.heads, dh)?;
            let out = linear(
                &ctx,
                model.param(&format!("{prefix}.wo")),
                model.param(&format!("{prefix}.bo")),
            )?;
            x = add(&x, &out);

            // Cross-attention against the precomputed encoder projections.
            let h = layer_norm_rows(
                &x,
                model.param(&format!("dec.{l}.ln2.gain")),
                model.param(&format!("dec.{l}.ln2.bias")),
            );
            let prefix = format!("dec.{l}.cross");
            let q = linear(&h, model.param(&format!("{prefix}.wq")), model.param(&format!("{prefix}.bq")))?;
            let cache = &self.layers[l];
            let ctx = multi_head(&q, &cache.cross_k, &cache.cross_v, cfg.heads, dh)?;
            let out = linear(
                &ctx,
                model.param(&format!("{prefix}.wo")),
                model.param(&format!("{prefix}.bo")),
            )?;
            x = add(&x, &out);

            let h = layer_norm_rows(
                &x,
                model.param(&format!("dec.{l}.ln3.gain")),
                model.param(&format!("dec.{l}.ln3.bias")),
            );
            let f = ff(model, &h, &format!("dec.{l}.ff"))?;
            x = add(&x, &f);
        }

        let h = layer_norm_rows(&x, model.param("dec.ln.gain"), model.param("dec.ln.bias"));
        let logits = matmul(&h, embed, false, true)?;
        self.len += 1;
        Ok(logits.data().to_vec())
    }
}

fn add(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("add shape")
}

fn ff(model: &TranslationModel, h: &Tensor<f32>, prefix: &str) -> Result<Tensor<f32>> {
    let f1 = linear(h, model.param(&format!("{prefix}.w1")), model.param(&format!("{prefix}.b1")))?
        .map(|v| v.max(0.0));
    linear(&f1, model.param(&format!("{prefix}.w2")), model.param(&format!("{prefix}.b2")))
}

/// Eager mirror of the training-graph encoder for an unpadded source.
fn encode_source(model: &TranslationModel, src_tokens: &[u32]) -> Result<Tensor<f32>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    if let Some(&bad) = src_tokens.iter().find(|&&t| t as usize >= model.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "source token {bad} out of range for vocabulary of {}",
            model.vocab_size
        )));
    }
    let embed = model.param("embed");
    let scale = <f32 as Scalar>::from_f64(model.embed_scale());
    let mut data = Vec::with_capacity(src_tokens.len() * d);
    for &tok in src_tokens {
        data.extend_from_slice(embed.row(tok as usize));
    }
    let mut x = Tensor::new(vec![src_tokens.len(), d], data)?.map(|v| v * scale);
    let pos = model.position_slice(0, src_tokens.len())?;
    for i in 0..src_tokens.len() {
        let r = x.row_mut(i);
        for j in 0..d {
            r[j] = r[j] + pos.row(i)[j];
        }
    }
    for l in 0..cfg.layers_enc {
        let h = layer_norm_rows(
            &x,
            model.param(&format!("enc.{l}.ln1.gain")),
            model.param(&format!("enc.{l}.ln1.bias")),
        );
        let prefix = format!("enc.{l}.attn");
        let q = linear(&h, model.param(&format!("{prefix}.wq")), model.param(&format!("{prefix}.bq")))?;
        let k = linear(&h, model.param(&format!("{prefix}.wk")), model.param(&format!("{prefix}.bk")))?;
        let v = linear(&h, model.param(&format!("{prefix}.wv")), model.param(&format!("{prefix}.bv")))?;
        let ctx = multi_head(&q, &k, &v, cfg.heads, dh)?;
        let out = linear(
            &ctx,
            model.param(&format!("{prefix}.wo")),
            model.param(&format!("{prefix}.bo")),
        )?;
        x = add(&x, &out);
        let h = layer_norm_rows(
            &x,
            model.param(&format!("enc.{l}.ln2.gain")),
            model.param(&format!("enc.{l}.ln2.bias")),
        );
        let f = ff(model, &h, &format!("enc.{l}.ff"))?;
        x = add(&x, &f);
    }
    Ok(layer_norm_rows(
        &x,
        model.param("enc.ln.gain"),
        model.param("enc.ln.bias"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::BOS;
    use crate::corpus::Vocabulary;
    use crate::model::{forward_teacher_forced, ModelConfig};

    fn model_and_vocab(cfg: ModelConfig, seed: u64) -> (TranslationModel, Vocabulary) {
        let vocab = Vocabulary::new(
            ["qaa".to_string(), "qab".to_string()],
            (0..12).map(|i| format!("w{i}")),
            10,
        )
        .unwrap();
        let model = TranslationModel::init(cfg, &vocab, seed).unwrap();
        (model, vocab)
    }

    fn assert_incremental_matches(model: &TranslationModel, src: &[u32], tgt: &[u32]) {
        let reference = forward_teacher_forced(model, src, tgt).unwrap();
        let mut dec = IncrementalDecoder::new(model, src).unwrap();
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(tgt);
        for (i, &tok) in inputs.iter().enumerate() {
            let row = dec.step(tok).unwrap();
            assert_eq!(
                row,
                reference.row(i).to_vec(),
                "logits row {i} differs from teacher-forced pass"
            );
        }
        assert_eq!(dec.position(), tgt.len() + 1);
    }

    #[test]
    fn incremental_decoding_matches_teacher_forcing_bitwise() {
        let cfg = ModelConfig {
            layers_enc: 1,
            layers_dec: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            max_positions: 32,
            ..ModelConfig::default()
        };
        let (model, vocab) = model_and_vocab(cfg, 0);
        let src = vocab.tokenize("w0 w5 w11", "qaa").unwrap();
        let tgt: Vec<u32> = [0u32, 3, 9, 1].iter().map(|&u| vocab.unit_token(u)).collect();
        assert_incremental_matches(&model, &src, &tgt);
    }

    #[test]
    fn incremental_matches_on_a_deeper_multi_head_model() {
        let cfg = ModelConfig {
            layers_enc: 2,
            layers_dec: 2,
            d_model: 16,
            d_ff: 32,
            heads: 4,
            max_positions: 64,
            ..ModelConfig::default()
        };
        let (model, vocab) = model_and_vocab(cfg, 42);
        for (seed_tok, len) in [(0u32, 1usize), (4, 7), (2, 12)] {
            let src = vocab.tokenize("w3 w1 w4 w1 w5", "qab").unwrap();
            let tgt: Vec<u32> = (0..len)
                .map(|i| vocab.unit_token((seed_tok + i as u32) % 10))
                .collect();
            assert_incremental_matches(&model, &src, &tgt);
        }
    }

    #[test]
    fn rejects_bad_tokens_and_overflow() {
        let cfg = ModelConfig {
            layers_enc: 1,
            layers_dec: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            max_positions: 4,
            ..ModelConfig::default()
        };
        let (model, vocab) = model_and_vocab(cfg, 1);
        assert!(IncrementalDecoder::new(&model, &[]).is_err());
        assert!(IncrementalDecoder::new(&model, &[vocab.size() as u32]).is_err());
        let src = vec![vocab.unit_token(0); 5];
        assert!(IncrementalDecoder::new(&model, &src).is_err(), "source too long");

        let src = vocab.tokenize("w0", "qaa").unwrap();
        let mut dec = IncrementalDecoder::new(&model, &src).unwrap();
        assert!(dec.step(vocab.size() as u32).is_err());
        for _ in 0..4 {
            dec.step(BOS).unwrap();
        }
        assert!(dec.step(BOS).is_err(), "position budget exhausted");
    }

    #[test]
    fn encoder_output_is_finite_with_unit_scale_rows() {
        let cfg = ModelConfig {
            layers_enc: 2,
            layers_dec: 1,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            max_positions: 32,
            ..ModelConfig::default()
        };
        let (model, vocab) = model_and_vocab(cfg, 9);
        let src = vocab.tokenize("w2 w9", "qaa").unwrap();
        let dec = IncrementalDecoder::new(&model, &src).unwrap();
        let enc = dec.encoder_output();
        assert_eq!(enc.shape(), &[src.len(), 16]);
        assert!(enc.all_finite());
        // Final layer norm: every row has near-zero mean under the gain=1,
        // bias=0 initialization.
        for i in 0..src.len() {
            let mean: f32 = enc.row(i).iter().sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5, "row {i} mean {mean}");
        }
    }
}
