//! Transformer encoder-decoder over the joint text+unit vocabulary.
//!
//! Pre-layer-norm variant with sinusoidal positions and one embedding table
//! shared by the encoder input, decoder input, and output projection. Two
//! execution paths exist: `build` assembles a differentiable graph for
//! training, `infer` runs the same arithmetic eagerly with a key/value cache
//! for autoregressive decoding. They agree bitwise; tests hold them to that.

pub mod build;
pub mod checkpoint;
pub mod infer;

pub use build::{build_example_graph, forward_teacher_forced, DropoutPlan, ExampleGraph};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointPayload, OptimizerState};
pub use infer::IncrementalDecoder;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers_enc: 2,
            layers_dec: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            dropout: 0.3,
            attention_dropout: 0.1,
            max_positions: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers_enc == 0 || self.layers_dec == 0 || self.d_ff == 0 {
            return Err(Error::Config("layer and feed-forward sizes must be positive".into()));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Closed-form trainable parameter count for vocabulary size `v`.
    ///
    /// embedding: v*d. Encoder layer: two layer norms (4d), four attention
    /// projections with bias (4d^2+4d), feed-forward (2*d*ff + ff + d).
    /// Decoder layer adds a third norm and a second attention block. Two
    /// final norms close the stacks.
    pub fn param_count(&self, v: usize) -> usize {
        let d = self.d_model;
        let ff = self.d_ff;
        let attn = 4 * d * d + 4 * d;
        let norms = 2 * d;
        let ffn = 2 * d * ff + ff + d;
        let enc_layer = 2 * norms + attn + ffn;
        let dec_layer = 3 * norms + 2 * attn + ffn;
        v * d + self.layers_enc * enc_layer + self.layers_dec * dec_layer + 2 * norms
    }
}

#[derive(Debug, Clone)]
pub struct TranslationModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub vocab_hash: u64,
    params: BTreeMap<String, Tensor<f32>>,
    positions: Tensor<f32>,
}

/// Names of all parameter tensors for a config, in construction order.
fn param_shapes(config: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let mut out: Vec<(String, Vec<usize>)> = vec![("embed".into(), vec![vocab_size, d])];
    let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.gain"), vec![1, d]));
        out.push((format!("{prefix}.bias"), vec![1, d]));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for proj in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{proj}"), vec![d, d]));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            out.push((format!("{prefix}.{bias}"), vec![1, d]));
        }
    };
    for l in 0..config.layers_enc {
        norm(&mut out, &format!("enc.{l}.ln1"));
        attn(&mut out, &format!("enc.{l}.attn"));
        norm(&mut out, &format!("enc.{l}.ln2"));
        out.push((format!("enc.{l}.ff.w1"), vec![d, ff]));
        out.push((format!("enc.{l}.ff.b1"), vec![1, ff]));
        out.push((format!("enc.{l}.ff.w2"), vec![ff, d]));
        out.push((format!("enc.{l}.ff.b2"), vec![1, d]));
    }
    norm(&mut out, "enc.ln");
    for l in 0..config.layers_dec {
        norm(&mut out, &format!("dec.{l}.ln1"));
        attn(&mut out, &format!("dec.{l}.self"));
        norm(&mut out, &format!("dec.{l}.ln2"));
        attn(&mut out, &format!("dec.{l}.cross"));
        norm(&mut out, &format!("dec.{l}.ln3"));
        out.push((format!("dec.{l}.ff.w1"), vec![d, ff]));
        out.push((format!("dec.{l}.ff.b1"), vec![1, ff]));
        out.push((format!("dec.{l}.ff.w2"), vec![ff, d]));
        out.push((format!("dec.{l}.ff.b2"), vec![1, d]));
    }
    norm(&mut out, "dec.ln");
    out
}

fn sinusoidal_positions(max_positions: usize, d: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(vec![max_positions, d]);
    for t in 0..max_positions {
        let row = out.row_mut(t);
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = t as f64 * rate;
            row[2 * i] = angle.sin() as f32;
            row[2 * i + 1] = angle.cos() as f32;
        }
    }
    out
}

impl TranslationModel {
    /// Seeded initialization: weights and embeddings from N(0, 0.02^2),
    /// biases zero, layer-norm gains one. Each tensor draws from its own
    /// stream keyed by name, so parameter values are independent of
    /// construction order.
    pub fn init(config: ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab_size = vocab.size();
        let mut params = BTreeMap::new();
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        for (name, shape) in param_shapes(&config, vocab_size) {
            let n: usize = shape.iter().product();
            let last = name.rsplit('.').next().unwrap_or(&name);
            let tensor = if last == "gain" {
                Tensor::full(shape, 1.0f32)
            } else if last == "bias" || last.starts_with('b') {
                Tensor::zeros(shape)
            } else {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("init.{name}")));
                let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, tensor);
        }
        let positions = sinusoidal_positions(config.max_positions, config.d_model);
        Ok(TranslationModel {
            config,
            vocab_size,
            vocab_hash: vocab.hash(),
            params,
            positions,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        vocab_size: usize,
        vocab_hash: u64,
        params: BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        let expected: BTreeMap<String, Vec<usize>> = param_shapes(&config, vocab_size)
            .into_iter()
            .collect();
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, tensor) in &params {
            match expected.get(name) {
                Some(shape) if shape == &tensor.shape().to_vec() => {}
                Some(shape) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: shape {:?}, expected {shape:?}",
                        tensor.shape()
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!("unexpected parameter {name}")))
                }
            }
            if !tensor.all_finite() {
                return Err(Error::Checkpoint(format!("parameter {name} is not finite")));
            }
        }
        let positions = sinusoidal_positions(config.max_positions, config.d_model);
        Ok(TranslationModel {
            config,
            vocab_size,
            vocab_hash,
            params,
            positions,
        })
    }

    pub fn param(&self, name: &str) -> &Tensor<f32> {
        &self.params[name]
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()) .sum()
    }

    /// Sinusoidal position rows [offset, offset+len).
    pub fn position_slice(&self, offset: usize, len: usize) -> Result<Tensor<f32>> {
        if offset + len > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence of length {} exceeds max positions {}",
                offset + len,
                self.config.max_positions
            )));
        }
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(len * d);
        for t in offset..offset + len {
            data.extend_from_slice(self.positions.row(t));
        }
        Tensor::new(vec![len, d], data)
    }

    pub fn embed_scale(&self) -> f64 {
        (self.config.d_model as f64).sqrt()
    }
}
