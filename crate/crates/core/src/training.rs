//! Optimization: label-smoothed objective, polynomial schedule, Adam,
//! denoising pretraining, and the supervised text-to-unit loop.
//!
//! Gradients for a batch are accumulated example by example (each example
//! owns a small graph over shared parameter values) and scaled by the
//! reciprocal of the non-pad token count, so the update matches the mean
//! per-token loss regardless of how examples were grouped.

use crate::corpus::{batch_iterator, ParallelExample, Vocabulary, EOS, MASK};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::{build_example_graph, DropoutPlan, OptimizerState, TranslationModel};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub end_lr: f64,
    pub power: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub label_smoothing: f64,
    pub max_tokens: usize,
    pub seed: u64,
    /// Rescale gradients when their global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Dev evaluation cadence in steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    /// Stop as soon as a dev evaluation reaches this loss. Used by the
    /// initialization-transfer experiments to count steps-to-threshold.
    pub stop_at_dev_loss: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 3e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            end_lr: 0.0,
            power: 1.0,
            warmup_steps: 0,
            total_steps: 1000,
            label_smoothing: 0.2,
            max_tokens: 1024,
            seed: 0,
            clip_norm: Some(1.0),
            eval_every: 200,
            stop_at_dev_loss: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::Config(
                "need warmup_steps <= total_steps and total_steps > 0".into(),
            ));
        }
        if self.end_lr < 0.0 || self.power <= 0.0 {
            return Err(Error::Config("end_lr must be >= 0 and power > 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Mean label-smoothed cross entropy over non-pad positions, as a graph
/// node: the summed loss divided by the contributing row count.
pub fn label_smoothed_ce<S: Scalar>(
    graph: &mut crate::graph::Graph<S>,
    logits: NodeId,
    targets: &[usize],
    smoothing: f64,
    pad: Option<usize>,
) -> Result<(NodeId, usize)> {
    let (sum, non_pad) = graph.ce_sum(logits, targets, S::from_f64(smoothing), pad)?;
    let mean = graph.scale(sum, S::from_f64(1.0 / non_pad as f64));
    Ok((mean, non_pad))
}

/// Learning rate at `step`: linear warmup from zero, then polynomial
/// interpolation from `lr` down to `end_lr` at `total_steps`, clamped to
/// `end_lr` beyond that.
pub fn poly_lr(step: u64, cfg: &TrainingConfig) -> f64 {
    if step >= cfg.total_steps {
        return cfg.end_lr;
    }
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let f = (1.0 - progress).powf(cfg.power);
    cfg.lr * f + cfg.end_lr * (1.0 - f)
}

/// Euclidean norm over every gradient coordinate, accumulated in f64.
pub fn global_grad_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    sq.sqrt()
}

/// Rescale gradients in place when the global norm exceeds `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grads(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update. Every gradient is checked for
/// finiteness before any parameter is touched, so a poisoned step leaves
/// the model untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    cfg: &TrainingConfig,
    lr_t: f64,
) -> Result<()> {
    if lr_t < 0.0 || !lr_t.is_finite() {
        return Err(Error::InvalidArgument(format!("bad learning rate {lr_t}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: format!("adam_step {name}"),
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.adam_beta1 as f32;
    let b2 = cfg.adam_beta2 as f32;
    let eps = cfg.adam_eps as f32;
    let lr = lr_t as f32;
    let bc1 = 1.0 - (cfg.adam_beta1 as f32).powi(t);
    let bc2 = 1.0 - (cfg.adam_beta2 as f32).powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no moment state for {name}")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no moment state for {name}")))?;
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Fraction of noisable tokens to cover with mask spans.
    pub mask_rate: f64,
    /// Mean length of a mask span (geometric distribution).
    pub mean_span: f64,
    /// Fraction of noisable tokens to delete outright.
    pub delete_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mask_rate: 0.3,
            mean_span: 3.0,
            delete_rate: 0.1,
        }
    }
}

/// Corrupt a `[lang, tokens.., eos]` sequence for denoising pretraining.
/// The language tag and the final eos are never touched. Masked spans
/// collapse to a single mask token; deletions remove tokens outright. The
/// number of masked and deleted tokens is the rounded target count, not a
/// per-token coin flip. Returns (noised, original).
pub fn apply_noise(
    tokens: &[u32],
    cfg: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<u32>) {
    let original = tokens.to_vec();
    // Noisable region: everything except a leading tag and trailing eos.
    let lo = 1.min(tokens.len());
    let hi = if tokens.last() == Some(&EOS) {
        tokens.len() - 1
    } else {
        tokens.len()
    };
    let n = hi.saturating_sub(lo);
    if n == 0 {
        return (original.clone(), original);
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Fate {
        Keep,
        Mask,
        Delete,
    }
    let mut fate = vec![Fate::Keep; n];

    let mask_target = (cfg.mask_rate * n as f64).round() as usize;
    let mut masked = 0usize;
    let mut attempts = 0usize;
    while masked < mask_target && attempts < 100 * (n + 1) {
        attempts += 1;
        // Geometric span length with mean `mean_span`.
        let p = 1.0 / cfg.mean_span.max(1.0);
        let mut span = 1usize;
        while rng.gen::<f64>() > p && span < n {
            span += 1;
        }
        span = span.min(mask_target - masked);
        let start = rng.gen_range(0..n);
        for i in start..(start + span).min(n) {
            if fate[i] == Fate::Keep {
                fate[i] = Fate::Mask;
                masked += 1;
                if masked == mask_target {
                    break;
                }
            }
        }
    }

    let delete_target = (cfg.delete_rate * n as f64).round() as usize;
    let keep_positions: Vec<usize> = (0..n).filter(|&i| fate[i] == Fate::Keep).collect();
    let mut deleted = 0usize;
    let mut pool = keep_positions;
    while deleted < delete_target && !pool.is_empty() {
        let j = rng.gen_range(0..pool.len());
        fate[pool.swap_remove(j)] = Fate::Delete;
        deleted += 1;
    }

    let mut noised = Vec::with_capacity(tokens.len());
    noised.extend_from_slice(&tokens[..lo]);
    let mut in_mask_run = false;
    for (i, &f) in fate.iter().enumerate() {
        match f {
            Fate::Keep => {
                noised.push(tokens[lo + i]);
                in_mask_run = false;
            }
            Fate::Mask => {
                if !in_mask_run {
                    noised.push(MASK);
                    in_mask_run = true;
                }
            }
            Fate::Delete => {
                // A deletion between two mask runs keeps them separate
                // spans in the original, but the decoder cannot tell; do
                // not merge across it either way.
                in_mask_run = false;
            }
        }
    }
    noised.extend_from_slice(&tokens[hi..]);
    (noised, original)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub token_accuracy: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DevPoint {
    pub step: u64,
    pub loss: f64,
    pub token_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TranslationModel,
    pub optimizer: OptimizerState,
    pub metrics: Vec<StepMetrics>,
    pub dev_history: Vec<DevPoint>,
    pub steps_run: u64,
    pub stopped_early: bool,
}

/// A tokenized (source, target) pair ready for the model; targets carry
/// no bos/eos framing (the graph builder adds both).
#[derive(Debug, Clone)]
struct TokenPair {
    id: String,
    src: Vec<u32>,
    tgt: Vec<u32>,
}

struct BatchStats {
    grads: BTreeMap<String, Tensor<f32>>,
    loss_sum: f64,
    non_pad: usize,
    correct: usize,
}

fn accumulate(acc: &mut BTreeMap<String, Tensor<f32>>, part: BTreeMap<String, Tensor<f32>>) {
    for (name, g) in part {
        match acc.get_mut(&name) {
            None => {
                acc.insert(name, g);
            }
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }
}

/// Forward (and optionally backward) over a set of pairs. `dropout` is
/// (seed, step) for training mode, None for evaluation.
fn run_pairs(
    model: &TranslationModel,
    pairs: &[TokenPair],
    smoothing: f64,
    dropout: Option<(u64, u64)>,
    with_grads: bool,
) -> Result<BatchStats> {
    let mut stats = BatchStats {
        grads: BTreeMap::new(),
        loss_sum: 0.0,
        non_pad: 0,
        correct: 0,
    };
    for pair in pairs {
        let plan = dropout.map(|(seed, step)| DropoutPlan {
            seed,
            step,
            example_key: pair.id.clone(),
        });
        let mut eg = build_example_graph::<f32>(
            model,
            &pair.src,
            pair.src.len(),
            &pair.tgt,
            pair.tgt.len(),
            smoothing,
            plan.as_ref(),
        )
        .map_err(|e| Error::Example {
            example_id: pair.id.clone(),
            msg: e.to_string(),
        })?;
        eg.graph.forward(&BTreeMap::new())?;
        stats.loss_sum += eg.graph.value(eg.loss_sum)?.scalar_value() as f64;
        stats.non_pad += eg.non_pad;

        let logits = eg.graph.value(eg.logits)?;
        let targets: Vec<u32> = pair.tgt.iter().copied().chain(std::iter::once(EOS)).collect();
        for (row, &want) in targets.iter().enumerate() {
            let data = logits.row(row);
            let mut best = 0usize;
            for (j, &v) in data.iter().enumerate() {
                if v > data[best] {
                    best = j;
                }
            }
            if best == want as usize {
                stats.correct += 1;
            }
        }
        if with_grads {
            let grads = eg.graph.backward(eg.loss_sum)?;
            accumulate(&mut stats.grads, grads);
        }
    }
    Ok(stats)
}

/// Mean loss and token accuracy over a pair set, dropout off.
fn evaluate_pairs(
    model: &TranslationModel,
    pairs: &[TokenPair],
    smoothing: f64,
) -> Result<(f64, f64)> {
    let stats = run_pairs(model, pairs, smoothing, None, false)?;
    Ok((
        stats.loss_sum / stats.non_pad as f64,
        stats.correct as f64 / stats.non_pad as f64,
    ))
}

fn pairs_from_examples(
    examples: &[ParallelExample],
    vocab: &Vocabulary,
) -> Result<Vec<TokenPair>> {
    examples
        .iter()
        .map(|e| {
            Ok(TokenPair {
                id: e.example_id.clone(),
                src: vocab.tokenize(&e.source_text, &e.source_lang)?,
                tgt: vocab.unit_tokens(&e.target_units)?,
            })
        })
        .collect()
}

/// Shared driver: step through seeded batches of pairs, accumulate
/// gradients, clip, update, log, and periodically evaluate.
fn optimize(
    mut model: TranslationModel,
    batches: &mut dyn FnMut(u64) -> Result<Vec<Vec<TokenPair>>>,
    dev_pairs: &[TokenPair],
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = OptimizerState::zeros_like(&model);
    let mut metrics = Vec::new();
    let mut dev_history = Vec::new();
    let mut stopped_early = false;
    let mut step = 0u64;
    let mut epoch = 0u64;

    'outer: while step < cfg.total_steps {
        let epoch_batches = batches(epoch)?;
        if epoch_batches.is_empty() {
            return Err(Error::InvalidArgument("no training batches".into()));
        }
        epoch += 1;
        for pairs in epoch_batches {
            if step >= cfg.total_steps {
                break 'outer;
            }
            let started = Instant::now();
            let stats = run_pairs(
                &model,
                &pairs,
                cfg.label_smoothing,
                Some((cfg.seed, step)),
                true,
            )?;
            let loss = stats.loss_sum / stats.non_pad as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: step as usize });
            }
            let mut grads = stats.grads;
            let inv = (1.0 / stats.non_pad as f64) as f32;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let grad_norm = match cfg.clip_norm {
                Some(c) => clip_grads(&mut grads, c),
                None => global_grad_norm(&grads),
            };
            let lr_t = poly_lr(step, cfg);
            adam_step(model.params_mut(), &grads, &mut state, cfg, lr_t)?;
            step += 1;
            metrics.push(StepMetrics {
                step,
                loss,
                lr: lr_t,
                token_accuracy: stats.correct as f64 / stats.non_pad as f64,
                grad_norm,
                wall_ms: started.elapsed().as_millis() as u64,
            });

            let due_eval = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            if due_eval && !dev_pairs.is_empty() {
                let (dev_loss, dev_acc) = evaluate_pairs(&model, dev_pairs, cfg.label_smoothing)?;
                dev_history.push(DevPoint {
                    step,
                    loss: dev_loss,
                    token_accuracy: dev_acc,
                });
                if let Some(threshold) = cfg.stop_at_dev_loss {
                    if dev_loss <= threshold {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    Ok(TrainOutcome {
        model,
        optimizer: state,
        metrics,
        dev_history,
        steps_run: step,
        stopped_early,
    })
}

/// Supervised text-to-unit training over parallel examples.
pub fn train(
    model: TranslationModel,
    train_examples: &[ParallelExample],
    dev_examples: &[ParallelExample],
    vocab: &Vocabulary,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    if model.vocab_hash != vocab.hash() {
        return Err(Error::VocabHashMismatch {
            file: model.vocab_hash,
            expected: vocab.hash(),
        });
    }
    if train_examples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let dev_pairs = pairs_from_examples(dev_examples, vocab)?;
    let batch_seed = derive_seed(cfg.seed, "train.batches");
    let mut make = |epoch: u64| -> Result<Vec<Vec<TokenPair>>> {
        let batches = batch_iterator(train_examples, vocab, cfg.max_tokens, batch_seed, epoch)?;
        Ok(batches
            .into_iter()
            .map(|b| {
                (0..b.len())
                    .map(|i| {
                        let src_len = b.src_mask[i].iter().filter(|&&m| m).count();
                        let tgt_len = b.tgt_mask[i].iter().filter(|&&m| m).count();
                        TokenPair {
                            id: b.example_ids[i].clone(),
                            src: b.src[i][..src_len].to_vec(),
                            tgt: b.tgt[i][..tgt_len].to_vec(),
                        }
                    })
                    .collect()
            })
            .collect())
    };
    optimize(model, &mut make, &dev_pairs, cfg)
}

/// Mean loss / token accuracy of a model over parallel examples,
/// teacher-forced, dropout off.
pub fn evaluate(
    model: &TranslationModel,
    examples: &[ParallelExample],
    vocab: &Vocabulary,
    smoothing: f64,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let pairs = pairs_from_examples(examples, vocab)?;
    evaluate_pairs(model, &pairs, smoothing)
}

/// Denoising pretraining: reconstruct original text from its corrupted
/// form, per language, over the source sides of the given examples. Fresh
/// noise is drawn per epoch; everything is a function of `cfg.seed`.
pub fn pretrain(
    model: TranslationModel,
    examples: &[ParallelExample],
    langs: &[String],
    vocab: &Vocabulary,
    noise: &NoiseConfig,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    if model.vocab_hash != vocab.hash() {
        return Err(Error::VocabHashMismatch {
            file: model.vocab_hash,
            expected: vocab.hash(),
        });
    }
    if langs.is_empty() {
        return Err(Error::InvalidArgument(
            "pretraining needs at least one language".into(),
        ));
    }
    for lang in langs {
        if vocab.lang_id(lang).is_none() {
            return Err(Error::InvalidArgument(format!(
                "language {lang} not in vocabulary"
            )));
        }
    }
    let texts: Vec<(String, Vec<u32>)> = examples
        .iter()
        .filter(|e| langs.contains(&e.source_lang))
        .map(|e| {
            Ok((
                e.example_id.clone(),
                vocab.tokenize(&e.source_text, &e.source_lang)?,
            ))
        })
        .collect::<Result<_>>()?;
    if texts.is_empty() {
        return Err(Error::InvalidArgument(
            "no examples in the requested languages".into(),
        ));
    }
    let noise_cfg = noise.clone();
    let seed = cfg.seed;
    let max_tokens = cfg.max_tokens;
    let mut make = |epoch: u64| -> Result<Vec<Vec<TokenPair>>> {
        let mut order: Vec<usize> = (0..texts.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("pretrain.order.{epoch}")));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut batches: Vec<Vec<TokenPair>> = Vec::new();
        let mut current: Vec<TokenPair> = Vec::new();
        let mut current_tokens = 0usize;
        for idx in order {
            let (id, original) = &texts[idx];
            let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &format!("pretrain.noise.{epoch}.{id}"),
            ));
            let (noised, original) = apply_noise(original, &noise_cfg, &mut nrng);
            // Decoder reproduces [lang, words..]; the builder appends eos.
            let tgt = original[..original.len() - 1].to_vec();
            let cost = noised.len() + tgt.len() + 2;
            if !current.is_empty() && current_tokens + cost > max_tokens {
                batches.push(std::mem::take(&mut current));
                current_tokens = 0;
            }
            current_tokens += cost;
            current.push(TokenPair {
                id: id.clone(),
                src: noised,
                tgt,
            });
        }
        if !current.is_empty() {
            batches.push(current);
        }
        Ok(batches)
    };
    optimize(model, &mut make, &[], cfg)
}
