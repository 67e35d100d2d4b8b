//! Subcommand wiring: argument surfaces, flag/file/default resolution, the
//! on-disk artifact layout, and the run.json provenance record every command
//! leaves in its output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use t2s_core::audio::{read_wav, write_wav, Waveform};
use t2s_core::corpus::manifest::{load_bundle, save_bundle};
use t2s_core::corpus::{generate_corpus, CorpusSpec, Tier};
use t2s_core::decoding::{beam_decode, DecodeConfig};
use t2s_core::error::{Error, Result};
use t2s_core::eval::{asr_bleu_pipeline, oracle_pipeline, render_text, write_report};
use t2s_core::model::{load_checkpoint, save_checkpoint, ModelConfig, TranslationModel};
use t2s_core::seed::derive_seed;
use t2s_core::synthesis::{synthesize, SynthConfig};
use t2s_core::training::{pretrain, train, NoiseConfig, TrainOutcome, TrainingConfig};
use t2s_core::units::{
    collapse, encode_frames, gather_frames, kmeans_fit, load_codebook, quantize, save_codebook,
    FrameConfig, KmeansConfig, UnitSequence,
};

use crate::resolve::FileConfig;

#[derive(Parser)]
#[command(name = "t2s", version, about = "text-to-speech translation via discrete acoustic units")]
pub struct Cli {
    /// Flat key = value config file; keys are flag names with
    /// underscores. Explicit flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every random choice in every stage derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus (manifests, lexicon, vocab).
    CorpusGen(CorpusGenArgs),
    /// Fit a unit codebook to audio frames with k-means.
    UnitsFit(UnitsFitArgs),
    /// Encode audio into collapsed unit sequences with a codebook.
    UnitsEncode(UnitsEncodeArgs),
    /// Denoising pretraining over corpus source text.
    Pretrain(PretrainArgs),
    /// Supervised text-to-unit training.
    Train(TrainArgs),
    /// Translate text lines into unit sequences.
    Translate(TranslateArgs),
    /// Synthesize WAV files from unit lines.
    Synth(SynthArgs),
    /// Decode, synthesize, re-transcribe, and score a corpus split.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct CorpusGenArgs {
    /// Corpus directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated tag:tier list, e.g. qaa:high,qab:medium,qac:low.
    #[arg(long)]
    languages: Option<String>,
    #[arg(long)]
    high_pairs: Option<usize>,
    #[arg(long)]
    medium_pairs: Option<usize>,
    #[arg(long)]
    low_pairs: Option<usize>,
    #[arg(long)]
    dev_pairs: Option<usize>,
    #[arg(long)]
    test_pairs: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_words: Option<usize>,
    #[arg(long)]
    max_words: Option<usize>,
    #[arg(long)]
    num_units: Option<usize>,
}

#[derive(Args)]
struct FrameFlags {
    #[arg(long)]
    window_ms: Option<f64>,
    #[arg(long)]
    hop_ms: Option<f64>,
    #[arg(long)]
    num_bands: Option<usize>,
}

#[derive(Args)]
struct UnitsFitArgs {
    /// Directory of WAV files to fit on.
    #[arg(long, conflicts_with = "synthetic")]
    audio_dir: Option<PathBuf>,
    /// Generate this many synthetic tonal utterances instead of reading
    /// audio.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Output directory for the codebook.
    #[arg(long)]
    out: PathBuf,
    /// Codebook size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    subsample: Option<f64>,
    #[command(flatten)]
    frames: FrameFlags,
}

#[derive(Args)]
struct UnitsEncodeArgs {
    /// Codebook file written by units-fit.
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, conflicts_with = "synthetic")]
    audio_dir: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<usize>,
    /// Output directory for the unit manifest (name TAB space-separated
    /// units).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    frames: FrameFlags,
}

#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long)]
    layers_enc: Option<usize>,
    #[arg(long)]
    layers_dec: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    attention_dropout: Option<f64>,
    #[arg(long)]
    max_positions: Option<usize>,
}

impl ModelFlags {
    fn any_set(&self) -> bool {
        self.layers_enc.is_some()
            || self.layers_dec.is_some()
            || self.d_model.is_some()
            || self.d_ff.is_some()
            || self.heads.is_some()
            || self.dropout.is_some()
            || self.attention_dropout.is_some()
            || self.max_positions.is_some()
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    end_lr: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Global-norm gradient clip; 0 disables clipping.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Stop once dev loss reaches this value.
    #[arg(long)]
    stop_at_dev_loss: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated language tags; defaults to every corpus language.
    #[arg(long)]
    langs: Option<String>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    mean_span: Option<f64>,
    #[arg(long)]
    delete_rate: Option<f64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint instead of a random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Clone)]
struct DecodeFlags {
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_len_ratio: Option<f64>,
    #[arg(long)]
    max_len_extra: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory supplying the vocabulary.
    #[arg(long)]
    corpus: PathBuf,
    /// Input text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Source language tag for all input lines.
    #[arg(long)]
    lang: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Emit the full n-best list as JSON lines instead of unit lines.
    #[arg(long)]
    nbest: bool,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Clone)]
struct SynthFlags {
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    frame_ms: Option<f64>,
    #[arg(long)]
    base_freq: Option<f64>,
    #[arg(long)]
    freq_step: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    fade_ms: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Unit lines (space-separated IDs), one utterance per line.
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Which manifest to evaluate: train, dev, or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Score ground-truth units instead of model output (harness check).
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    decode: DecodeFlags,
    #[command(flatten)]
    synth: SynthFlags,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = file.get("seed", cli.seed, 0)?;
    match cli.command {
        Command::CorpusGen(args) => corpus_gen(args, &file, seed),
        Command::UnitsFit(args) => units_fit(args, &file, seed),
        Command::UnitsEncode(args) => units_encode(args, &file, seed),
        Command::Pretrain(args) => run_pretrain(args, &file, seed),
        Command::Train(args) => run_train(args, &file, seed),
        Command::Translate(args) => translate(args, &file, seed),
        Command::Synth(args) => synth(args, &file, seed),
        Command::Evaluate(args) => evaluate(args, &file, seed),
    }
}

// ---------------------------------------------------------------------------
// flag / file / default resolution

fn resolve_frames(file: &FileConfig, flags: &FrameFlags) -> Result<FrameConfig> {
    let d = FrameConfig::default();
    Ok(FrameConfig {
        sample_rate: d.sample_rate,
        window_ms: file.get("window_ms", flags.window_ms, d.window_ms)?,
        hop_ms: file.get("hop_ms", flags.hop_ms, d.hop_ms)?,
        num_bands: file.get("num_bands", flags.num_bands, d.num_bands)?,
        log_floor: d.log_floor,
    })
}

fn resolve_model(file: &FileConfig, flags: &ModelFlags) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        layers_enc: file.get("layers_enc", flags.layers_enc, d.layers_enc)?,
        layers_dec: file.get("layers_dec", flags.layers_dec, d.layers_dec)?,
        d_model: file.get("d_model", flags.d_model, d.d_model)?,
        d_ff: file.get("d_ff", flags.d_ff, d.d_ff)?,
        heads: file.get("heads", flags.heads, d.heads)?,
        dropout: file.get("dropout", flags.dropout, d.dropout)?,
        attention_dropout: file.get(
            "attention_dropout",
            flags.attention_dropout,
            d.attention_dropout,
        )?,
        max_positions: file.get("max_positions", flags.max_positions, d.max_positions)?,
    })
}

fn resolve_training(file: &FileConfig, flags: &TrainFlags, seed: u64) -> Result<TrainingConfig> {
    let d = TrainingConfig::default();
    let clip = file.get("clip_norm", flags.clip_norm, d.clip_norm.unwrap_or(0.0))?;
    Ok(TrainingConfig {
        lr: file.get("lr", flags.lr, d.lr)?,
        adam_beta1: file.get("adam_beta1", flags.adam_beta1, d.adam_beta1)?,
        adam_beta2: file.get("adam_beta2", flags.adam_beta2, d.adam_beta2)?,
        adam_eps: file.get("adam_eps", flags.adam_eps, d.adam_eps)?,
        end_lr: file.get("end_lr", flags.end_lr, d.end_lr)?,
        power: file.get("power", flags.power, d.power)?,
        warmup_steps: file.get("warmup_steps", flags.warmup_steps, d.warmup_steps)?,
        total_steps: file.get("total_steps", flags.total_steps, d.total_steps)?,
        label_smoothing: file.get("label_smoothing", flags.label_smoothing, d.label_smoothing)?,
        max_tokens: file.get("max_tokens", flags.max_tokens, d.max_tokens)?,
        seed,
        clip_norm: match clip {
            c if c == 0.0 => None,
            c => Some(c),
        },
        eval_every: file.get("eval_every", flags.eval_every, d.eval_every)?,
        stop_at_dev_loss: file.get_opt("stop_at_dev_loss", flags.stop_at_dev_loss)?,
    })
}

fn resolve_decode(file: &FileConfig, flags: &DecodeFlags) -> Result<DecodeConfig> {
    let d = DecodeConfig::default();
    Ok(DecodeConfig {
        beam_size: file.get("beam_size", flags.beam_size, d.beam_size)?,
        max_len_ratio: file.get("max_len_ratio", flags.max_len_ratio, d.max_len_ratio)?,
        max_len_extra: file.get("max_len_extra", flags.max_len_extra, d.max_len_extra)?,
        length_penalty: file.get("length_penalty", flags.length_penalty, d.length_penalty)?,
    })
}

fn resolve_synth(file: &FileConfig, flags: &SynthFlags) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    Ok(SynthConfig {
        sample_rate: file.get("sample_rate", flags.sample_rate, d.sample_rate)?,
        frame_ms: file.get("frame_ms", flags.frame_ms, d.frame_ms)?,
        base_freq: file.get("base_freq", flags.base_freq, d.base_freq)?,
        freq_step: file.get("freq_step", flags.freq_step, d.freq_step)?,
        amplitude: file.get("amplitude", flags.amplitude, d.amplitude)?,
        fade_ms: file.get("fade_ms", flags.fade_ms, d.fade_ms)?,
    })
}

// ---------------------------------------------------------------------------
// shared artifact helpers

/// Provenance record behind every artifact directory: the command, the
/// master seed, input locations, and the fully resolved configuration.
/// Deliberately timestamp-free so identical invocations leave byte-identical
/// artifacts.
fn write_run_json(
    dir: &Path,
    command: &str,
    seed: u64,
    inputs: &BTreeMap<&str, String>,
    config: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let record = json!({
        "command": command,
        "seed": seed,
        "inputs": inputs,
        "config": config,
    });
    let pretty = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Config(format!("run.json serialization: {e}")))?;
    std::fs::write(dir.join("run.json"), pretty + "\n")?;
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(format!("config serialization: {e}")))
}

/// checkpoint.bin plus per-step and dev-eval metric logs.
fn save_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(
        dir.join("checkpoint.bin"),
        &outcome.model,
        Some(&outcome.optimizer),
    )?;
    let mut metrics = String::new();
    for m in &outcome.metrics {
        metrics.push_str(&to_value(m)?.to_string());
        metrics.push('\n');
    }
    std::fs::write(dir.join("metrics.jsonl"), metrics)?;
    let mut dev = String::new();
    for p in &outcome.dev_history {
        dev.push_str(&to_value(p)?.to_string());
        dev.push('\n');
    }
    std::fs::write(dir.join("dev.jsonl"), dev)?;
    Ok(())
}

fn describe_outcome(outcome: &TrainOutcome) -> String {
    let tail = outcome
        .dev_history
        .last()
        .map(|p| format!(", dev loss {:.4} / acc {:.3}", p.loss, p.token_accuracy))
        .unwrap_or_default();
    let early = if outcome.stopped_early {
        " (stopped early)"
    } else {
        ""
    };
    format!("{} steps{tail}{early}", outcome.steps_run)
}

// ---------------------------------------------------------------------------
// audio sources for unit discovery

fn load_audio(
    dir: Option<&Path>,
    synthetic: Option<usize>,
    num_units: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<Waveform>)> {
    match (dir, synthetic) {
        (Some(_), Some(_)) => Err(Error::Config(
            "--audio-dir conflicts with --synthetic".into(),
        )),
        (None, None) => Err(Error::Config("need --audio-dir or --synthetic".into())),
        (Some(dir), None) => read_audio_dir(dir),
        (None, Some(n)) => synthetic_audio(n, num_units, seed),
    }
}

/// Every *.wav directly under `dir`, in name order.
fn read_audio_dir(dir: &Path) -> Result<(Vec<String>, Vec<Waveform>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .is_some_and(|ext| ext.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .wav files in {}", dir.display())));
    }
    let mut names = Vec::with_capacity(paths.len());
    let mut waves = Vec::with_capacity(paths.len());
    for path in paths {
        names.push(
            path.file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
        waves.push(read_wav(&path)?);
    }
    Ok((names, waves))
}

/// Tonal utterances over random collapsed unit sequences; stands in for
/// found audio so unit discovery can run self-contained.
fn synthetic_audio(n: usize, num_units: usize, seed: u64) -> Result<(Vec<String>, Vec<Waveform>)> {
    if n == 0 {
        return Err(Error::Config("--synthetic needs at least 1 utterance".into()));
    }
    if num_units < 2 {
        return Err(Error::Config(
            "synthetic audio needs at least 2 units".into(),
        ));
    }
    let config = SynthConfig::default();
    config.validate(num_units)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic-audio"));
    let mut names = Vec::with_capacity(n);
    let mut waves = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(8..=24);
        let mut units: Vec<u32> = Vec::with_capacity(len);
        for _ in 0..len {
            let unit = match units.last() {
                // uniform over everything but the previous unit
                Some(&prev) => {
                    let draw = rng.gen_range(0..num_units as u32 - 1);
                    draw + u32::from(draw >= prev)
                }
                None => rng.gen_range(0..num_units as u32),
            };
            units.push(unit);
        }
        let sequence = UnitSequence::new_collapsed(units)?;
        names.push(format!("synthetic-{i:05}"));
        waves.push(synthesize(&sequence, &config)?);
    }
    Ok((names, waves))
}

// ---------------------------------------------------------------------------
// commands

fn corpus_gen(args: CorpusGenArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let d = CorpusSpec::default();
    let languages = match file.get_str("languages", args.languages.as_ref()) {
        Some(s) => parse_languages(&s)?,
        None => d.languages.clone(),
    };
    let spec = CorpusSpec {
        languages,
        high_pairs: file.get("high_pairs", args.high_pairs, d.high_pairs)?,
        medium_pairs: file.get("medium_pairs", args.medium_pairs, d.medium_pairs)?,
        low_pairs: file.get("low_pairs", args.low_pairs, d.low_pairs)?,
        dev_pairs: file.get("dev_pairs", args.dev_pairs, d.dev_pairs)?,
        test_pairs: file.get("test_pairs", args.test_pairs, d.test_pairs)?,
        vocab_size: file.get("vocab_size", args.vocab_size, d.vocab_size)?,
        min_words: file.get("min_words", args.min_words, d.min_words)?,
        max_words: file.get("max_words", args.max_words, d.max_words)?,
        num_units: file.get("num_units", args.num_units, d.num_units)?,
        reorder: d.reorder,
        seed,
    };
    file.finish()?;
    let bundle = generate_corpus(&spec)?;
    save_bundle(&bundle, &args.out)?;
    write_run_json(&args.out, "corpus-gen", seed, &BTreeMap::new(), to_value(&spec)?)?;
    println!(
        "corpus: {} train / {} dev / {} test pairs, {} languages -> {}",
        bundle.train.len(),
        bundle.dev.len(),
        bundle.test.len(),
        bundle.languages.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_languages(s: &str) -> Result<Vec<(String, Tier)>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (tag, tier) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("language spec {part:?}: expected tag:tier")))?;
        let tier = match tier.trim() {
            "high" => Tier::High,
            "medium" => Tier::Medium,
            "low" => Tier::Low,
            other => return Err(Error::Config(format!("unknown tier {other:?}"))),
        };
        out.push((tag.trim().to_string(), tier));
    }
    if out.is_empty() {
        return Err(Error::Config("empty language list".into()));
    }
    Ok(out)
}

fn units_fit(args: UnitsFitArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let frame_config = resolve_frames(file, &args.frames)?;
    let kd = KmeansConfig::default();
    let k = file.get("k", args.k, 100)?;
    let kmeans_config = KmeansConfig {
        seed: derive_seed(seed, "kmeans"),
        max_iters: file.get("max_iters", args.max_iters, kd.max_iters)?,
        tol: file.get("tol", args.tol, kd.tol)?,
        subsample: file.get("subsample", args.subsample, kd.subsample)?,
    };
    let synthetic = file.get_opt("synthetic", args.synthetic)?;
    file.finish()?;

    let (_, waves) = load_audio(args.audio_dir.as_deref(), synthetic, k, seed)?;
    let sequences = waves
        .iter()
        .map(|w| encode_frames(w, &frame_config))
        .collect::<Result<Vec<_>>>()?;
    let points = gather_frames(&sequences)?;
    let codebook = kmeans_fit(&points, k, &kmeans_config)?;

    std::fs::create_dir_all(&args.out)?;
    save_codebook(args.out.join("codebook.bin"), &codebook)?;
    let mut inputs = BTreeMap::new();
    if let Some(dir) = &args.audio_dir {
        inputs.insert("audio_dir", dir.display().to_string());
    }
    if let Some(n) = synthetic {
        inputs.insert("synthetic", n.to_string());
    }
    write_run_json(
        &args.out,
        "units-fit",
        seed,
        &inputs,
        json!({ "k": k, "frames": to_value(&frame_config)?, "kmeans": to_value(&kmeans_config)? }),
    )?;
    println!(
        "codebook: k={} dim={} from {} frames -> {}",
        codebook.k(),
        codebook.dim(),
        points.dims2().0,
        args.out.display()
    );
    Ok(())
}

fn units_encode(args: UnitsEncodeArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let frame_config = resolve_frames(file, &args.frames)?;
    let synthetic = file.get_opt("synthetic", args.synthetic)?;
    file.finish()?;

    let codebook = load_codebook(&args.codebook)?;
    let (names, waves) = load_audio(args.audio_dir.as_deref(), synthetic, codebook.k(), seed)?;
    let mut manifest = String::new();
    for (name, wave) in names.iter().zip(&waves) {
        let frames = encode_frames(wave, &frame_config)?;
        let units = collapse(&quantize(&codebook, &frames)?);
        let rendered: Vec<String> = units.units().iter().map(u32::to_string).collect();
        manifest.push_str(name);
        manifest.push('\t');
        manifest.push_str(&rendered.join(" "));
        manifest.push('\n');
    }

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("units.tsv"), manifest)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("codebook", args.codebook.display().to_string());
    if let Some(dir) = &args.audio_dir {
        inputs.insert("audio_dir", dir.display().to_string());
    }
    if let Some(n) = synthetic {
        inputs.insert("synthetic", n.to_string());
    }
    write_run_json(
        &args.out,
        "units-encode",
        seed,
        &inputs,
        json!({ "frames": to_value(&frame_config)? }),
    )?;
    println!(
        "encoded {} utterances -> {}",
        names.len(),
        args.out.display()
    );
    Ok(())
}

fn run_pretrain(args: PretrainArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let model_config = resolve_model(file, &args.model)?;
    let train_config = resolve_training(file, &args.train, seed)?;
    let nd = NoiseConfig::default();
    let noise = NoiseConfig {
        mask_rate: file.get("mask_rate", args.mask_rate, nd.mask_rate)?,
        mean_span: file.get("mean_span", args.mean_span, nd.mean_span)?,
        delete_rate: file.get("delete_rate", args.delete_rate, nd.delete_rate)?,
    };
    let langs_arg = file.get_str("langs", args.langs.as_ref());
    file.finish()?;

    let bundle = load_bundle(&args.corpus)?;
    let langs: Vec<String> = match langs_arg {
        Some(s) => s
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect(),
        None => bundle.languages.iter().map(|(t, _)| t.clone()).collect(),
    };
    let model = TranslationModel::init(model_config.clone(), &bundle.vocab, derive_seed(seed, "init"))?;
    let outcome = pretrain(
        model,
        &bundle.train,
        &langs,
        &bundle.vocab,
        &noise,
        &train_config,
    )?;
    save_outcome(&args.out, &outcome)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus", args.corpus.display().to_string());
    write_run_json(
        &args.out,
        "pretrain",
        seed,
        &inputs,
        json!({
            "model": to_value(&model_config)?,
            "training": to_value(&train_config)?,
            "noise": to_value(&noise)?,
            "langs": langs,
        }),
    )?;
    println!("pretrain: {} -> {}", describe_outcome(&outcome), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs, file: &FileConfig, seed: u64) -> Result<()> {
    // Model keys are consumed even when --init fixes the architecture, so a
    // config file shared across stages doesn't trip the unused-key check.
    let model_config = resolve_model(file, &args.model)?;
    let train_config = resolve_training(file, &args.train, seed)?;
    file.finish()?;

    let bundle = load_bundle(&args.corpus)?;
    let model = match &args.init {
        Some(path) => {
            if args.model.any_set() {
                return Err(Error::Config(
                    "model shape flags conflict with --init; the checkpoint fixes the architecture"
                        .into(),
                ));
            }
            let payload = load_checkpoint(path)?;
            payload.verify_vocab_hash(bundle.vocab.hash())?;
            payload.model
        }
        None => TranslationModel::init(model_config, &bundle.vocab, derive_seed(seed, "init"))?,
    };
    let model_config = model.config.clone();
    let outcome = train(model, &bundle.train, &bundle.dev, &bundle.vocab, &train_config)?;
    save_outcome(&args.out, &outcome)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus", args.corpus.display().to_string());
    if let Some(init) = &args.init {
        inputs.insert("init", init.display().to_string());
    }
    write_run_json(
        &args.out,
        "train",
        seed,
        &inputs,
        json!({
            "model": to_value(&model_config)?,
            "training": to_value(&train_config)?,
        }),
    )?;
    println!("train: {} -> {}", describe_outcome(&outcome), args.out.display());
    Ok(())
}

fn translate(args: TranslateArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let decode_config = resolve_decode(file, &args.decode)?;
    file.finish()?;

    let bundle = load_bundle(&args.corpus)?;
    let payload = load_checkpoint(&args.checkpoint)?;
    payload.verify_vocab_hash(bundle.vocab.hash())?;
    let text = std::fs::read_to_string(&args.input)?;

    let mut lines = 0usize;
    let mut out = String::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens = bundle.vocab.tokenize(line, &args.lang)?;
        let result = beam_decode(&payload.model, &bundle.vocab, &tokens, &decode_config)?;
        if args.nbest {
            let candidates: Vec<serde_json::Value> = result
                .nbest
                .iter()
                .map(|c| json!({ "units": c.units.units(), "score": c.score }))
                .collect();
            out.push_str(&json!({ "input": line, "nbest": candidates }).to_string());
        } else {
            let rendered: Vec<String> = result.best.units().iter().map(u32::to_string).collect();
            out.push_str(&rendered.join(" "));
        }
        out.push('\n');
        lines += 1;
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let out_name = if args.nbest { "nbest.jsonl" } else { "units.txt" };
    std::fs::write(args.out_dir.join(out_name), out)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint", args.checkpoint.display().to_string());
    inputs.insert("corpus", args.corpus.display().to_string());
    inputs.insert("input", args.input.display().to_string());
    inputs.insert("lang", args.lang.clone());
    write_run_json(
        &args.out_dir,
        "translate",
        seed,
        &inputs,
        json!({ "decode": to_value(&decode_config)?, "nbest": args.nbest }),
    )?;
    println!("translated {lines} lines -> {}", args.out_dir.display());
    Ok(())
}

fn synth(args: SynthArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let synth_config = resolve_synth(file, &args.synth)?;
    file.finish()?;

    let text = std::fs::read_to_string(&args.units)?;
    let mut sequences = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let units: Vec<u32> = line
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Manifest {
                    path: args.units.display().to_string(),
                    line: lineno + 1,
                    msg: format!("bad unit {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        sequences.push(UnitSequence::new_collapsed(units)?);
    }
    let num_units = sequences
        .iter()
        .flat_map(|s| s.units().iter().copied())
        .max()
        .map_or(1, |m| m as usize + 1);
    synth_config.validate(num_units)?;

    std::fs::create_dir_all(&args.out_dir)?;
    for (i, sequence) in sequences.iter().enumerate() {
        let wave = synthesize(sequence, &synth_config)?;
        write_wav(args.out_dir.join(format!("utt_{i:05}.wav")), &wave)?;
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("units", args.units.display().to_string());
    write_run_json(
        &args.out_dir,
        "synth",
        seed,
        &inputs,
        to_value(&synth_config)?,
    )?;
    println!(
        "synthesized {} utterances -> {}",
        sequences.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let decode_config = resolve_decode(file, &args.decode)?;
    let synth_config = resolve_synth(file, &args.synth)?;
    file.finish()?;

    let bundle = load_bundle(&args.corpus)?;
    let examples = bundle.split(&args.split)?;
    let outputs = if args.oracle {
        oracle_pipeline(
            examples,
            &bundle.languages,
            &bundle.lexicon,
            &synth_config,
            bundle.num_units,
        )?
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .expect("clap requires --checkpoint unless --oracle");
        let payload = load_checkpoint(path)?;
        payload.verify_vocab_hash(bundle.vocab.hash())?;
        asr_bleu_pipeline(
            &payload.model,
            examples,
            &bundle.languages,
            &bundle.vocab,
            &bundle.lexicon,
            &decode_config,
            &synth_config,
            bundle.num_units,
        )?
    };

    write_report(&args.out_dir, &outputs)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus", args.corpus.display().to_string());
    inputs.insert("split", args.split.clone());
    if let Some(ckpt) = &args.checkpoint {
        inputs.insert("checkpoint", ckpt.display().to_string());
    }
    if args.oracle {
        inputs.insert("oracle", "true".into());
    }
    write_run_json(
        &args.out_dir,
        "evaluate",
        seed,
        &inputs,
        json!({ "decode": to_value(&decode_config)?, "synth": to_value(&synth_config)? }),
    )?;
    print!("{}", render_text(&outputs.report));
    Ok(())
}
