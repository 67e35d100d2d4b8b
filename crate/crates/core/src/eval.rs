//! Corpus-level BLEU and the end-to-end evaluation pipeline: decode to
//! units, synthesize, re-analyze, invert to text, score against the
//! reference sentences, and aggregate per language and resource tier.

use crate::corpus::{Lexicon, ParallelExample, Tier, Vocabulary};
use crate::decoding::{beam_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::TranslationModel;
use crate::synthesis::{analyze, synthesize, units_to_text, SynthConfig};
use crate::units::UnitSequence;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

const MAX_N: usize = 4;
/// Zero precisions are floored here inside the geometric mean so a single
/// missing n-gram order degrades the score instead of zeroing it.
const PRECISION_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0-100.
    pub bleu: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub bp: f64,
    pub hyp_tokens: usize,
    pub ref_tokens: usize,
}

fn tokens(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4: clipped n-gram matches pooled over all pairs,
/// geometric mean of the four precisions, brevity penalty exp(1 - r/c)
/// when the hypothesis corpus is shorter than the reference corpus.
/// Tokenization is lowercasing plus whitespace splitting. An order with
/// no n-grams anywhere counts as vacuously perfect, so identical corpora
/// of short sentences still score 100.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "hypothesis/reference count mismatch: {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("nothing to score".into()));
    }
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let mut hyp_tokens = 0usize;
    let mut ref_tokens = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let h = tokens(hyp);
        let r = tokens(reference);
        hyp_tokens += h.len();
        ref_tokens += r.len();
        for n in 1..=MAX_N {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (gram, &count) in &hc {
                let clip = rc.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0f64; MAX_N];
    for n in 0..MAX_N {
        precisions[n] = if totals[n] == 0 {
            1.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let bp = if hyp_tokens == 0 {
        0.0
    } else if hyp_tokens >= ref_tokens {
        1.0
    } else {
        (1.0 - ref_tokens as f64 / hyp_tokens as f64).exp()
    };
    let bleu = if hyp_tokens == 0 {
        0.0
    } else {
        let log_mean = precisions
            .iter()
            .map(|&p| p.max(PRECISION_FLOOR).ln())
            .sum::<f64>()
            / MAX_N as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        p1: precisions[0],
        p2: precisions[1],
        p3: precisions[2],
        p4: precisions[3],
        bp,
        hyp_tokens,
        ref_tokens,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageEval {
    #[serde(flatten)]
    pub scores: BleuReport,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierAggregates {
    pub high: Option<f64>,
    pub medium: Option<f64>,
    pub low: Option<f64>,
    /// Mean over all languages, regardless of tier.
    pub overall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub languages: BTreeMap<String, LanguageEval>,
    pub tiers: TierAggregates,
    pub overall: f64,
}

/// Arithmetic tier means over per-language scores. Every scored language
/// must carry a tier assignment.
pub fn tier_report(
    per_language: &BTreeMap<String, f64>,
    tiers: &[(String, Tier)],
) -> Result<TierAggregates> {
    if per_language.is_empty() {
        return Err(Error::InvalidArgument("no languages to aggregate".into()));
    }
    let assignment: HashMap<&str, Tier> =
        tiers.iter().map(|(tag, t)| (tag.as_str(), *t)).collect();
    let mut sums: BTreeMap<Tier, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (tag, &score) in per_language {
        let tier = assignment.get(tag.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("language {tag} has no tier assignment"))
        })?;
        let entry = sums.entry(*tier).or_insert((0.0, 0));
        entry.0 += score;
        entry.1 += 1;
        total += score;
    }
    let mean = |tier: Tier| sums.get(&tier).map(|&(s, n)| s / n as f64);
    Ok(TierAggregates {
        high: mean(Tier::High),
        medium: mean(Tier::Medium),
        low: mean(Tier::Low),
        overall: total / per_language.len() as f64,
    })
}

/// One evaluated example: hypothesis after the full audio round trip,
/// reference from the lexicon inversion of the true target units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: String,
    pub language: String,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Debug, Clone)]
pub struct PipelineOutputs {
    pub report: EvalReport,
    pub per_example: Vec<ExampleRecord>,
}

fn pipeline_core<F>(
    examples: &[ParallelExample],
    tiers: &[(String, Tier)],
    lexicon: &Lexicon,
    synth_config: &SynthConfig,
    num_units: usize,
    mut decode: F,
) -> Result<PipelineOutputs>
where
    F: FnMut(&ParallelExample) -> Result<UnitSequence>,
{
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples to evaluate".into()));
    }
    synth_config.validate(num_units)?;
    let mut per_example = Vec::with_capacity(examples.len());
    let mut by_lang: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
    for ex in examples {
        let stage = |e: Error| Error::Example {
            example_id: ex.example_id.clone(),
            msg: e.to_string(),
        };
        let units = decode(ex).map_err(stage)?;
        let wav = synthesize(&units, synth_config).map_err(stage)?;
        let heard = analyze(&wav, synth_config, num_units).map_err(stage)?;
        let hypothesis = units_to_text(&heard, lexicon);
        let reference = units_to_text(&ex.target_units, lexicon);
        let slot = by_lang.entry(ex.source_lang.clone()).or_default();
        slot.0.push(hypothesis.clone());
        slot.1.push(reference.clone());
        per_example.push(ExampleRecord {
            example_id: ex.example_id.clone(),
            language: ex.source_lang.clone(),
            hypothesis,
            reference,
        });
    }
    let mut languages = BTreeMap::new();
    let mut per_language = BTreeMap::new();
    for (lang, (hyps, refs)) in &by_lang {
        let scores = bleu(hyps, refs)?;
        per_language.insert(lang.clone(), scores.bleu);
        languages.insert(
            lang.clone(),
            LanguageEval {
                scores,
                n_examples: hyps.len(),
            },
        );
    }
    let tiers = tier_report(&per_language, tiers)?;
    let overall = tiers.overall;
    Ok(PipelineOutputs {
        report: EvalReport {
            languages,
            tiers,
            overall,
        },
        per_example,
    })
}

/// Full evaluation: beam-decode each source, push the units through the
/// audio channel, invert to text, and score per language and tier.
#[allow(clippy::too_many_arguments)]
pub fn asr_bleu_pipeline(
    model: &TranslationModel,
    examples: &[ParallelExample],
    tiers: &[(String, Tier)],
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    decode_config: &DecodeConfig,
    synth_config: &SynthConfig,
    num_units: usize,
) -> Result<PipelineOutputs> {
    if model.vocab_hash != vocab.hash() {
        return Err(Error::VocabHashMismatch {
            file: model.vocab_hash,
            expected: vocab.hash(),
        });
    }
    decode_config.validate()?;
    pipeline_core(examples, tiers, lexicon, synth_config, num_units, |ex| {
        let src = vocab.tokenize(&ex.source_text, &ex.source_lang)?;
        Ok(beam_decode(model, vocab, &src, decode_config)?.best)
    })
}

/// The same pipeline with ground-truth units injected in place of the
/// model: scores 100 when every stage after the model is transparent.
pub fn oracle_pipeline(
    examples: &[ParallelExample],
    tiers: &[(String, Tier)],
    lexicon: &Lexicon,
    synth_config: &SynthConfig,
    num_units: usize,
) -> Result<PipelineOutputs> {
    pipeline_core(examples, tiers, lexicon, synth_config, num_units, |ex| {
        Ok(ex.target_units.clone())
    })
}

/// Machine-readable report plus the per-example table:
/// `report.json` and `examples.tsv` (id, hypothesis, reference).
pub fn write_report(dir: &Path, outputs: &PipelineOutputs) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&outputs.report)
        .map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))?;
    std::fs::write(dir.join("report.json"), json)?;
    let mut tsv = std::fs::File::create(dir.join("examples.tsv"))?;
    for rec in &outputs.per_example {
        writeln!(
            tsv,
            "{}\t{}\t{}",
            rec.example_id, rec.hypothesis, rec.reference
        )?;
    }
    Ok(())
}

/// Aligned-column rendering for terminals.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>8} {:>7} {:>7} {:>7} {:>7} {:>6} {:>5}\n",
        "lang", "bleu", "p1", "p2", "p3", "p4", "bp", "n"
    ));
    for (lang, entry) in &report.languages {
        let s = &entry.scores;
        out.push_str(&format!(
            "{:<8} {:>8.2} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>6.3} {:>5}\n",
            lang, s.bleu, s.p1, s.p2, s.p3, s.p4, s.bp, entry.n_examples
        ));
    }
    let tier_line = |name: &str, v: Option<f64>| match v {
        Some(x) => format!("{name:<8} {x:>8.2}\n"),
        None => String::new(),
    };
    out.push_str(&tier_line("high", report.tiers.high));
    out.push_str(&tier_line("medium", report.tiers.medium));
    out.push_str(&tier_line("low", report.tiers.low));
    out.push_str(&format!("{:<8} {:>8.2}\n", "overall", report.overall));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::model::{ModelConfig, TranslationModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identical_corpora_score_exactly_one_hundred() {
        let refs = s(&[
            "the quick brown fox jumps over the lazy dog",
            "a short one",
            "three tokens here",
            "x", // shorter than every higher order
        ]);
        let report = bleu(&refs, &refs).unwrap();
        assert_eq!(report.bleu, 100.0);
        assert_eq!(report.bp, 1.0);
        assert_eq!([report.p1, report.p2, report.p3, report.p4], [1.0; 4]);
    }

    #[test]
    fn empty_hypotheses_score_zero_with_zero_bp() {
        let hyps = s(&["", ""]);
        let refs = s(&["some reference", "another one"]);
        let report = bleu(&hyps, &refs).unwrap();
        assert_eq!(report.bleu, 0.0);
        assert_eq!(report.bp, 0.0);
        assert_eq!(report.hyp_tokens, 0);
    }

    #[test]
    fn repeated_word_is_clipped_to_reference_count() {
        let report = bleu(&s(&["the the the the"]), &s(&["the cat sat"])).unwrap();
        assert_eq!(report.p1, 0.25, "one clipped match out of four unigrams");
        assert_eq!(report.p2, 0.0);
        assert_eq!(report.p3, 0.0);
        assert_eq!(report.p4, 0.0);
        assert_eq!(report.bp, 1.0, "hypothesis longer than reference");
        // Geometric mean of (0.25, 1e-9, 1e-9, 1e-9) x 100.
        let expected = 100.0 * (0.25f64 * 1e-27).powf(0.25);
        assert!((report.bleu - expected).abs() < 1e-15);
        assert!((report.bleu - 1.257433e-5).abs() < 1e-10);
    }

    #[test]
    fn case_and_whitespace_are_normalized() {
        let report = bleu(&s(&["The  CAT sat"]), &s(&["the cat sat"])).unwrap();
        assert_eq!(report.bleu, 100.0);
    }

    #[test]
    fn mismatched_or_empty_inputs_rejected() {
        assert!(bleu(&s(&["a"]), &s(&["a", "b"])).is_err());
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn corrupting_more_words_never_raises_the_score() {
        // Pinned fixture: 20 sentences of 8 words; corruption replaces
        // the first k words of every sentence with out-of-vocabulary
        // tokens.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let refs: Vec<String> = (0..20)
            .map(|_| {
                (0..8)
                    .map(|_| format!("w{}", rng.gen_range(0..30)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let mut prev = f64::INFINITY;
        for k in 0..=5 {
            let hyps: Vec<String> = refs
                .iter()
                .map(|r| {
                    let mut words: Vec<String> =
                        r.split_whitespace().map(|w| w.to_string()).collect();
                    for (i, w) in words.iter_mut().enumerate().take(k) {
                        *w = format!("zzz{i}");
                    }
                    words.join(" ")
                })
                .collect();
            let score = bleu(&hyps, &refs).unwrap().bleu;
            assert!(
                score <= prev + 1e-12,
                "corrupting {k} words raised BLEU: {score} > {prev}"
            );
            prev = score;
        }
    }

    #[test]
    fn scoring_is_permutation_invariant() {
        let hyps = s(&["a b c", "d e f g", "h i", "j k l m n"]);
        let refs = s(&["a b x", "d e f q", "h i", "j z l m n"]);
        let base = bleu(&hyps, &refs).unwrap();
        let perm = [2usize, 0, 3, 1];
        let hp: Vec<String> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let rp: Vec<String> = perm.iter().map(|&i| refs[i].clone()).collect();
        let permuted = bleu(&hp, &rp).unwrap();
        assert_eq!(base, permuted);
    }

    fn tier_map() -> Vec<(String, Tier)> {
        vec![
            ("qaa".to_string(), Tier::High),
            ("qab".to_string(), Tier::Medium),
            ("qac".to_string(), Tier::Low),
            ("qad".to_string(), Tier::Medium),
        ]
    }

    #[test]
    fn tier_means_are_arithmetic_means() {
        let per: BTreeMap<String, f64> = [
            ("qaa".to_string(), 40.0),
            ("qab".to_string(), 10.0),
            ("qad".to_string(), 20.0),
            ("qac".to_string(), 6.0),
        ]
        .into();
        let agg = tier_report(&per, &tier_map()).unwrap();
        assert_eq!(agg.high, Some(40.0));
        assert_eq!(agg.medium, Some(15.0));
        assert_eq!(agg.low, Some(6.0));
        assert_eq!(agg.overall, 19.0);
    }

    #[test]
    fn single_language_tier_mean_is_that_language() {
        let per: BTreeMap<String, f64> = [("qaa".to_string(), 33.25)].into();
        let agg = tier_report(&per, &tier_map()).unwrap();
        assert_eq!(agg.high, Some(33.25));
        assert_eq!(agg.medium, None);
        assert_eq!(agg.overall, 33.25);
    }

    #[test]
    fn unassigned_language_rejected() {
        let per: BTreeMap<String, f64> = [("zzz".to_string(), 1.0)].into();
        assert!(tier_report(&per, &tier_map()).is_err());
    }

    #[test]
    fn tier_aggregation_ignores_input_order() {
        let mut a: BTreeMap<String, f64> = BTreeMap::new();
        a.insert("qab".to_string(), 12.0);
        a.insert("qaa".to_string(), 50.0);
        let mut tiers = tier_map();
        tiers.reverse();
        let agg1 = tier_report(&a, &tier_map()).unwrap();
        let agg2 = tier_report(&a, &tiers).unwrap();
        assert_eq!(agg1, agg2);
    }

    fn small_bundle() -> crate::corpus::CorpusBundle {
        generate_corpus(&CorpusSpec {
            languages: vec![
                ("qaa".to_string(), Tier::High),
                ("qac".to_string(), Tier::Low),
            ],
            high_pairs: 6,
            low_pairs: 4,
            dev_pairs: 2,
            test_pairs: 3,
            vocab_size: 15,
            num_units: 25,
            seed: 21,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_pipeline_scores_one_hundred_everywhere() {
        let bundle = small_bundle();
        let out = oracle_pipeline(
            &bundle.test,
            &bundle.languages,
            &bundle.lexicon,
            &SynthConfig::default(),
            bundle.num_units,
        )
        .unwrap();
        for (lang, entry) in &out.report.languages {
            assert_eq!(entry.scores.bleu, 100.0, "{lang}");
        }
        assert_eq!(out.report.overall, 100.0);
        assert_eq!(out.report.tiers.high, Some(100.0));
        assert_eq!(out.report.tiers.low, Some(100.0));
        assert!(out.per_example.iter().all(|r| r.hypothesis == r.reference));
    }

    #[test]
    fn untrained_model_scores_near_zero() {
        let bundle = small_bundle();
        let config = ModelConfig {
            layers_enc: 1,
            layers_dec: 1,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            max_positions: 64,
            ..ModelConfig::default()
        };
        let model = TranslationModel::init(config, &bundle.vocab, 77).unwrap();
        let out = asr_bleu_pipeline(
            &model,
            &bundle.test,
            &bundle.languages,
            &bundle.vocab,
            &bundle.lexicon,
            &DecodeConfig {
                beam_size: 2,
                ..DecodeConfig::default()
            },
            &SynthConfig::default(),
            bundle.num_units,
        )
        .unwrap();
        assert!(
            out.report.overall < 5.0,
            "random model scored {}",
            out.report.overall
        );
    }

    #[test]
    fn reported_tier_means_match_recomputation() {
        let bundle = small_bundle();
        let out = oracle_pipeline(
            &bundle.test,
            &bundle.languages,
            &bundle.lexicon,
            &SynthConfig::default(),
            bundle.num_units,
        )
        .unwrap();
        let per: BTreeMap<String, f64> = out
            .report
            .languages
            .iter()
            .map(|(k, v)| (k.clone(), v.scores.bleu))
            .collect();
        let again = tier_report(&per, &bundle.languages).unwrap();
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-9,
            (None, None) => true,
            _ => false,
        };
        assert!(close(again.high, out.report.tiers.high));
        assert!(close(again.medium, out.report.tiers.medium));
        assert!(close(again.low, out.report.tiers.low));
        assert!((again.overall - out.report.overall).abs() < 1e-9);
    }

    #[test]
    fn report_files_round_trip() {
        let bundle = small_bundle();
        let out = oracle_pipeline(
            &bundle.test,
            &bundle.languages,
            &bundle.lexicon,
            &SynthConfig::default(),
            bundle.num_units,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("t2s-eval-test-{}", std::process::id()));
        write_report(&dir, &out).unwrap();
        let json = std::fs::read_to_string(dir.join("report.json")).unwrap();
        let parsed: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.overall, out.report.overall);
        assert!(parsed.languages.contains_key("qaa"));
        let tsv = std::fs::read_to_string(dir.join("examples.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), out.per_example.len());
        assert!(tsv.lines().all(|l| l.split('\t').count() == 3));
        let rendered = render_text(&out.report);
        assert!(rendered.contains("overall"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
