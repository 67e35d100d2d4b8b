//! Synthetic multilingual parallel data with known ground truth.
//!
//! The target "language" is a bank of invented words, each mapped to a short
//! unit string by a generated lexicon. Every source language is a bijective
//! word substitution of the target vocabulary plus a fixed word-order rule,
//! so the text-to-unit translation function is deterministic, learnable, and
//! exactly checkable end to end.

pub mod batch;
pub mod manifest;
pub mod vocab;

pub use batch::{batch_iterator, Batch};
pub use manifest::{read_manifest, write_manifest};
pub use vocab::{TokenKind, Vocabulary, BOS, EOS, MASK, NUM_SPECIALS, PAD, UNK};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::units::UnitSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

pub const SEPARATOR_UNIT: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    High,
    Medium,
    Low,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::High => "high",
            Tier::Medium => "medium",
            Tier::Low => "low",
        }
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Tier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Tier::High),
            "medium" => Ok(Tier::Medium),
            "low" => Ok(Tier::Low),
            other => Err(Error::Config(format!("unknown tier {other}"))),
        }
    }
}

/// Word-order rule applied to the target sentence to form the source side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    Identity,
    Reverse,
    RotateLeft,
}

impl Reorder {
    pub fn apply<T: Clone>(self, words: &[T]) -> Vec<T> {
        match self {
            Reorder::Identity => words.to_vec(),
            Reorder::Reverse => words.iter().rev().cloned().collect(),
            Reorder::RotateLeft => {
                if words.len() < 2 {
                    words.to_vec()
                } else {
                    let mut out = words[1..].to_vec();
                    out.push(words[0].clone());
                    out
                }
            }
        }
    }
}

/// Target-language lexicon: word → unit string. Unit strings never contain
/// the separator unit, have no adjacent repeats, and are pairwise distinct,
/// which makes sentence encoding invertible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<u32>>,
}

impl Lexicon {
    pub fn new(entries: BTreeMap<String, Vec<u32>>) -> Result<Self> {
        let mut seen: HashSet<&[u32]> = HashSet::new();
        for (word, units) in &entries {
            if units.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "lexicon entry {word} has an empty unit string"
                )));
            }
            if units.contains(&SEPARATOR_UNIT) {
                return Err(Error::InvalidArgument(format!(
                    "lexicon entry {word} uses the separator unit {SEPARATOR_UNIT}"
                )));
            }
            if units.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "lexicon entry {word} has adjacent repeated units"
                )));
            }
            if !seen.insert(units.as_slice()) {
                return Err(Error::InvalidArgument(format!(
                    "lexicon is not injective: unit string of {word} repeats"
                )));
            }
        }
        Ok(Lexicon { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn units_for(&self, word: &str) -> Option<&[u32]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &[u32])> {
        self.entries.iter().map(|(w, u)| (w, u.as_slice()))
    }

    /// Unit-string → word map for oracle transcription.
    pub fn inverted(&self) -> BTreeMap<Vec<u32>, String> {
        self.entries
            .iter()
            .map(|(w, u)| (u.clone(), w.clone()))
            .collect()
    }

    /// Encode a sentence as unit strings joined by the separator unit. The
    /// result is collapsed by construction: entries contain no separator and
    /// no adjacent repeats.
    pub fn encode_sentence(&self, words: &[&str]) -> Result<UnitSequence> {
        let mut units = Vec::new();
        for (i, word) in words.iter().enumerate() {
            let entry = self.units_for(word).ok_or_else(|| {
                Error::InvalidArgument(format!("word {word} not in lexicon"))
            })?;
            if i > 0 {
                units.push(SEPARATOR_UNIT);
            }
            units.extend_from_slice(entry);
        }
        UnitSequence::new_collapsed(units)
    }

    /// Largest unit ID used by any entry.
    pub fn max_unit(&self) -> u32 {
        self.entries
            .values()
            .flat_map(|u| u.iter().copied())
            .max()
            .unwrap_or(SEPARATOR_UNIT)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub example_id: String,
    pub source_lang: String,
    /// Space-joined lowercase source words.
    pub source_text: String,
    /// Collapsed unit encoding of the target sentence.
    pub target_units: UnitSequence,
}

impl ParallelExample {
    pub fn source_words(&self) -> Vec<&str> {
        self.source_text.split_whitespace().collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// (tag, tier) per source language.
    pub languages: Vec<(String, Tier)>,
    pub high_pairs: usize,
    pub medium_pairs: usize,
    pub low_pairs: usize,
    /// Held-out pair counts per language.
    pub dev_pairs: usize,
    pub test_pairs: usize,
    /// Words in the target vocabulary (each source language mirrors it).
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Acoustic-unit vocabulary size (unit 0 is the separator).
    pub num_units: usize,
    /// Word-order rule shared by all source languages, so tiers differ only
    /// in data volume, not task difficulty.
    pub reorder: Reorder,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            languages: vec![
                ("qaa".into(), Tier::High),
                ("qab".into(), Tier::Medium),
                ("qac".into(), Tier::Low),
            ],
            high_pairs: 5000,
            medium_pairs: 500,
            low_pairs: 50,
            dev_pairs: 200,
            test_pairs: 200,
            vocab_size: 40,
            min_words: 3,
            max_words: 8,
            num_units: 100,
            reorder: Reorder::Reverse,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn train_pairs(&self, tier: Tier) -> usize {
        match tier {
            Tier::High => self.high_pairs,
            Tier::Medium => self.medium_pairs,
            Tier::Low => self.low_pairs,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::InvalidArgument("need at least one language".into()));
        }
        let mut tags: Vec<&str> = self.languages.iter().map(|(t, _)| t.as_str()).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate language tag".into()));
        }
        if self.vocab_size < 10 {
            return Err(Error::InvalidArgument(format!(
                "vocab size must be at least 10, got {}",
                self.vocab_size
            )));
        }
        if self.high_pairs < 1 || self.medium_pairs < 1 || self.low_pairs < 1 {
            return Err(Error::InvalidArgument("tier sizes must be positive".into()));
        }
        if self.min_words < 1 || self.min_words > self.max_words {
            return Err(Error::InvalidArgument(format!(
                "bad sentence length range {}..={}",
                self.min_words, self.max_words
            )));
        }
        // Unit strings are length >= 2 over units 1..num_units with distinct
        // neighbors; require comfortable headroom for injectivity.
        let non_sep = self.num_units.saturating_sub(1);
        if non_sep < 2 || non_sep * (non_sep - 1) < 4 * self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "unit space too small: {} units cannot host {} distinct words",
                self.num_units, self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub languages: Vec<(String, Tier)>,
    pub train: Vec<ParallelExample>,
    pub dev: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    pub num_units: usize,
    pub seed: u64,
}

impl CorpusBundle {
    pub fn tier_of(&self, tag: &str) -> Option<Tier> {
        self.languages
            .iter()
            .find(|(t, _)| t == tag)
            .map(|&(_, tier)| tier)
    }

    pub fn split(&self, name: &str) -> Result<&[ParallelExample]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut word = String::new();
        for _ in 0..syllables {
            word.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            word.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if used.insert(word.clone()) {
            return word;
        }
    }
}

fn fresh_unit_string(
    rng: &mut ChaCha8Rng,
    num_units: usize,
    used: &mut HashSet<Vec<u32>>,
) -> Vec<u32> {
    loop {
        let len = rng.gen_range(2..=5usize);
        let mut units = Vec::with_capacity(len);
        for _ in 0..len {
            loop {
                let u = rng.gen_range(1..num_units) as u32;
                if units.last() != Some(&u) {
                    units.push(u);
                    break;
                }
            }
        }
        if used.insert(units.clone()) {
            return units;
        }
    }
}

/// Deterministic corpus generation: same spec and seed, identical bundle.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<CorpusBundle> {
    spec.validate()?;
    let mut used_words: HashSet<String> = HashSet::new();

    // Target vocabulary and lexicon.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "corpus.target"));
    let target_words: Vec<String> = (0..spec.vocab_size)
        .map(|_| fresh_word(&mut rng, &mut used_words))
        .collect();
    let mut used_unit_strings: HashSet<Vec<u32>> = HashSet::new();
    let mut entries = BTreeMap::new();
    for word in &target_words {
        entries.insert(
            word.clone(),
            fresh_unit_string(&mut rng, spec.num_units, &mut used_unit_strings),
        );
    }
    let lexicon = Lexicon::new(entries)?;

    let mut all_words: Vec<String> = target_words.clone();
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();

    for (tag, tier) in &spec.languages {
        let mut lang_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("corpus.lang.{tag}")));
        // Bijective substitution: fresh surface forms, shuffled pairing.
        let mut source_words: Vec<String> = (0..spec.vocab_size)
            .map(|_| fresh_word(&mut lang_rng, &mut used_words))
            .collect();
        all_words.extend(source_words.iter().cloned());
        for i in (1..source_words.len()).rev() {
            source_words.swap(i, lang_rng.gen_range(0..=i));
        }
        let substitution: BTreeMap<&str, &str> = target_words
            .iter()
            .zip(&source_words)
            .map(|(t, s)| (t.as_str(), s.as_str()))
            .collect();

        let counts = [
            ("train", spec.train_pairs(*tier)),
            ("dev", spec.dev_pairs),
            ("test", spec.test_pairs),
        ];
        // Target sentences are unique across this language's splits, so
        // held-out data is genuinely unseen.
        let mut seen_sentences: HashSet<String> = HashSet::new();
        let total: usize = counts.iter().map(|(_, n)| n).sum();
        let mut attempts_left = 200 * total.max(1);
        for (split_name, count) in counts {
            let out = match split_name {
                "train" => &mut train,
                "dev" => &mut dev,
                _ => &mut test,
            };
            for idx in 0..count {
                let words: Vec<&str> = loop {
                    if attempts_left == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "cannot draw {total} distinct sentences for {tag}; \
                             widen the length range or vocabulary"
                        )));
                    }
                    attempts_left -= 1;
                    let len = lang_rng.gen_range(spec.min_words..=spec.max_words);
                    let candidate: Vec<&str> = (0..len)
                        .map(|_| target_words[lang_rng.gen_range(0..target_words.len())].as_str())
                        .collect();
                    if seen_sentences.insert(candidate.join(" ")) {
                        break candidate;
                    }
                };
                let target_units = lexicon.encode_sentence(&words)?;
                let reordered = spec.reorder.apply(&words);
                let source_text = reordered
                    .iter()
                    .map(|w| substitution[w])
                    .collect::<Vec<_>>()
                    .join(" ");
                out.push(ParallelExample {
                    example_id: format!("{tag}-{split_name}-{idx:05}"),
                    source_lang: tag.clone(),
                    source_text,
                    target_units,
                });
            }
        }
    }

    let vocab = Vocabulary::new(
        spec.languages.iter().map(|(t, _)| t.clone()),
        all_words,
        spec.num_units,
    )?;
    Ok(CorpusBundle {
        languages: spec.languages.clone(),
        train,
        dev,
        test,
        lexicon,
        vocab,
        num_units: spec.num_units,
        seed: spec.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            high_pairs: 30,
            medium_pairs: 10,
            low_pairs: 5,
            dev_pairs: 8,
            test_pairs: 8,
            vocab_size: 15,
            num_units: 20,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        assert_eq!(a.lexicon, b.lexicon);
        assert_eq!(a.vocab.hash(), b.vocab.hash());
        let c = generate_corpus(&CorpusSpec {
            seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_sizes_match_spec() {
        let spec = small_spec();
        let bundle = generate_corpus(&spec).unwrap();
        let count = |examples: &[ParallelExample], tag: &str| {
            examples.iter().filter(|e| e.source_lang == tag).count()
        };
        assert_eq!(count(&bundle.train, "qaa"), 30);
        assert_eq!(count(&bundle.train, "qab"), 10);
        assert_eq!(count(&bundle.train, "qac"), 5);
        for tag in ["qaa", "qab", "qac"] {
            assert_eq!(count(&bundle.dev, tag), 8);
            assert_eq!(count(&bundle.test, tag), 8);
        }
    }

    #[test]
    fn example_ids_are_unique_across_splits() {
        let bundle = generate_corpus(&small_spec()).unwrap();
        let mut ids = HashSet::new();
        for e in bundle
            .train
            .iter()
            .chain(&bundle.dev)
            .chain(&bundle.test)
        {
            assert!(ids.insert(&e.example_id), "duplicate id {}", e.example_id);
        }
    }

    #[test]
    fn target_units_are_collapsed_and_in_range() {
        let bundle = generate_corpus(&small_spec()).unwrap();
        for e in bundle.train.iter().chain(&bundle.dev).chain(&bundle.test) {
            assert!(e.target_units.is_collapsed());
            assert!(!e.target_units.is_empty());
            e.target_units.validate_range(bundle.num_units).unwrap();
        }
    }

    #[test]
    fn lexicon_rejects_invariant_violations() {
        let mk = |units: Vec<u32>| {
            let mut m = BTreeMap::new();
            m.insert("x".to_string(), units);
            Lexicon::new(m)
        };
        assert!(mk(vec![]).is_err());
        assert!(mk(vec![3, 0, 4]).is_err()); // separator inside a word
        assert!(mk(vec![3, 3]).is_err()); // adjacent repeat
        assert!(mk(vec![3, 4]).is_ok());
        let mut dup = BTreeMap::new();
        dup.insert("x".to_string(), vec![3u32, 4]);
        dup.insert("y".to_string(), vec![3u32, 4]);
        assert!(Lexicon::new(dup).is_err()); // not injective
    }

    #[test]
    fn encode_sentence_round_trips_through_inversion() {
        let bundle = generate_corpus(&small_spec()).unwrap();
        let inverted = bundle.lexicon.inverted();
        for e in bundle.train.iter().take(20) {
            let mut recovered = Vec::new();
            for segment in e
                .target_units
                .units()
                .split(|&u| u == SEPARATOR_UNIT)
            {
                recovered.push(inverted[&segment.to_vec()].clone());
            }
            // Re-encode and compare; the target sentence itself is not stored.
            let words: Vec<&str> = recovered.iter().map(|s| s.as_str()).collect();
            let re = bundle.lexicon.encode_sentence(&words).unwrap();
            assert_eq!(&re, &e.target_units);
        }
    }

    #[test]
    fn source_is_a_reordered_substitution_of_the_target() {
        let spec = CorpusSpec {
            reorder: Reorder::Reverse,
            ..small_spec()
        };
        let bundle = generate_corpus(&spec).unwrap();
        let inverted = bundle.lexicon.inverted();
        for tag in ["qaa", "qab", "qac"] {
            // Recover each target sentence from its units; aligning it with
            // the source under the reorder rule must yield one consistent
            // word bijection per language.
            let mut mapping: BTreeMap<String, String> = BTreeMap::new();
            for e in bundle
                .train
                .iter()
                .chain(&bundle.dev)
                .chain(&bundle.test)
                .filter(|e| e.source_lang == tag)
            {
                let target_words: Vec<String> = e
                    .target_units
                    .units()
                    .split(|&u| u == SEPARATOR_UNIT)
                    .map(|seg| inverted[&seg.to_vec()].clone())
                    .collect();
                let reordered = Reorder::Reverse.apply(&target_words);
                let source_words = e.source_words();
                assert_eq!(source_words.len(), reordered.len(), "{}", e.example_id);
                for (t, s) in reordered.iter().zip(&source_words) {
                    let prev = mapping.insert(t.clone(), s.to_string());
                    if let Some(prev) = prev {
                        assert_eq!(&prev, s, "inconsistent substitution for {t} in {tag}");
                    }
                }
            }
            let distinct: HashSet<&String> = mapping.values().collect();
            assert_eq!(distinct.len(), mapping.len(), "substitution not injective");
        }
    }

    #[test]
    fn unsatisfiable_unit_space_rejected() {
        let spec = CorpusSpec {
            num_units: 3,
            vocab_size: 50,
            ..small_spec()
        };
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn sentence_space_exhaustion_rejected() {
        let spec = CorpusSpec {
            vocab_size: 10,
            min_words: 1,
            max_words: 1,
            high_pairs: 200, // only 10 distinct 1-word sentences exist
            ..small_spec()
        };
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn reorder_rules() {
        let w = ["a", "b", "c"];
        assert_eq!(Reorder::Identity.apply(&w), vec!["a", "b", "c"]);
        assert_eq!(Reorder::Reverse.apply(&w), vec!["c", "b", "a"]);
        assert_eq!(Reorder::RotateLeft.apply(&w), vec!["b", "c", "a"]);
        assert_eq!(Reorder::RotateLeft.apply(&w[..1]), vec!["a"]);
    }
}
