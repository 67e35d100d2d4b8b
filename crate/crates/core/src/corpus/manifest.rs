//! Corpus artifacts on disk: manifests, lexicon, and the full bundle layout.
//!
//! Manifests are UTF-8, LF-terminated TSV with columns
//! `id<TAB>src_lang<TAB>src_text<TAB>units`, units space-separated decimal.

use super::{CorpusBundle, Lexicon, ParallelExample, Tier, Vocabulary};
use crate::error::{Error, Result};
use crate::units::UnitSequence;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

fn manifest_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn write_manifest<P: AsRef<Path>>(examples: &[ParallelExample], path: P) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        let units = e
            .target_units
            .units()
            .iter()
            .map(|u| u.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.example_id, e.source_lang, e.source_text, units
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a manifest. Unit fields with adjacent repeats are accepted and
/// flagged uncollapsed; consumers that require collapsed input validate.
pub fn read_manifest<P: AsRef<Path>>(path: P) -> Result<Vec<ParallelExample>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(manifest_err(
                path,
                line_no,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (id, lang, text, units_field) = (fields[0], fields[1], fields[2], fields[3]);
        if id.is_empty() {
            return Err(manifest_err(path, line_no, "empty example id"));
        }
        if lang.is_empty() {
            return Err(manifest_err(path, line_no, "empty language tag"));
        }
        if text.trim().is_empty() {
            return Err(manifest_err(path, line_no, "empty source text"));
        }
        let mut units = Vec::new();
        for tok in units_field.split_whitespace() {
            let u: u32 = tok.parse().map_err(|_| {
                manifest_err(path, line_no, format!("bad unit id {tok:?}"))
            })?;
            units.push(u);
        }
        let target_units = match UnitSequence::new_collapsed(units.clone()) {
            Ok(s) => s,
            Err(_) => UnitSequence::new_raw(units),
        };
        examples.push(ParallelExample {
            example_id: id.to_string(),
            source_lang: lang.to_string(),
            source_text: text.to_string(),
            target_units,
        });
    }
    Ok(examples)
}

/// Lexicon TSV: `word<TAB>units`, one entry per line, sorted by word.
pub fn write_lexicon<P: AsRef<Path>>(lexicon: &Lexicon, path: P) -> Result<()> {
    let mut out = String::new();
    for (word, units) in lexicon.entries() {
        let units = units
            .iter()
            .map(|u| u.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!("{word}\t{units}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_lexicon<P: AsRef<Path>>(path: P) -> Result<Lexicon> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path)?;
    let mut entries = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let (word, units_field) = line.split_once('\t').ok_or_else(|| {
            manifest_err(path, line_no, "expected `word<TAB>units`")
        })?;
        let mut units = Vec::new();
        for tok in units_field.split_whitespace() {
            let u: u32 = tok.parse().map_err(|_| {
                manifest_err(path, line_no, format!("bad unit id {tok:?}"))
            })?;
            units.push(u);
        }
        if entries.insert(word.to_string(), units).is_some() {
            return Err(manifest_err(path, line_no, format!("duplicate word {word}")));
        }
    }
    Lexicon::new(entries)
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    num_units: usize,
    languages: Vec<(String, Tier)>,
}

/// On-disk bundle layout: meta.json, vocab.txt (one word per line),
/// lexicon.tsv, and {train,dev,test}.tsv manifests.
pub fn save_bundle<P: AsRef<Path>>(bundle: &CorpusBundle, dir: P) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let meta = CorpusMeta {
        seed: bundle.seed,
        num_units: bundle.num_units,
        languages: bundle.languages.clone(),
    };
    let mut f = std::fs::File::create(dir.join("meta.json"))?;
    serde_json::to_writer_pretty(&mut f, &meta)
        .map_err(|e| Error::Config(format!("cannot write meta.json: {e}")))?;
    f.write_all(b"\n")?;
    let mut words = String::new();
    for w in bundle.vocab.words() {
        words.push_str(w);
        words.push('\n');
    }
    std::fs::write(dir.join("vocab.txt"), words)?;
    write_lexicon(&bundle.lexicon, dir.join("lexicon.tsv"))?;
    write_manifest(&bundle.train, dir.join("train.tsv"))?;
    write_manifest(&bundle.dev, dir.join("dev.tsv"))?;
    write_manifest(&bundle.test, dir.join("test.tsv"))?;
    Ok(())
}

pub fn load_bundle<P: AsRef<Path>>(dir: P) -> Result<CorpusBundle> {
    let dir = dir.as_ref();
    let meta: CorpusMeta = serde_json::from_str(
        &std::fs::read_to_string(dir.join("meta.json"))?,
    )
    .map_err(|e| Error::Config(format!("{}: {e}", dir.join("meta.json").display())))?;
    let words: Vec<String> = std::fs::read_to_string(dir.join("vocab.txt"))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect();
    let lexicon = read_lexicon(dir.join("lexicon.tsv"))?;
    let vocab = Vocabulary::new(
        meta.languages.iter().map(|(t, _)| t.clone()),
        words,
        meta.num_units,
    )?;
    Ok(CorpusBundle {
        languages: meta.languages,
        train: read_manifest(dir.join("train.tsv"))?,
        dev: read_manifest(dir.join("dev.tsv"))?,
        test: read_manifest(dir.join("test.tsv"))?,
        lexicon,
        vocab,
        num_units: meta.num_units,
        seed: meta.seed,
    })
}
