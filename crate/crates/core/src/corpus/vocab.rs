//! Joint token vocabulary: specials, language tags, text words, unit tokens.
//!
//! ID layout is contiguous and ordered: specials < language tags < text
//! tokens < unit tokens. Checkpoints embed `hash()` so a model is never
//! silently applied to a different token space.

use crate::error::{Error, Result};
use crate::units::UnitSequence;
use std::collections::HashMap;
use std::ops::Range;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Lang,
    Text,
    Unit,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    langs: Vec<String>,
    words: Vec<String>,
    num_units: usize,
    lang_index: HashMap<String, u32>,
    word_index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Tags and words are deduplicated and sorted, so construction is
    /// order-insensitive and the hash is canonical.
    pub fn new(
        langs: impl IntoIterator<Item = String>,
        words: impl IntoIterator<Item = String>,
        num_units: usize,
    ) -> Result<Self> {
        let mut langs: Vec<String> = langs.into_iter().collect();
        langs.sort();
        langs.dedup();
        let mut words: Vec<String> = words.into_iter().collect();
        words.sort();
        words.dedup();
        if langs.is_empty() {
            return Err(Error::InvalidArgument(
                "vocabulary needs at least one language tag".into(),
            ));
        }
        if num_units == 0 {
            return Err(Error::InvalidArgument(
                "vocabulary needs at least one unit".into(),
            ));
        }
        let lang_base = NUM_SPECIALS;
        let word_base = lang_base + langs.len() as u32;
        let lang_index = langs
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), lang_base + i as u32))
            .collect();
        let word_index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), word_base + i as u32))
            .collect();
        Ok(Vocabulary {
            langs,
            words,
            num_units,
            lang_index,
            word_index,
        })
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS as usize + self.langs.len() + self.words.len() + self.num_units
    }

    pub fn num_units(&self) -> usize {
        self.num_units
    }

    pub fn langs(&self) -> &[String] {
        &self.langs
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn lang_id(&self, tag: &str) -> Option<u32> {
        self.lang_index.get(tag).copied()
    }

    pub fn text_id(&self, word: &str) -> Option<u32> {
        self.word_index.get(word).copied()
    }

    pub fn lang_range(&self) -> Range<u32> {
        NUM_SPECIALS..NUM_SPECIALS + self.langs.len() as u32
    }

    pub fn text_range(&self) -> Range<u32> {
        let start = self.lang_range().end;
        start..start + self.words.len() as u32
    }

    pub fn unit_range(&self) -> Range<u32> {
        let start = self.text_range().end;
        start..start + self.num_units as u32
    }

    /// Token ID for unit `unit`; the caller guarantees unit < num_units.
    pub fn unit_token(&self, unit: u32) -> u32 {
        debug_assert!((unit as usize) < self.num_units);
        self.unit_range().start + unit
    }

    /// Unit ID for a token in the unit range, None otherwise.
    pub fn unit_of_token(&self, token: u32) -> Option<u32> {
        let r = self.unit_range();
        r.contains(&token).then(|| token - r.start)
    }

    pub fn token_kind(&self, token: u32) -> Option<TokenKind> {
        if token < NUM_SPECIALS {
            Some(TokenKind::Special)
        } else if self.lang_range().contains(&token) {
            Some(TokenKind::Lang)
        } else if self.text_range().contains(&token) {
            Some(TokenKind::Text)
        } else if self.unit_range().contains(&token) {
            Some(TokenKind::Unit)
        } else {
            None
        }
    }

    /// Human-readable form of any token, for diagnostics.
    pub fn describe(&self, token: u32) -> String {
        match token {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            MASK => "<mask>".into(),
            UNK => "<unk>".into(),
            t if self.lang_range().contains(&t) => {
                format!("<{}>", self.langs[(t - self.lang_range().start) as usize])
            }
            t if self.text_range().contains(&t) => {
                self.words[(t - self.text_range().start) as usize].clone()
            }
            t if self.unit_range().contains(&t) => {
                format!("<u{}>", t - self.unit_range().start)
            }
            t => format!("<invalid:{t}>"),
        }
    }

    /// `[lang tag] + word tokens + [eos]`; unknown words map to unk.
    /// Text is lowercased and split on whitespace.
    pub fn tokenize(&self, text: &str, lang: &str) -> Result<Vec<u32>> {
        let tag = self.lang_id(lang).ok_or_else(|| {
            Error::InvalidArgument(format!("language {lang} not in vocabulary"))
        })?;
        let lowered = text.to_lowercase();
        let mut out = vec![tag];
        for word in lowered.split_whitespace() {
            out.push(self.text_id(word).unwrap_or(UNK));
        }
        out.push(EOS);
        Ok(out)
    }

    /// Unit sequence as decoder target tokens (no bos/eos framing).
    pub fn unit_tokens(&self, units: &UnitSequence) -> Result<Vec<u32>> {
        units.validate_range(self.num_units)?;
        Ok(units.units().iter().map(|&u| self.unit_token(u)).collect())
    }

    /// FNV-1a over the canonical content; stable across runs and platforms.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(b"langs");
        for t in &self.langs {
            eat(t.as_bytes());
            eat(&[0]);
        }
        eat(b"words");
        for w in &self.words {
            eat(w.as_bytes());
            eat(&[0]);
        }
        eat(b"units");
        eat(&(self.num_units as u64).to_le_bytes());
        h
    }
}
