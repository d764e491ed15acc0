//! Word-level vocabulary shared by every task of a run.
//!
//! Normalization rules: lowercase, punctuation split into its own tokens,
//! trailing punctuation dropped, single-space joins. Markers of the form
//! `<...>` (the sentinels) pass through as single tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const MASK: u32 = 3;
/// Id of `<sent_0>`; sentinel `i` is `SENT_BASE + i`.
pub const SENT_BASE: u32 = 4;
pub const DEFAULT_SENTINELS: usize = 8;
pub const DEFAULT_VOCAB_SIZE: usize = 512;

const FIXED_SPECIALS: [&str; 4] = ["<pad>", "<eos>", "<unk>", "<mask>"];

pub fn sentinel_token(i: usize) -> String {
    format!("<sent_{i}>")
}

fn is_marker(chunk: &str) -> bool {
    chunk.len() > 2 && chunk.starts_with('<') && chunk.ends_with('>')
}

/// Splits text into normalized word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out: Vec<String> = Vec::new();
    for chunk in lower.split_whitespace() {
        if is_marker(chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '\'' {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(core::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    while out.last().is_some_and(|t| is_punct(t)) {
        out.pop();
    }
    out
}

fn is_punct(token: &str) -> bool {
    !is_marker(token) && token.chars().all(|c| !c.is_alphanumeric() && c != '\'')
}

/// Canonical string form used for exact-match comparison.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Bijective token <-> id table. Specials occupy the lowest ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    sentinels: usize,
}

/// Builds a vocabulary ranked by frequency (ties broken lexicographically),
/// holding at most `max_size` entries including the specials.
pub fn build_vocab<'a, I>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    build_vocab_with(corpus, max_size, DEFAULT_SENTINELS)
}

pub fn build_vocab_with<'a, I>(corpus: I, max_size: usize, sentinels: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let n_special = FIXED_SPECIALS.len() + sentinels;
    if max_size <= n_special {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} leaves no room after {n_special} specials"
        )));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for tok in tokenize(line) {
            if is_marker(&tok) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    if lines == 0 || counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    // BTreeMap iteration is lexicographic, so a stable sort keeps ties ordered
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(max_size - n_special);
    let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..sentinels).map(sentinel_token));
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list, checking that
    /// the specials sit at the expected ids.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in FIXED_SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("token {i} must be `{s}`")));
            }
        }
        let mut sentinels = 0;
        while tokens.get(FIXED_SPECIALS.len() + sentinels).map(String::as_str)
            == Some(sentinel_token(sentinels).as_str())
        {
            sentinels += 1;
        }
        if tokens.len() <= FIXED_SPECIALS.len() + sentinels {
            return Err(Error::Config("vocabulary holds no word tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            index,
            sentinels,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentinel_count(&self) -> usize {
        self.sentinels
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn sentinel(&self, i: usize) -> Option<u32> {
        (i < self.sentinels).then_some(SENT_BASE + i as u32)
    }

    /// Stable 64-bit content hash; checkpoints and datasets carry it.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.tokens {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(b'\n');
        }
        crate::fnv1a64(&bytes)
    }

    pub fn encode(&self, text: &str, append_eos: bool) -> TokenSeq {
        let mut ids: Vec<u32> = tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect();
        if append_eos {
            ids.push(EOS);
        }
        TokenSeq { ids }
    }

    /// Joins tokens with single spaces. PAD, EOS and MASK are omitted;
    /// decoding stops at the first EOS.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words: Vec<&str> = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            match id {
                EOS => break,
                PAD | MASK => {}
                _ => words.push(tok),
            }
        }
        Ok(words.join(" "))
    }

    /// True when every normalized token of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        tokenize(text).iter().all(|t| self.index.contains_key(t))
    }
}

/// Token ids under one vocabulary: every id in range, at most one EOS and
/// nothing after it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        for &id in &ids {
            if id as usize >= vocab.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: vocab.len(),
                });
            }
        }
        if let Some(pos) = ids.iter().position(|&i| i == EOS) {
            if pos + 1 != ids.len() {
                return Err(Error::Config("tokens after EOS".into()));
            }
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }

    pub(crate) fn from_raw(ids: Vec<u32>) -> Self {
        Self { ids }
    }
}
