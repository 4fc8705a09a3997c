//! Whitespace/punctuation tokenizer and corpus-built vocabulary.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const PAD_ID: u32 = 3;
/// Number of reserved ids preceding corpus tokens.
pub const RESERVED: usize = 4;

const RESERVED_SURFACE: [&str; RESERVED] = ["<bos>", "<eos>", "<unk>", "<pad>"];

/// Injective token ↔ id mapping with the special tokens at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from corpus tokens (no reserved entries). Duplicates are an error.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_SURFACE.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::Invalid(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Collects every token in `texts`, ordered by descending frequency and
    /// then lexicographically.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_words(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, n)| *n >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t)).expect("corpus tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Corpus tokens, one per line; line `n` (0-based) holds id `n + RESERVED`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens[RESERVED..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Token ids with aligned surface strings and a template (BOS/EOS) mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub surface: Vec<String>,
    pub template: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-template positions.
    pub fn content_len(&self) -> usize {
        self.template.iter().filter(|t| !**t).count()
    }

    /// Joins the non-template surface tokens with single spaces.
    pub fn detokenize(&self) -> String {
        self.surface
            .iter()
            .zip(&self.template)
            .filter(|(_, t)| !**t)
            .map(|(s, _)| s.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercases and splits into alphanumeric runs and single punctuation marks.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() && !ch.is_control() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Tokenizes `text`, wrapping it in BOS/EOS and truncating content so the
/// whole sequence fits in `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::Config(format!("max sequence length {max_len} < 3")));
    }
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::Tokenize(format!("no tokens in {text:?}")));
    }
    let keep = words.len().min(max_len - 2);
    let mut seq = TokenSequence {
        ids: Vec::with_capacity(keep + 2),
        surface: Vec::with_capacity(keep + 2),
        template: Vec::with_capacity(keep + 2),
    };
    seq.ids.push(BOS_ID);
    seq.surface.push(RESERVED_SURFACE[BOS_ID as usize].to_string());
    seq.template.push(true);
    for w in words.into_iter().take(keep) {
        seq.ids.push(vocab.id(&w));
        seq.surface.push(w);
        seq.template.push(false);
    }
    seq.ids.push(EOS_ID);
    seq.surface.push(RESERVED_SURFACE[EOS_ID as usize].to_string());
    seq.template.push(true);
    Ok(seq)
}
