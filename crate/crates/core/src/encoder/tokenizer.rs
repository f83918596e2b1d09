//! Lowercase word-level tokenizer with a character-level fallback.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const CLS_Q: u32 = 4;
pub const SEP_Q: u32 = 5;
pub const CLS_S: u32 = 6;
pub const SEP_S: u32 = 7;

const SPECIALS: [&str; 8] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[CLS_Q]", "[SEP_Q]", "[CLS_S]", "[SEP_S]"];

/// One token with the character range `[start, end)` it covers in the source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}

/// Splits text into words (alphanumeric runs) and single punctuation marks,
/// returning each lowercased piece with its character range.
pub fn pre_tokenize(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if word.is_empty() {
                word_start = pos;
            }
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push((std::mem::take(&mut word), word_start, pos));
            }
            if !c.is_whitespace() {
                out.push((c.to_lowercase().collect(), pos, pos + 1));
            }
        }
        pos += 1;
    }
    if !word.is_empty() {
        out.push((word, word_start, pos));
    }
    out
}

impl Tokenizer {
    /// Builds the vocabulary from a corpus: special tokens, then words seen at
    /// least `min_count` times (most frequent first), then every character seen.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<String, ()> = BTreeMap::new();
        for text in texts {
            for (w, _, _) in pre_tokenize(text) {
                for c in w.chars() {
                    chars.insert(c.to_string(), ());
                }
                *words.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = words.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for t in ranked.into_iter().map(|(w, _)| w).chain(chars.into_keys()) {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
        Self::from(tokens)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Every returned id is `< vocab_size()`: unknown words fall back to
    /// their characters, unknown characters to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        for (w, start, end) in pre_tokenize(text) {
            if let Some(id) = self.id(&w) {
                out.push(Token { id, start, end });
                continue;
            }
            // Lowercasing may change the character count; fall back to the
            // source characters so offsets stay exact.
            let source: Vec<char> = text.chars().skip(start).take(end - start).collect();
            for (k, c) in source.into_iter().enumerate() {
                let lc: String = c.to_lowercase().collect();
                let id = self.id(&lc).unwrap_or(UNK);
                out.push(Token { id, start: start + k, end: start + k + 1 });
            }
        }
        out
    }
}
