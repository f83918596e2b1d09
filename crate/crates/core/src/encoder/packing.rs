//! Input packing for the two modules.
//!
//! Extraction: `[CLS_Q] query [SEP_Q] ([CLS_S] sentence [SEP_S])*`.
//! Answer: `[CLS] query [SEP] rationale [SEP]`.

use serde::{Deserialize, Serialize};

use super::tokenizer::{Token, Tokenizer, CLS, CLS_Q, CLS_S, SEP, SEP_Q, SEP_S};
use crate::corpus::Sentence;
use crate::error::{IrcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingLimits {
    pub max_sequence_length: usize,
    pub max_sentence_length: usize,
    pub max_sentences: usize,
    pub max_query_length: usize,
}

impl Default for PackingLimits {
    fn default() -> Self {
        Self { max_sequence_length: 512, max_sentence_length: 160, max_sentences: 20, max_query_length: 64 }
    }
}

/// Where a packed token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Marker,
    Query,
    /// Sentence token covering characters `[start, end)` of the sentence text.
    Sentence { id: usize, start: usize, end: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedInput {
    pub token_ids: Vec<u32>,
    /// Extraction packing: position of each sentence's `[CLS_S]`.
    /// Answer packing: `[0]`, the `[CLS]` position.
    pub marker_positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Sentences that contributed at least one token, in packing order.
    pub sentence_ids: Vec<usize>,
    /// Text of every packed sentence, for mapping token spans back to strings.
    pub texts: Vec<(usize, String)>,
    pub truncated: bool,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn text_of(&self, sentence_id: usize) -> Option<&str> {
        self.texts.iter().find(|(id, _)| *id == sentence_id).map(|(_, t)| t.as_str())
    }

    /// Positions of the tokens that belong to sentence `id`.
    pub fn sentence_positions(&self, id: usize) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Segment::Sentence { id: sid, .. } if *sid == id))
            .map(|(i, _)| i)
            .collect()
    }

    /// True when position `i` holds a passage (sentence) token.
    pub fn is_sentence_token(&self, i: usize) -> bool {
        matches!(self.segments.get(i), Some(Segment::Sentence { .. }))
    }
}

fn query_tokens(tok: &Tokenizer, limits: &PackingLimits, query: &str) -> (Vec<Token>, bool) {
    let mut q = tok.tokenize(query);
    let cut = q.len() > limits.max_query_length;
    if cut {
        log::debug!("query truncated from {} to {} tokens", q.len(), limits.max_query_length);
        q.truncate(limits.max_query_length);
    }
    (q, cut)
}

pub fn pack_extraction_input(
    tok: &Tokenizer,
    limits: &PackingLimits,
    query: &str,
    sentences: &[Sentence],
) -> Result<PackedInput> {
    if sentences.is_empty() {
        return Err(IrcError::InvalidInput("extraction input needs at least one sentence".into()));
    }
    let (q, mut truncated) = query_tokens(tok, limits, query);
    if sentences.len() > limits.max_sentences {
        log::debug!("{} sentences supplied, packing the first {}", sentences.len(), limits.max_sentences);
        truncated = true;
    }
    let mut bodies: Vec<(&Sentence, Vec<Token>)> = sentences
        .iter()
        .take(limits.max_sentences)
        .map(|s| {
            let mut t = tok.tokenize(&s.text);
            if t.len() > limits.max_sentence_length {
                t.truncate(limits.max_sentence_length);
                truncated = true;
            }
            (s, t)
        })
        .collect();

    // Drop whole trailing sentences first; truncate only if none fits.
    let budget = limits.max_sequence_length.saturating_sub(2 + q.len());
    let mut used = 0;
    let mut keep = 0;
    for (_, t) in &bodies {
        if used + t.len() + 2 > budget {
            break;
        }
        used += t.len() + 2;
        keep += 1;
    }
    if keep < bodies.len() {
        truncated = true;
        if keep == 0 {
            let room = budget.saturating_sub(2);
            if room == 0 {
                return Err(IrcError::InvalidInput("query leaves no room for sentences".into()));
            }
            bodies[0].1.truncate(room);
            keep = 1;
        }
        bodies.truncate(keep);
    }

    let mut packed = PackedInput {
        token_ids: Vec::new(),
        marker_positions: Vec::new(),
        segments: Vec::new(),
        sentence_ids: Vec::new(),
        texts: Vec::new(),
        truncated,
    };
    packed.push_marker(CLS_Q);
    packed.push_query(&q);
    packed.push_marker(SEP_Q);
    for (s, t) in bodies {
        packed.marker_positions.push(packed.len());
        packed.push_marker(CLS_S);
        packed.push_sentence(s, &t);
        packed.push_marker(SEP_S);
    }
    Ok(packed)
}

pub fn pack_answer_input(
    tok: &Tokenizer,
    limits: &PackingLimits,
    query: &str,
    rationale: &[Sentence],
) -> PackedInput {
    let (q, mut truncated) = query_tokens(tok, limits, query);
    let mut ordered: Vec<&Sentence> = rationale.iter().collect();
    ordered.sort_by_key(|s| s.id);
    ordered.dedup_by_key(|s| s.id);

    let mut packed = PackedInput {
        token_ids: Vec::new(),
        marker_positions: vec![0],
        segments: Vec::new(),
        sentence_ids: Vec::new(),
        texts: Vec::new(),
        truncated: false,
    };
    packed.push_marker(CLS);
    packed.push_query(&q);
    packed.push_marker(SEP);
    let mut room = limits.max_sequence_length.saturating_sub(packed.len() + 1);
    for s in ordered {
        if room == 0 {
            truncated = true;
            break;
        }
        let mut t = tok.tokenize(&s.text);
        if t.len() > room {
            t.truncate(room);
            truncated = true;
        }
        room -= t.len();
        if !t.is_empty() {
            packed.push_sentence(s, &t);
        }
    }
    packed.push_marker(SEP);
    if truncated {
        log::debug!("answer input truncated to {} tokens", packed.len());
    }
    packed.truncated = truncated;
    packed
}

impl PackedInput {
    fn push_marker(&mut self, id: u32) {
        self.token_ids.push(id);
        self.segments.push(Segment::Marker);
    }

    fn push_query(&mut self, q: &[Token]) {
        for t in q {
            self.token_ids.push(t.id);
            self.segments.push(Segment::Query);
        }
    }

    fn push_sentence(&mut self, s: &Sentence, body: &[Token]) {
        for t in body {
            self.token_ids.push(t.id);
            self.segments.push(Segment::Sentence { id: s.id, start: t.start, end: t.end });
        }
        self.sentence_ids.push(s.id);
        self.texts.push((s.id, s.text.clone()));
    }
}
