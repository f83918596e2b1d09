//! Shared data model and HotpotQA ingestion.
//!
//! Sentences get stable global ids `0..N^s` in (paragraph, sentence) order.
//! Text is whitespace-normalized on ingestion; sentences that normalize to
//! the empty string are dropped but keep their original index in
//! `source_index`, which is what supporting-fact annotations refer to.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IrcError, Result};
use crate::text::{char_slice, find_char_offset, normalize_whitespace};

pub const NUM_LABELS: usize = 4;

/// Answer label candidates. The order fixes the index of each label score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerLabel {
    Yes,
    No,
    Span,
    #[serde(rename = "CNA")]
    Cna,
}

impl AnswerLabel {
    pub const ALL: [AnswerLabel; NUM_LABELS] = [Self::Yes, Self::No, Self::Span, Self::Cna];

    pub fn index(self) -> usize {
        match self {
            Self::Yes => 0,
            Self::No => 1,
            Self::Span => 2,
            Self::Cna => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Character range `[start, end)` inside one sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRange {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTarget {
    pub label: AnswerLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_char_range: Option<SpanRange>,
}

impl AnswerTarget {
    pub fn label(label: AnswerLabel) -> Self {
        debug_assert_ne!(label, AnswerLabel::Span);
        Self { label, span_text: None, span_char_range: None }
    }

    pub fn cna() -> Self {
        Self::label(AnswerLabel::Cna)
    }

    pub fn span(text: impl AsRef<str>) -> Self {
        Self {
            label: AnswerLabel::Span,
            span_text: Some(normalize_whitespace(text.as_ref())),
            span_char_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub paragraph_title: String,
    pub text: String,
    /// Index of the sentence in the dataset's original paragraph list.
    pub source_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub title: String,
    pub sentences: Vec<Sentence>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Passage {
    paragraphs: Vec<Paragraph>,
}

#[derive(Serialize, Deserialize)]
struct PassageRepr {
    paragraphs: Vec<Paragraph>,
    sentence_count: usize,
    paragraph_count: usize,
}

impl Serialize for Passage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PassageRepr {
            paragraphs: self.paragraphs.clone(),
            sentence_count: self.sentence_count(),
            paragraph_count: self.paragraph_count(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Passage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PassageRepr::deserialize(d)?;
        let passage = Passage { paragraphs: repr.paragraphs };
        if passage.sentence_count() != repr.sentence_count
            || passage.paragraph_count() != repr.paragraph_count
        {
            return Err(serde::de::Error::custom("passage counts disagree with paragraphs"));
        }
        let contiguous = passage.sentences().enumerate().all(|(i, s)| s.id == i);
        if !contiguous {
            return Err(serde::de::Error::custom("sentence ids are not 0..N in order"));
        }
        Ok(passage)
    }
}

impl Passage {
    /// Builds a passage from raw `(title, sentences)` pairs, normalizing text
    /// and assigning global ids.
    pub fn from_raw<T, S>(paragraphs: impl IntoIterator<Item = (T, Vec<S>)>) -> Self
    where
        T: AsRef<str>,
        S: AsRef<str>,
    {
        let mut next_id = 0;
        let paragraphs = paragraphs
            .into_iter()
            .map(|(title, sentences)| {
                let title = title.as_ref().to_string();
                let sentences = sentences
                    .iter()
                    .enumerate()
                    .filter_map(|(source_index, raw)| {
                        let text = normalize_whitespace(raw.as_ref());
                        if text.is_empty() {
                            return None;
                        }
                        let s = Sentence { id: next_id, paragraph_title: title.clone(), text, source_index };
                        next_id += 1;
                        Some(s)
                    })
                    .collect();
                Paragraph { title, sentences }
            })
            .collect();
        Passage { paragraphs }
    }

    /// Re-indexes already-built paragraphs.
    pub fn from_paragraphs(paragraphs: Vec<Paragraph>) -> Self {
        let mut next_id = 0;
        let paragraphs = paragraphs
            .into_iter()
            .map(|mut p| {
                for s in &mut p.sentences {
                    s.id = next_id;
                    s.paragraph_title = p.title.clone();
                    next_id += 1;
                }
                p
            })
            .collect();
        Passage { paragraphs }
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn paragraph_count(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn sentence_count(&self) -> usize {
        self.paragraphs.iter().map(|p| p.sentences.len()).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.paragraphs.iter().flat_map(|p| p.sentences.iter())
    }

    pub fn sentence(&self, id: usize) -> Option<&Sentence> {
        self.sentences().nth(id)
    }

    /// Global id of the sentence addressed by a supporting-fact annotation.
    pub fn resolve(&self, title: &str, source_index: usize) -> Option<usize> {
        self.sentences()
            .find(|s| s.paragraph_title == title && s.source_index == source_index)
            .map(|s| s.id)
    }

    pub fn paragraph_index(&self, title: &str) -> Option<usize> {
        self.paragraphs.iter().position(|p| p.title == title)
    }

    /// (paragraph index, sentence index within paragraph) of a global id.
    pub fn locate(&self, id: usize) -> Option<(usize, usize)> {
        let mut base = 0;
        for (pi, p) in self.paragraphs.iter().enumerate() {
            if id < base + p.sentences.len() {
                return Some((pi, id - base));
            }
            base += p.sentences.len();
        }
        None
    }

    /// Sub-passage of the given paragraphs (in the order given), re-indexed.
    /// Returns the mapping from new ids to ids in `self`.
    pub fn select_paragraphs(&self, indices: &[usize]) -> (Passage, Vec<usize>) {
        let mut mapping = Vec::new();
        let picked = indices
            .iter()
            .map(|&i| {
                let p = &self.paragraphs[i];
                mapping.extend(p.sentences.iter().map(|s| s.id));
                p.clone()
            })
            .collect();
        (Passage::from_paragraphs(picked), mapping)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportingFact {
    pub title: String,
    pub sentence_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleFlag {
    UnresolvableSf,
    SpanUnalignable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub query: String,
    pub passage: Passage,
    pub gold_answer: AnswerTarget,
    pub gold_rationale: BTreeSet<usize>,
    pub gold_paragraph_titles: BTreeSet<String>,
    /// Supporting-fact annotations as given by the dataset.
    #[serde(default)]
    pub supporting_facts: Vec<SupportingFact>,
    /// Number of annotated supporting facts missing from `passage`.
    #[serde(default)]
    pub absent_gold_count: usize,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<ExampleFlag>,
}

impl Example {
    pub fn has_flag(&self, flag: ExampleFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// Resolves the supporting-fact annotations against the current passage.
    /// Returns the resolved ids and the number of annotations that failed.
    pub fn resolve_supporting_facts(&self) -> (BTreeSet<usize>, usize) {
        let mut ids = BTreeSet::new();
        let mut missing = 0;
        for sf in &self.supporting_facts {
            match self.passage.resolve(&sf.title, sf.sentence_index) {
                Some(id) => {
                    ids.insert(id);
                }
                None => missing += 1,
            }
        }
        (ids, missing)
    }

    /// Sentences whose text contains the gold answer span (`S_A`). Empty for
    /// non-span answers.
    pub fn answer_sentences(&self) -> BTreeSet<usize> {
        match (&self.gold_answer.label, &self.gold_answer.span_text) {
            (AnswerLabel::Span, Some(text)) if !text.is_empty() => self
                .passage
                .sentences()
                .filter(|s| s.text.contains(text.as_str()))
                .map(|s| s.id)
                .collect(),
            _ => BTreeSet::new(),
        }
    }

    /// Copy of this example restricted to the given paragraphs, with
    /// rationale and span location re-mapped to the new ids. A span whose
    /// sentence was dropped is re-aligned inside the kept paragraphs.
    pub fn restrict_to_paragraphs(&self, indices: &[usize]) -> Example {
        let (passage, mapping) = self.passage.select_paragraphs(indices);
        let remap = |old: usize| mapping.iter().position(|&m| m == old);
        let gold_rationale = self.gold_rationale.iter().filter_map(|&id| remap(id)).collect();
        let mut gold_answer = self.gold_answer.clone();
        gold_answer.span_char_range = gold_answer.span_char_range.and_then(|r| {
            remap(r.sentence_id).map(|sentence_id| SpanRange { sentence_id, ..r })
        });
        let lost_span = gold_answer.label == AnswerLabel::Span && gold_answer.span_char_range.is_none();
        let mut out = Example { passage, gold_rationale, gold_answer, ..self.clone() };
        if lost_span {
            out.gold_answer = align_answer_span(&out);
        }
        out
    }

    /// Indices of the gold paragraphs present in the passage, in passage order.
    pub fn gold_paragraph_indices(&self) -> Vec<usize> {
        self.passage
            .paragraphs()
            .iter()
            .enumerate()
            .filter(|(_, p)| self.gold_paragraph_titles.contains(&p.title))
            .map(|(i, _)| i)
            .collect()
    }

    /// The example restricted to its gold paragraphs, or `None` when the
    /// passage holds fewer than one of them.
    pub fn gold_pair_view(&self) -> Option<Example> {
        let idx = self.gold_paragraph_indices();
        if idx.is_empty() {
            return None;
        }
        Some(self.restrict_to_paragraphs(&idx))
    }
}

/// Locates a span answer: first occurrence inside a gold-rationale sentence
/// (searched in id order), else anywhere in the passage. A returned target
/// without `span_char_range` means the span could not be aligned.
pub fn align_answer_span(example: &Example) -> AnswerTarget {
    let mut target = example.gold_answer.clone();
    let Some(text) = target.span_text.as_deref().map(normalize_whitespace) else {
        return target;
    };
    if target.label != AnswerLabel::Span {
        return target;
    }
    let locate = |s: &Sentence| {
        find_char_offset(&s.text, &text).map(|(start, end)| SpanRange { sentence_id: s.id, start, end })
    };
    let in_gold = example.passage.sentences().filter(|s| example.gold_rationale.contains(&s.id)).find_map(locate);
    target.span_char_range = in_gold.or_else(|| example.passage.sentences().find_map(locate));
    target.span_text = Some(text);
    target
}

/// Text addressed by a span range.
pub fn span_text_at(passage: &Passage, range: &SpanRange) -> Option<String> {
    passage.sentence(range.sentence_id).map(|s| char_slice(&s.text, range.start, range.end))
}

#[derive(Debug, Deserialize, Serialize)]
struct HotpotRecord {
    #[serde(rename = "_id")]
    id: String,
    question: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    supporting_facts: Vec<(String, usize)>,
    context: Vec<(String, Vec<String>)>,
}

fn label_for_answer(answer: &str) -> AnswerTarget {
    match normalize_whitespace(answer).to_lowercase().as_str() {
        "yes" => AnswerTarget::label(AnswerLabel::Yes),
        "no" => AnswerTarget::label(AnswerLabel::No),
        _ => AnswerTarget::span(answer),
    }
}

fn example_from_record(record: HotpotRecord) -> Example {
    let passage = Passage::from_raw(record.context);
    let supporting_facts: Vec<SupportingFact> = record
        .supporting_facts
        .into_iter()
        .map(|(title, sentence_index)| SupportingFact { title, sentence_index })
        .collect();
    let gold_paragraph_titles = supporting_facts.iter().map(|sf| sf.title.clone()).collect();
    let mut example = Example {
        id: record.id,
        query: normalize_whitespace(&record.question),
        passage,
        gold_answer: label_for_answer(record.answer.as_deref().unwrap_or("")),
        gold_rationale: BTreeSet::new(),
        gold_paragraph_titles,
        supporting_facts,
        absent_gold_count: 0,
        flags: BTreeSet::new(),
    };
    let (resolved, missing) = example.resolve_supporting_facts();
    if missing > 0 {
        log::warn!("{}: {missing} supporting fact(s) reference missing sentences", example.id);
        example.flags.insert(ExampleFlag::UnresolvableSf);
    }
    example.gold_rationale = resolved;
    if example.gold_answer.label == AnswerLabel::Span {
        example.gold_answer = align_answer_span(&example);
        if example.gold_answer.span_char_range.is_none() {
            example.flags.insert(ExampleFlag::SpanUnalignable);
        }
    }
    example
}

/// Parses a HotpotQA-format JSON array.
pub fn parse_hotpot<R: Read>(reader: R, context: &str) -> Result<Vec<Example>> {
    let records: Vec<HotpotRecord> =
        serde_json::from_reader(reader).map_err(|e| IrcError::json(context, e))?;
    Ok(records.into_iter().map(example_from_record).collect())
}

pub fn load_hotpot_file(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| IrcError::io(path, e))?;
    parse_hotpot(BufReader::new(file), &path.display().to_string())
}

/// Writes examples back in HotpotQA format (answer strings, `[title, index]`
/// supporting facts). A CNA answer is written as `"noanswer"`.
pub fn write_hotpot_file(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let records: Vec<HotpotRecord> = examples
        .iter()
        .map(|ex| {
            let answer = match ex.gold_answer.label {
                AnswerLabel::Yes => "yes".to_string(),
                AnswerLabel::No => "no".to_string(),
                AnswerLabel::Cna => crate::evaluator::CNA_ANSWER.to_string(),
                AnswerLabel::Span => ex.gold_answer.span_text.clone().unwrap_or_default(),
            };
            let supporting_facts = ex
                .gold_rationale
                .iter()
                .filter_map(|&id| ex.passage.sentence(id))
                .map(|s| (s.paragraph_title.clone(), s.source_index))
                .collect();
            let context = ex
                .passage
                .paragraphs()
                .iter()
                .map(|p| (p.title.clone(), p.sentences.iter().map(|s| s.text.clone()).collect()))
                .collect();
            HotpotRecord { id: ex.id.clone(), question: ex.query.clone(), answer: Some(answer), supporting_facts, context }
        })
        .collect();
    let file = File::create(path).map_err(|e| IrcError::io(path, e))?;
    serde_json::to_writer(BufWriter::new(file), &records).map_err(|e| IrcError::json(path.display().to_string(), e))
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| IrcError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| IrcError::json(&ex.id, e))?;
        w.write_all(b"\n").map_err(|e| IrcError::io(path, e))?;
    }
    w.flush().map_err(|e| IrcError::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| IrcError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IrcError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line)
            .map_err(|e| IrcError::json(format!("{}:{}", path.display(), n + 1), e))?;
        out.push(ex);
    }
    Ok(out)
}

/// Loads either a HotpotQA JSON array or the JSON Lines dataset format.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let mut head = [0u8; 64];
    let n = File::open(path).and_then(|mut f| f.read(&mut head)).map_err(|e| IrcError::io(path, e))?;
    let first = head[..n].iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'[') {
        load_hotpot_file(path)
    } else {
        read_jsonl(path)
    }
}
