//! Fullwiki+CNA construction and negative-sampled CNA augmentation.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{align_answer_span, AnswerLabel, AnswerTarget, Example, ExampleFlag, Paragraph, Passage};
use crate::seed;

/// Bucket of an example by number of annotated supporting facts absent from
/// its passage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbsentClass {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3+")]
    ThreePlus,
}

impl AbsentClass {
    pub const ALL: [AbsentClass; 4] = [Self::Zero, Self::One, Self::Two, Self::ThreePlus];

    pub fn from_count(n: usize) -> Self {
        match n {
            0 => Self::Zero,
            1 => Self::One,
            2 => Self::Two,
            _ => Self::ThreePlus,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "0",
            Self::One => "1",
            Self::Two => "2",
            Self::ThreePlus => "3+",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnaStats {
    pub counts: BTreeMap<AbsentClass, usize>,
}

impl CnaStats {
    pub fn tally<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut counts: BTreeMap<AbsentClass, usize> = AbsentClass::ALL.iter().map(|&c| (c, 0)).collect();
        for ex in examples {
            *counts.entry(AbsentClass::from_count(ex.absent_gold_count)).or_default() += 1;
        }
        Self { counts }
    }

    pub fn get(&self, class: AbsentClass) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Drop examples whose supporting facts could not be resolved against
    /// their original (gold) context.
    pub exclude_unresolvable: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { exclude_unresolvable: true }
    }
}

/// Replaces each example's passage with the retrieved passage of the same id.
/// Examples with no retrieval are dropped with a warning.
pub fn attach_retrieved_passages(examples: Vec<Example>, retrieved: &[Example]) -> Vec<Example> {
    let by_id: HashMap<&str, &Passage> = retrieved.iter().map(|r| (r.id.as_str(), &r.passage)).collect();
    examples
        .into_iter()
        .filter_map(|mut ex| match by_id.get(ex.id.as_str()) {
            Some(p) => {
                ex.passage = (*p).clone();
                Some(ex)
            }
            None => {
                log::warn!("{}: no retrieved passage, excluded", ex.id);
                None
            }
        })
        .collect()
}

/// Builds the Fullwiki+CNA variant: gold supporting facts absent from the
/// (retrieved) passage are removed from the rationale, and any absence turns
/// the gold answer into CNA.
pub fn build_fullwiki_cna(examples: Vec<Example>, options: BuildOptions) -> (Vec<Example>, CnaStats) {
    let mut out = Vec::with_capacity(examples.len());
    for mut ex in examples {
        if ex.supporting_facts.is_empty() || ex.gold_paragraph_titles.is_empty() {
            log::warn!("{}: no gold paragraph annotations, excluded", ex.id);
            continue;
        }
        if options.exclude_unresolvable && ex.has_flag(ExampleFlag::UnresolvableSf) {
            log::warn!("{}: unresolvable supporting facts in gold context, excluded", ex.id);
            continue;
        }
        let unique: std::collections::BTreeSet<_> =
            ex.supporting_facts.iter().map(|sf| (sf.title.clone(), sf.sentence_index)).collect();
        let (resolved, _) = ex.resolve_supporting_facts();
        let absent = unique.len() - resolved.len();
        ex.gold_rationale = resolved;
        ex.absent_gold_count = absent;
        ex.flags.remove(&ExampleFlag::SpanUnalignable);
        if absent > 0 {
            ex.gold_answer = AnswerTarget::cna();
        } else if ex.gold_answer.label == AnswerLabel::Span {
            ex.gold_answer = align_answer_span(&ex);
            if ex.gold_answer.span_char_range.is_none() {
                ex.flags.insert(ExampleFlag::SpanUnalignable);
            }
        }
        out.push(ex);
    }
    let stats = CnaStats::tally(&out);
    (out, stats)
}

/// Term extraction: lowercase, punctuation stripped, n-grams up to `ngram`.
pub fn terms(text: &str, ngram: usize) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    for n in 2..=ngram.max(1) {
        out.extend(words.windows(n).map(|w| w.join(" ")));
    }
    out
}

/// Sparse vector sorted by term index, with its L2 norm.
#[derive(Clone, Debug, Default)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
    norm: f64,
}

impl SparseVector {
    fn from_map(map: BTreeMap<usize, f64>) -> Self {
        let entries: Vec<_> = map.into_iter().collect();
        let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        Self { entries, norm }
    }

    pub fn cosine(&self, other: &SparseVector) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, wa) = self.entries[i];
            let (b, wb) = other.entries[j];
            match a.cmp(&b) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += wa * wb;
                    i += 1;
                    j += 1;
                }
            }
        }
        dot / (self.norm * other.norm)
    }
}

/// Sentence-level TF-IDF over a pool of paragraphs.
#[derive(Clone, Debug)]
pub struct TfidfIndex {
    vocabulary: HashMap<String, usize>,
    idf: Vec<f64>,
    sentences: Vec<SparseVector>,
    /// (paragraph index in pool, sentence index in paragraph) per vector.
    positions: Vec<(usize, usize)>,
    paragraphs: Vec<Paragraph>,
    ngram: usize,
}

impl TfidfIndex {
    pub fn build(paragraphs: Vec<Paragraph>, ngram: usize) -> Self {
        let mut vocabulary: HashMap<String, usize> = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        let mut counts = Vec::new();
        let mut positions = Vec::new();
        for (pi, p) in paragraphs.iter().enumerate() {
            for (si, s) in p.sentences.iter().enumerate() {
                let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
                for t in terms(&s.text, ngram) {
                    let next = vocabulary.len();
                    let id = *vocabulary.entry(t).or_insert(next);
                    if id == df.len() {
                        df.push(0);
                    }
                    *tf.entry(id).or_default() += 1.0;
                }
                for &id in tf.keys() {
                    df[id] += 1;
                }
                counts.push(tf);
                positions.push((pi, si));
            }
        }
        let n = counts.len().max(1) as f64;
        let idf: Vec<f64> = df.iter().map(|&d| (n / (1.0 + d as f64)).ln() + 1.0).collect();
        let sentences = counts
            .into_iter()
            .map(|tf| SparseVector::from_map(tf.into_iter().map(|(id, c)| (id, c * idf[id])).collect()))
            .collect();
        Self { vocabulary, idf, sentences, positions, paragraphs, ngram }
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&i| self.idf[i])
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn vectorize(&self, text: &str) -> SparseVector {
        let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
        for t in terms(text, self.ngram) {
            if let Some(&id) = self.vocabulary.get(&t) {
                *tf.entry(id).or_default() += self.idf[id];
            }
        }
        SparseVector::from_map(tf)
    }

    /// Cosine similarity of every indexed sentence to `query`, paired with
    /// its (paragraph, sentence) position.
    pub fn similarities(&self, query: &str) -> Vec<((usize, usize), f64)> {
        let q = self.vectorize(query);
        self.positions.iter().zip(&self.sentences).map(|(&pos, v)| (pos, q.cosine(v))).collect()
    }

    /// Pool index of the paragraph holding the most query-similar sentence.
    /// Ties go to the lowest (paragraph, sentence) position.
    pub fn best_paragraph(&self, query: &str) -> Option<usize> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (pos, sim) in self.similarities(query) {
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((pos, sim));
            }
        }
        best.map(|((p, _), _)| p)
    }

    /// Pool paragraphs ordered by their best sentence similarity, descending.
    pub fn ranked_paragraphs(&self, query: &str) -> Vec<usize> {
        let mut best = vec![0.0f64; self.paragraphs.len()];
        for ((p, _), sim) in self.similarities(query) {
            best[p] = best[p].max(sim);
        }
        let mut order: Vec<usize> = (0..self.paragraphs.len()).collect();
        order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
        order
    }
}

const NEGATIVE_SAMPLE_TAG: u64 = 0x4e45_47;

/// Negative-samples one CNA example from a gold-pair example: a uniformly
/// chosen gold paragraph is replaced by the pool paragraph containing the
/// sentence most TF-IDF-similar to the query. Returns `None` when the pool is
/// empty.
pub fn negative_sample_cna(example: &Example, index: &TfidfIndex, rng_seed: u64) -> Option<Example> {
    let n = example.passage.paragraph_count();
    if n == 0 {
        return None;
    }
    let Some(best) = index.best_paragraph(&example.query) else {
        log::warn!("{}: no non-gold paragraph available, augmentation skipped", example.id);
        return None;
    };
    let mut rng = seed::rng(rng_seed, &example.id, &[NEGATIVE_SAMPLE_TAG]);
    let replaced = rng.random_range(0..n);

    let mut paragraphs = example.passage.paragraphs().to_vec();
    paragraphs[replaced] = index.paragraphs()[best].clone();
    let passage = Passage::from_paragraphs(paragraphs);

    let mut offsets = Vec::with_capacity(n);
    let mut acc = 0;
    for p in passage.paragraphs() {
        offsets.push(acc);
        acc += p.sentences.len();
    }
    let gold_rationale = example
        .gold_rationale
        .iter()
        .filter_map(|&id| example.passage.locate(id))
        .filter(|&(pi, _)| pi != replaced)
        .map(|(pi, si)| offsets[pi] + si)
        .collect::<std::collections::BTreeSet<_>>();
    let removed = example.gold_rationale.len() - gold_rationale.len();

    Some(Example {
        id: format!("{}#cna", example.id),
        query: example.query.clone(),
        passage,
        gold_answer: AnswerTarget::cna(),
        gold_rationale,
        gold_paragraph_titles: example.gold_paragraph_titles.clone(),
        supporting_facts: example.supporting_facts.clone(),
        absent_gold_count: example.absent_gold_count + removed,
        flags: Default::default(),
    })
}

/// Gold-pair view plus its negative-sampled CNA companion for one example.
/// The pool is the example's non-gold paragraphs.
pub fn gold_pair_with_augmentation(example: &Example, ngram: usize, rng_seed: u64) -> (Option<Example>, Option<Example>) {
    let Some(gold) = example.gold_pair_view() else {
        return (None, None);
    };
    let gold_idx = example.gold_paragraph_indices();
    let pool: Vec<Paragraph> = example
        .passage
        .paragraphs()
        .iter()
        .enumerate()
        .filter(|(i, _)| !gold_idx.contains(i))
        .map(|(_, p)| p.clone())
        .collect();
    if pool.is_empty() {
        log::warn!("{}: no non-gold paragraph available, augmentation skipped", example.id);
        return (Some(gold), None);
    }
    let index = TfidfIndex::build(pool, ngram);
    let aug = negative_sample_cna(&gold, &index, rng_seed);
    (Some(gold), aug)
}

/// Appends one negative-sampled CNA example per input example (full passages
/// in, augmented gold-pair passages out).
pub fn augment_cna(examples: &[Example], ngram: usize, rng_seed: u64) -> Vec<Example> {
    examples
        .iter()
        .filter_map(|ex| gold_pair_with_augmentation(ex, ngram, rng_seed).1)
        .collect()
}
