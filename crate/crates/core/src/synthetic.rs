//! Seed-deterministic two-hop corpus built from templates over a closed
//! entity vocabulary.
//!
//! Every answerable example has a bridge: sentence A states `E1 <r1> E2` and
//! sentence B states `E2 <r2> E3`; the query asks for the `r2` of the `r1` of
//! `E1` and the answer is `E3`. CNA examples replace A or B with a filler.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{align_answer_span, AnswerTarget, Example, Passage, SupportingFact};
use crate::error::{IrcError, Result};
use crate::seed;

/// First-hop relations: sentence phrase and the noun used in queries.
const FIRST_HOP: [(&str, &str); 5] = [
    ("was founded by", "founder"),
    ("was directed by", "director"),
    ("was written by", "author"),
    ("is owned by", "owner"),
    ("was designed by", "designer"),
];

/// Second-hop relations: sentence phrase and the query frame.
const SECOND_HOP: [(&str, &str); 5] = [
    ("was born in", "Where was the {noun} of {entity} born?"),
    ("works for", "Who does the {noun} of {entity} work for?"),
    ("is married to", "Who is the {noun} of {entity} married to?"),
    ("lives in", "Where does the {noun} of {entity} live?"),
    ("studied at", "Where did the {noun} of {entity} study?"),
];

const CONSONANTS: [char; 14] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub examples: usize,
    pub entity_vocabulary: usize,
    /// Relations drawn from each hop's pool (2..=5).
    pub relations: usize,
    pub paragraphs_per_passage: usize,
    pub sentences_per_paragraph: usize,
    pub cna_fraction: f64,
    pub seed: u64,
    /// Name of the split; splits of one seed share the entity vocabulary
    /// but draw disjoint example streams.
    pub split: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            examples: 200,
            entity_vocabulary: 80,
            relations: 3,
            paragraphs_per_passage: 4,
            sentences_per_paragraph: 3,
            cna_fraction: 0.3,
            seed: 0,
            split: "train".into(),
        }
    }
}

impl SyntheticSpec {
    /// Distinct entities one example needs.
    pub fn entities_per_example(&self) -> usize {
        let s = self.sentences_per_paragraph;
        // Bridge triple, gold-paragraph filler objects plus one replacement
        // filler, and a title plus objects for each distractor paragraph.
        3 + 2 * (s - 1) + 1 + (self.paragraphs_per_passage - 2) * (1 + s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cna_fraction) {
            return Err(IrcError::Config(format!("cna_fraction must lie in [0, 1], got {}", self.cna_fraction)));
        }
        if !(2..=5).contains(&self.relations) {
            return Err(IrcError::Config(format!("relations must lie in 2..=5, got {}", self.relations)));
        }
        if self.paragraphs_per_passage < 2 || self.sentences_per_paragraph < 1 {
            return Err(IrcError::Config("need at least 2 paragraphs of at least 1 sentence".into()));
        }
        let need = self.entities_per_example();
        if self.entity_vocabulary < need {
            return Err(IrcError::Config(format!(
                "entity vocabulary of {} cannot fill an example without collisions (needs {need})",
                self.entity_vocabulary
            )));
        }
        Ok(())
    }
}

/// Relation between two entities; `hop` 0 is a first-hop relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Relation {
    hop: usize,
    index: usize,
}

impl Relation {
    fn phrase(self) -> &'static str {
        if self.hop == 0 { FIRST_HOP[self.index].0 } else { SECOND_HOP[self.index].0 }
    }
}

#[derive(Clone, Debug)]
struct Fact {
    subject: String,
    relation: Relation,
    object: String,
}

impl Fact {
    fn sentence(&self) -> String {
        format!("{} {} {}.", self.subject, self.relation.phrase(), self.object)
    }
}

/// The closed entity vocabulary of a seed.
pub fn entity_names(count: usize, seed_value: u64) -> Vec<String> {
    let mut rng = seed::rng(seed_value, "synthetic-entities", &[]);
    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(count);
    while names.len() < count {
        let mut name = String::new();
        for _ in 0..3 {
            name.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
            name.push(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if seen.insert(name.clone()) {
            let mut c = name.chars();
            let first = c.next().expect("non-empty").to_ascii_uppercase();
            names.push(std::iter::once(first).chain(c).collect());
        }
    }
    names
}

/// Answers reachable by a `first`-then-`second` chain from `start`.
fn solve_chain(facts: &[&Fact], start: &str, first: Relation, second: Relation) -> BTreeSet<String> {
    let bridges: Vec<&str> = facts
        .iter()
        .filter(|f| f.subject == start && f.relation == first)
        .map(|f| f.object.as_str())
        .collect();
    facts
        .iter()
        .filter(|f| f.relation == second && bridges.contains(&f.subject.as_str()))
        .map(|f| f.object.clone())
        .collect()
}

/// Indices (into the example stream) that become CNA examples.
fn cna_indices(spec: &SyntheticSpec) -> BTreeSet<usize> {
    let n_cna = (spec.cna_fraction * spec.examples as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.examples).collect();
    order.shuffle(&mut seed::rng(spec.seed, &format!("synthetic-cna-{}", spec.split), &[]));
    order.into_iter().take(n_cna).collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let names = entity_names(spec.entity_vocabulary, spec.seed);
    let cna = cna_indices(spec);
    (0..spec.examples).map(|i| generate_one(spec, &names, i, cna.contains(&i))).collect()
}

fn generate_one(spec: &SyntheticSpec, names: &[String], index: usize, is_cna: bool) -> Result<Example> {
    let mut rng = seed::rng(spec.seed, &format!("synthetic-{}", spec.split), &[index as u64]);
    let mut pool: Vec<&String> = names.iter().collect();
    pool.shuffle(&mut rng);
    let mut fresh = pool.into_iter().cloned();
    let mut take = || fresh.next().expect("vocabulary size validated");

    let first = Relation { hop: 0, index: rng.random_range(0..spec.relations) };
    let second = Relation { hop: 1, index: rng.random_range(0..spec.relations) };
    let (e1, e2, e3) = (take(), take(), take());
    let query = SECOND_HOP[second.index]
        .1
        .replace("{noun}", FIRST_HOP[first.index].1)
        .replace("{entity}", &e1);

    // Any relation except `avoid`, so fillers never duplicate a bridge fact.
    let other = |rng: &mut rand_chacha::ChaCha8Rng, avoid: Relation| loop {
        let r = Relation { hop: rng.random_range(0..2), index: rng.random_range(0..spec.relations) };
        if r != avoid {
            return r;
        }
    };

    let s = spec.sentences_per_paragraph;
    let bridge_a = Fact { subject: e1.clone(), relation: first, object: e2.clone() };
    let bridge_b = Fact { subject: e2.clone(), relation: second, object: e3.clone() };
    let mut para_a: Vec<Fact> = (1..s).map(|_| Fact { subject: e1.clone(), relation: other(&mut rng, first), object: take() }).collect();
    let mut para_b: Vec<Fact> = (1..s).map(|_| Fact { subject: e2.clone(), relation: other(&mut rng, second), object: take() }).collect();
    let pos_a = rng.random_range(0..s);
    let pos_b = rng.random_range(0..s);
    let drop_a = is_cna && rng.random_bool(0.5);
    let drop_b = is_cna && !drop_a;
    let replacement = take();
    if drop_a {
        para_a.insert(pos_a, Fact { subject: e1.clone(), relation: other(&mut rng, first), object: replacement.clone() });
    } else {
        para_a.insert(pos_a, bridge_a);
    }
    if drop_b {
        para_b.insert(pos_b, Fact { subject: e2.clone(), relation: other(&mut rng, second), object: replacement });
    } else {
        para_b.insert(pos_b, bridge_b);
    }

    let mut paragraphs: Vec<(String, Vec<Fact>)> = vec![(e1.clone(), para_a), (e2.clone(), para_b)];
    for _ in 2..spec.paragraphs_per_passage {
        let title = take();
        let facts = (0..s)
            .map(|_| Fact {
                subject: title.clone(),
                relation: Relation { hop: rng.random_range(0..2), index: rng.random_range(0..spec.relations) },
                object: take(),
            })
            .collect();
        paragraphs.push((title, facts));
    }
    paragraphs.shuffle(&mut rng);

    check_structure(&paragraphs, &e1, &e3, first, second, is_cna)?;

    let passage = Passage::from_raw(
        paragraphs.iter().map(|(t, facts)| (t.clone(), facts.iter().map(Fact::sentence).collect::<Vec<_>>())),
    );
    let mut supporting_facts = Vec::new();
    let mut gold_rationale = BTreeSet::new();
    for (title, pos, present) in [(&e1, pos_a, !drop_a), (&e2, pos_b, !drop_b)] {
        if present {
            supporting_facts.push(SupportingFact { title: title.clone(), sentence_index: pos });
            gold_rationale.insert(passage.resolve(title, pos).expect("bridge sentence is in the passage"));
        }
    }
    let mut example = Example {
        id: format!("syn-{}-{}-{index:05}", spec.seed, spec.split),
        query,
        passage,
        gold_answer: if is_cna { AnswerTarget::cna() } else { AnswerTarget::span(&e3) },
        gold_rationale,
        gold_paragraph_titles: BTreeSet::from([e1, e2]),
        supporting_facts,
        absent_gold_count: usize::from(is_cna),
        flags: BTreeSet::new(),
    };
    example.gold_answer = align_answer_span(&example);
    Ok(example)
}

/// Structural guarantees: in an answerable example the chain yields exactly
/// the answer, the answer occurs only in sentence B, and dropping either
/// bridge sentence leaves nothing derivable. CNA examples derive nothing.
fn check_structure(
    paragraphs: &[(String, Vec<Fact>)],
    e1: &str,
    e3: &str,
    first: Relation,
    second: Relation,
    is_cna: bool,
) -> Result<()> {
    let facts: Vec<&Fact> = paragraphs.iter().flat_map(|(_, f)| f.iter()).collect();
    let answers = solve_chain(&facts, e1, first, second);
    let fail = |what: &str| Err(IrcError::InvalidInput(format!("synthetic generator invariant violated: {what}")));
    if is_cna {
        if !answers.is_empty() {
            return fail("CNA example still has a derivable answer");
        }
        return Ok(());
    }
    if answers != BTreeSet::from([e3.to_string()]) {
        return fail("bridge chain does not yield exactly the answer");
    }
    let mentions: Vec<&&Fact> = facts.iter().filter(|f| f.subject == e3 || f.object == e3).collect();
    if mentions.len() != 1 {
        return fail("answer entity appears outside the answer sentence");
    }
    for k in 0..facts.len() {
        let rest: Vec<&Fact> = facts.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, f)| *f).collect();
        let is_bridge = (facts[k].subject == e1 && facts[k].relation == first) || facts[k].object == e3;
        if is_bridge && !solve_chain(&rest, e1, first, second).is_empty() {
            return fail("answer still derivable after removing a bridge sentence");
        }
    }
    Ok(())
}

/// Per-label counts, for logging and checks.
pub fn label_counts(examples: &[Example]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for e in examples {
        *m.entry(format!("{:?}", e.gold_answer.label)).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnswerLabel;

    #[test]
    fn no_cna_means_all_answerable_with_two_gold_sentences() {
        let ex = generate(&SyntheticSpec { examples: 50, cna_fraction: 0.0, ..Default::default() }).unwrap();
        assert!(ex.iter().all(|e| e.gold_answer.label == AnswerLabel::Span && e.gold_rationale.len() == 2));
    }

    #[test]
    fn cna_partition_is_exact() {
        let ex = generate(&SyntheticSpec { examples: 200, cna_fraction: 0.5, ..Default::default() }).unwrap();
        let n = ex.iter().filter(|e| e.gold_answer.label == AnswerLabel::Cna).count();
        assert_eq!(n, 100);
        for e in ex.iter().filter(|e| e.gold_answer.label == AnswerLabel::Cna) {
            assert_eq!((e.gold_rationale.len(), e.absent_gold_count), (1, 1));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec { examples: 30, ..Default::default() };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn answer_absent_from_every_non_answer_sentence() {
        for e in generate(&SyntheticSpec { examples: 100, ..Default::default() }).unwrap() {
            if e.gold_answer.label != AnswerLabel::Span {
                continue;
            }
            let answer = e.gold_answer.span_text.clone().unwrap();
            let holders: Vec<usize> = e.passage.sentences().filter(|s| s.text.contains(&answer)).map(|s| s.id).collect();
            assert_eq!(holders.len(), 1);
            assert!(e.gold_rationale.contains(&holders[0]));
            assert_eq!(e.gold_answer.span_char_range.unwrap().sentence_id, holders[0]);
        }
    }

    #[test]
    fn splits_share_vocabulary_but_not_examples() {
        let train = generate(&SyntheticSpec { examples: 20, ..Default::default() }).unwrap();
        let dev = generate(&SyntheticSpec { examples: 20, split: "dev".into(), ..Default::default() }).unwrap();
        assert_ne!(train[0].query, dev[0].query);
        let vocab: BTreeSet<String> = entity_names(80, 0).into_iter().collect();
        assert!(dev.iter().all(|e| e.gold_paragraph_titles.iter().all(|t| vocab.contains(t))));
    }

    #[test]
    fn tiny_vocabulary_is_rejected() {
        let spec = SyntheticSpec { entity_vocabulary: 10, ..Default::default() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn passages_have_requested_shape() {
        let spec = SyntheticSpec { examples: 5, paragraphs_per_passage: 5, sentences_per_paragraph: 4, entity_vocabulary: 60, ..Default::default() };
        for e in generate(&spec).unwrap() {
            assert_eq!(e.passage.paragraph_count(), 5);
            assert_eq!(e.passage.sentence_count(), 20);
        }
    }
}
