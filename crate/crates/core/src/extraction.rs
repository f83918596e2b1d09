//! Extraction module: sentence scoring, threshold extraction, straight-through
//! Gumbel sampling, and the rationale and no-answer losses.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Matrix, ParamStore, Var};
use crate::corpus::Sentence;
use crate::encoder::{pack_extraction_input, Encoder, EncoderConfig, ForwardOptions, Linear, PackedInput, PackingLimits, Tokenizer};
use crate::error::Result;

/// A set of sentence ids.
pub type Rationale = BTreeSet<usize>;

/// Logits are capped to this magnitude before the sigmoid.
pub const LOGIT_CAP: f64 = 30.0;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the BCE.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScores {
    /// Sentence id of each scored position.
    pub sentence_ids: Vec<usize>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl SentenceScores {
    pub fn from_logits(sentence_ids: Vec<usize>, logits: Vec<f64>) -> Self {
        assert_eq!(sentence_ids.len(), logits.len());
        let logits: Vec<f64> = logits.into_iter().map(|l| l.clamp(-LOGIT_CAP, LOGIT_CAP)).collect();
        let probs = logits.iter().map(|&l| autodiff::sigmoid(l)).collect();
        Self { sentence_ids, logits, probs }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn prob_of(&self, sentence_id: usize) -> Option<f64> {
        self.sentence_ids.iter().position(|&s| s == sentence_id).map(|k| self.probs[k])
    }

    /// Highest-probability sentence not in `exclude`; ties go to the earlier position.
    pub fn argmax_excluding(&self, exclude: &Rationale) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, &id) in self.sentence_ids.iter().enumerate() {
            if exclude.contains(&id) {
                continue;
            }
            if best.is_none_or(|(_, p)| self.probs[k] > p) {
                best = Some((id, self.probs[k]));
            }
        }
        best.map(|(id, _)| id)
    }
}

/// Scores from encoder outputs: one logit per marker row, `logit = row · weight + bias`.
pub fn score_sentences(
    embeddings: &Matrix,
    marker_positions: &[usize],
    sentence_ids: &[usize],
    weight: &Matrix,
    bias: f64,
) -> SentenceScores {
    let logits = marker_positions.iter().map(|&p| embeddings.row(p).dot(&weight.column(0)) + bias).collect();
    SentenceScores::from_logits(sentence_ids.to_vec(), logits)
}

/// `{ i : p_i > alpha }`.
pub fn threshold_extract(scores: &SentenceScores, alpha: f64) -> Rationale {
    scores.sentence_ids.iter().zip(&scores.probs).filter(|(_, &p)| p > alpha).map(|(&id, _)| id).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledRationale {
    pub hard_mask: Vec<bool>,
    pub relaxed: Vec<f64>,
    pub gumbel_pairs: Vec<(f64, f64)>,
}

impl SampledRationale {
    pub fn selected(&self, sentence_ids: &[usize]) -> Rationale {
        sentence_ids.iter().zip(&self.hard_mask).filter(|(_, &h)| h).map(|(&id, _)| id).collect()
    }
}

/// Standard Gumbel draw `-ln(-ln u)`, resampling the measure-zero endpoints.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return gumbel_from_uniform(u);
        }
    }
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Relaxed indicator: the two-way Gumbel-softmax over `(log p, log(1 - p))`,
/// which reduces to `sigmoid((logit + g - g') / tau)`.
pub fn relaxed_indicator(logit: f64, pair: (f64, f64), tau: f64) -> f64 {
    autodiff::sigmoid((logit + pair.0 - pair.1) / tau)
}

/// Extracted iff `g + log p > g' + log(1 - p)`; an exact tie is not extracted.
pub fn hard_indicator(logit: f64, pair: (f64, f64)) -> bool {
    logit + pair.0 - pair.1 > 0.0
}

pub fn gumbel_sample_with(scores: &SentenceScores, tau: f64, gumbel_pairs: Vec<(f64, f64)>) -> SampledRationale {
    assert!(tau > 0.0, "temperature must be positive");
    assert_eq!(gumbel_pairs.len(), scores.len());
    let hard_mask = scores.logits.iter().zip(&gumbel_pairs).map(|(&l, &g)| hard_indicator(l, g)).collect();
    let relaxed = scores.logits.iter().zip(&gumbel_pairs).map(|(&l, &g)| relaxed_indicator(l, g, tau)).collect();
    SampledRationale { hard_mask, relaxed, gumbel_pairs }
}

pub fn gumbel_sample(scores: &SentenceScores, tau: f64, rng: &mut impl Rng) -> SampledRationale {
    let pairs = (0..scores.len()).map(|_| (gumbel(rng), gumbel(rng))).collect();
    gumbel_sample_with(scores, tau, pairs)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy against gold membership.
pub fn rationale_loss(scores: &SentenceScores, gold: &Rationale) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let total: f64 = scores
        .sentence_ids
        .iter()
        .zip(&scores.probs)
        .map(|(id, &p)| {
            let p = clamp_prob(p);
            if gold.contains(id) { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    total / scores.len() as f64
}

/// `max(0, max extracted logit - max answer-sentence logit)`; zero when
/// either set is empty among the scored sentences.
pub fn no_answer_penalty(scores: &SentenceScores, extracted: &Rationale, answer_sentences: &Rationale) -> f64 {
    match no_answer_argmaxes(&scores.sentence_ids, &scores.logits, extracted, answer_sentences) {
        Some((r, a)) => (scores.logits[r] - scores.logits[a]).max(0.0),
        None => 0.0,
    }
}

/// Positions of the top extracted logit and the top answer-sentence logit.
fn no_answer_argmaxes(ids: &[usize], logits: &[f64], extracted: &Rationale, answers: &Rationale) -> Option<(usize, usize)> {
    let best = |set: &Rationale| {
        ids.iter()
            .enumerate()
            .filter(|(_, id)| set.contains(id))
            .map(|(k, _)| k)
            .fold(None, |acc: Option<usize>, k| match acc {
                Some(b) if logits[b] >= logits[k] => Some(b),
                _ => Some(k),
            })
    };
    Some((best(extracted)?, best(answers)?))
}

/// Graph form of [`rationale_loss`] over a `(n, 1)` logit column.
pub fn rationale_loss_var(g: &mut Graph, logits: Var, sentence_ids: &[usize], gold: &Rationale) -> Var {
    smoothed_rationale_loss_var(g, logits, sentence_ids, gold, 0.0)
}

/// [`rationale_loss_var`] with targets `1 - smoothing` for gold sentences and
/// `smoothing` for the rest.
pub fn smoothed_rationale_loss_var(
    g: &mut Graph,
    logits: Var,
    sentence_ids: &[usize],
    gold: &Rationale,
    smoothing: f64,
) -> Var {
    let n = sentence_ids.len();
    let y = Array2::from_shape_fn((n, 1), |(k, _)| if gold.contains(&sentence_ids[k]) { 1.0 - smoothing } else { smoothing });
    let not_y = y.mapv(|v| 1.0 - v);
    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(p);
    let neg_p = g.neg(p);
    let one_minus = g.add_scalar(neg_p, 1.0);
    let log_q = g.log(one_minus);
    let y = g.constant(y);
    let not_y = g.constant(not_y);
    let a = g.mul(y, log_p);
    let b = g.mul(not_y, log_q);
    let ll = g.add(a, b);
    let m = g.mean(ll);
    g.neg(m)
}

/// Graph form of [`no_answer_penalty`]; the max is taken at the argmax (a subgradient).
pub fn no_answer_penalty_var(
    g: &mut Graph,
    logits: Var,
    sentence_ids: &[usize],
    extracted: &Rationale,
    answer_sentences: &Rationale,
) -> Option<Var> {
    let values: Vec<f64> = g.value(logits).column(0).to_vec();
    let (r, a) = no_answer_argmaxes(sentence_ids, &values, extracted, answer_sentences)?;
    if values[r] - values[a] <= 0.0 {
        return None;
    }
    let top = g.pick(logits, r, 0);
    let ans = g.pick(logits, a, 0);
    Some(g.sub(top, ans))
}

/// Straight-through sample in the graph: forward value is the hard mask,
/// backward gradient flows into the relaxed indicator.
pub fn straight_through_mask(g: &mut Graph, logits: Var, sample: &SampledRationale, tau: f64) -> Var {
    let n = sample.hard_mask.len();
    let noise = Array2::from_shape_fn((n, 1), |(k, _)| sample.gumbel_pairs[k].0 - sample.gumbel_pairs[k].1);
    let noise = g.constant(noise);
    let shifted = g.add(logits, noise);
    let scaled = g.scale(shifted, 1.0 / tau);
    let z = g.sigmoid(scaled);
    let hard = Array2::from_shape_fn((n, 1), |(k, _)| if sample.hard_mask[k] { 1.0 } else { 0.0 });
    g.straight_through(z, hard)
}

/// Encoder plus a linear sentence-scoring head over the `[CLS_S]` rows.
#[derive(Clone, Debug)]
pub struct ExtractionModel {
    pub store: ParamStore,
    encoder: Encoder,
    head: Linear,
}

impl ExtractionModel {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "extractor.encoder", config, rng);
        let head = Linear::new(&mut store, "extractor.head", config.dim, 1, rng);
        Self { store, encoder, head }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    /// Logit column `(sentences, 1)` for a packed extraction input.
    pub fn logits(&self, g: &mut Graph, packed: &PackedInput) -> Result<Var> {
        let h = self.encoder.forward(g, &self.store, &packed.token_ids, ForwardOptions::default())?;
        let markers = g.gather_rows(h, &packed.marker_positions);
        Ok(self.head.forward(g, &self.store, markers))
    }

    pub fn score_packed(&self, packed: &PackedInput) -> Result<SentenceScores> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, packed)?;
        Ok(SentenceScores::from_logits(packed.sentence_ids.clone(), g.value(l).column(0).to_vec()))
    }

    pub fn score(
        &self,
        tokenizer: &Tokenizer,
        limits: &PackingLimits,
        query: &str,
        sentences: &[Sentence],
    ) -> Result<SentenceScores> {
        let packed = pack_extraction_input(tokenizer, limits, query, sentences)?;
        self.score_packed(&packed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(logits: &[f64]) -> SentenceScores {
        SentenceScores::from_logits((0..logits.len()).collect(), logits.to_vec())
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn zero_head_gives_one_half() {
        let emb = Array2::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let s = score_sentences(&emb, &[1, 4], &[0, 1], &Array2::zeros((4, 1)), 0.0);
        assert_eq!(s.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn saturated_logits_are_capped() {
        let s = scores(&[-1e9]);
        assert_eq!(s.logits[0], -LOGIT_CAP);
        assert!(s.probs[0] < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let s = scores(&[logit(0.9), logit(0.3), logit(0.6)]);
        assert_eq!(threshold_extract(&s, 0.5), Rationale::from([0, 2]));
        assert_eq!(threshold_extract(&s, 0.0).len(), 3);
        let low = scores(&[logit(0.9), logit(0.2)]);
        assert!(threshold_extract(&low, 0.9).is_empty());
    }

    #[test]
    fn gumbel_closed_form_and_tie() {
        assert!(gumbel_from_uniform((-1f64).exp()).abs() < 1e-15);
        let s = gumbel_sample_with(&scores(&[0.0]), 0.5, vec![(0.3, 0.3)]);
        assert_eq!(s.relaxed[0], 0.5);
        assert!(!s.hard_mask[0]);
    }

    #[test]
    fn rationale_loss_closed_forms() {
        let s = scores(&[0.0, 0.0, 0.0]);
        assert!((rationale_loss(&s, &Rationale::from([1])) - 2f64.ln()).abs() < 1e-12);
        let perfect = scores(&[LOGIT_CAP, -LOGIT_CAP]);
        assert!(rationale_loss(&perfect, &Rationale::from([0])) < 1e-6);
    }

    #[test]
    fn no_answer_penalty_examples() {
        let s = scores(&[2.0, 0.5, 1.0]);
        assert!((no_answer_penalty(&s, &Rationale::from([0, 2]), &Rationale::from([1])) - 1.5).abs() < 1e-12);
        assert_eq!(no_answer_penalty(&s, &Rationale::from([0, 1]), &Rationale::from([0])), 0.0);
        assert_eq!(no_answer_penalty(&s, &Rationale::from([0]), &Rationale::new()), 0.0);
    }

    #[test]
    fn graph_losses_match_scalar_forms() {
        let logits = [1.2, -0.7, 0.3, 2.5];
        let s = scores(&logits);
        let ids: Vec<usize> = (0..4).collect();
        let gold = Rationale::from([0, 2]);
        let mut g = Graph::new();
        let l = g.input(Array2::from_shape_vec((4, 1), logits.to_vec()).unwrap());
        let lr = rationale_loss_var(&mut g, l, &ids, &gold);
        assert!((g.scalar(lr) - rationale_loss(&s, &gold)).abs() < 1e-12);
        let na = no_answer_penalty_var(&mut g, l, &ids, &Rationale::from([3]), &Rationale::from([0, 1])).unwrap();
        assert!((g.scalar(na) - no_answer_penalty(&s, &Rationale::from([3]), &Rationale::from([0, 1]))).abs() < 1e-12);
    }

    #[test]
    fn straight_through_forward_is_hard_backward_is_relaxed() {
        let mut g = Graph::new();
        let l = g.input(Array2::from_shape_vec((2, 1), vec![0.4, -0.2]).unwrap());
        let sample = gumbel_sample_with(&scores(&[0.4, -0.2]), 0.5, vec![(0.1, -0.3), (0.0, 0.5)]);
        let m = straight_through_mask(&mut g, l, &sample, 0.5);
        assert_eq!(g.value(m).column(0).to_vec(), vec![1.0, 0.0]);
        let loss = g.sum(m);
        let grads = g.backward(loss);
        let dl = grads.get(l).unwrap();
        for k in 0..2 {
            let z = sample.relaxed[k];
            assert!((dl[[k, 0]] - z * (1.0 - z) / 0.5).abs() < 1e-12);
        }
    }
}
