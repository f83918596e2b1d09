//! Answer module: label classification over {Yes, No, Span, CNA}, span
//! scoring, decoding and the answer loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamStore, Var};
use crate::corpus::{AnswerLabel, AnswerTarget, Sentence, NUM_LABELS};
use crate::encoder::{pack_answer_input, Encoder, EncoderConfig, ForwardOptions, Linear, PackedInput, PackingLimits, Segment, Tokenizer};
use crate::error::Result;
use crate::evaluator::CNA_ANSWER;
use crate::text::char_slice;

#[derive(Clone, Debug, PartialEq)]
pub struct AnswerScores {
    pub label_scores: Vec<f64>,
    pub span_start: Vec<f64>,
    pub span_end: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    pub label: AnswerLabel,
    pub span_text: Option<String>,
    pub cna_probability: f64,
    pub label_scores: Vec<f64>,
    /// Best span in the rationale regardless of the chosen label.
    pub best_span: Option<String>,
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax_at(xs: &[f64], k: usize) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs[k] - lse
}

impl AnswerPrediction {
    /// The string submitted for evaluation.
    pub fn answer_string(&self) -> String {
        match self.label {
            AnswerLabel::Yes => "yes".into(),
            AnswerLabel::No => "no".into(),
            AnswerLabel::Span => self.span_text.clone().unwrap_or_default(),
            AnswerLabel::Cna => CNA_ANSWER.into(),
        }
    }

    fn with_label(&self, label: AnswerLabel) -> Self {
        let span_text = if label == AnswerLabel::Span { self.best_span.clone() } else { None };
        Self { label, span_text, ..self.clone() }
    }

    /// The highest-scoring label other than CNA (Span only if a span exists).
    pub fn best_non_cna(&self) -> Self {
        let label = best_label(&self.label_scores, |l| {
            l != AnswerLabel::Cna && (l != AnswerLabel::Span || self.best_span.is_some())
        })
        .unwrap_or(AnswerLabel::Yes);
        self.with_label(label)
    }

    pub fn as_cna(&self) -> Self {
        self.with_label(AnswerLabel::Cna)
    }
}

/// Argmax over allowed labels; ties go to the lower label index.
fn best_label(scores: &[f64], allowed: impl Fn(AnswerLabel) -> bool) -> Option<AnswerLabel> {
    let mut best: Option<(AnswerLabel, f64)> = None;
    for l in AnswerLabel::ALL {
        if !allowed(l) {
            continue;
        }
        if best.is_none_or(|(_, s)| scores[l.index()] > s) {
            best = Some((l, scores[l.index()]));
        }
    }
    best.map(|(l, _)| l)
}

/// Label scores from row 0 and start/end scores from every row.
pub fn compute_answer_scores(
    embeddings: &Matrix,
    label_weight: &Matrix,
    label_bias: &[f64],
    span_weight: &Matrix,
    span_bias: &[f64],
) -> AnswerScores {
    let cls = embeddings.row(0);
    let label_scores = (0..label_weight.ncols()).map(|c| cls.dot(&label_weight.column(c)) + label_bias[c]).collect();
    let span = embeddings.dot(span_weight);
    AnswerScores {
        label_scores,
        span_start: span.column(0).iter().map(|x| x + span_bias[0]).collect(),
        span_end: span.column(1).iter().map(|x| x + span_bias[1]).collect(),
    }
}

/// Best `(start, end)` token pair inside one rationale sentence with
/// `end - start < max_tokens`; ties keep the smaller start, then smaller end.
pub fn best_span(scores: &AnswerScores, packed: &PackedInput, max_tokens: usize) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    let n = packed.len();
    for i in 0..n {
        let Segment::Sentence { id, .. } = packed.segments[i] else { continue };
        for j in i..n.min(i + max_tokens) {
            match packed.segments[j] {
                Segment::Sentence { id: jd, .. } if jd == id => {}
                _ => break,
            }
            let s = scores.span_start[i] + scores.span_end[j];
            if best.is_none_or(|(_, b)| s > b) {
                best = Some(((i, j), s));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Source text covered by tokens `start..=end` of one sentence.
pub fn span_text(packed: &PackedInput, start: usize, end: usize) -> Option<String> {
    match (packed.segments.get(start)?, packed.segments.get(end)?) {
        (Segment::Sentence { id, start: cs, .. }, Segment::Sentence { id: jd, end: ce, .. }) if id == jd => {
            Some(char_slice(packed.text_of(*id)?, *cs, *ce))
        }
        _ => None,
    }
}

pub fn decode_answer(scores: &AnswerScores, packed: &PackedInput, max_answer_tokens: usize) -> AnswerPrediction {
    let best_span = best_span(scores, packed, max_answer_tokens).and_then(|(i, j)| span_text(packed, i, j));
    let probs = softmax(&scores.label_scores);
    let top = best_label(&scores.label_scores, |_| true).expect("label scores are non-empty");
    let pred = AnswerPrediction {
        label: top,
        span_text: None,
        cna_probability: probs[AnswerLabel::Cna.index()],
        label_scores: scores.label_scores.clone(),
        best_span,
    };
    if top == AnswerLabel::Span && pred.best_span.is_none() {
        let fallback = best_label(&scores.label_scores, |l| l != AnswerLabel::Span).expect("non-span labels exist");
        return pred.with_label(fallback);
    }
    pred.with_label(top)
}

/// Token positions of the gold span's first and last tokens in `packed`,
/// or `None` when the span's sentence or tokens were not packed.
pub fn span_token_targets(target: &AnswerTarget, packed: &PackedInput) -> Option<(usize, usize)> {
    if target.label != AnswerLabel::Span {
        return None;
    }
    let range = target.span_char_range?;
    let mut hits = packed.segments.iter().enumerate().filter_map(|(k, s)| match *s {
        Segment::Sentence { id, start, end } if id == range.sentence_id && end > range.start && start < range.end => {
            Some(k)
        }
        _ => None,
    });
    let first = hits.next()?;
    let last = hits.last().unwrap_or(first);
    Some((first, last))
}

/// `CE(label) + CE(start) + CE(end)`, span terms only for an aligned Span target.
pub fn answer_loss(scores: &AnswerScores, target: &AnswerTarget, packed: &PackedInput) -> f64 {
    let mut loss = -log_softmax_at(&scores.label_scores, target.label.index());
    if let Some((s, e)) = span_token_targets(target, packed) {
        loss -= log_softmax_at(&scores.span_start, s) + log_softmax_at(&scores.span_end, e);
    }
    loss
}

/// Graph outputs of the answer module.
#[derive(Clone, Copy, Debug)]
pub struct AnswerVars {
    /// `(1, labels)`.
    pub labels: Var,
    /// `(1, tokens)`.
    pub start: Var,
    /// `(1, tokens)`.
    pub end: Var,
}

impl AnswerVars {
    pub fn scores(&self, g: &Graph) -> AnswerScores {
        AnswerScores {
            label_scores: g.value(self.labels).row(0).to_vec(),
            span_start: g.value(self.start).row(0).to_vec(),
            span_end: g.value(self.end).row(0).to_vec(),
        }
    }
}

pub fn answer_loss_var(g: &mut Graph, vars: &AnswerVars, target: &AnswerTarget, packed: &PackedInput) -> Var {
    let lp = g.log_softmax_rows(vars.labels);
    let mut ll = g.pick(lp, 0, target.label.index());
    match span_token_targets(target, packed) {
        Some((s, e)) => {
            let ls = g.log_softmax_rows(vars.start);
            let le = g.log_softmax_rows(vars.end);
            let ps = g.pick(ls, 0, s);
            let pe = g.pick(le, 0, e);
            ll = g.add(ll, ps);
            ll = g.add(ll, pe);
        }
        None if target.label == AnswerLabel::Span => {
            log::debug!("span target not present in packed answer input; span terms skipped");
        }
        None => {}
    }
    g.neg(ll)
}

#[derive(Clone, Debug)]
pub struct AnswerModel {
    pub store: ParamStore,
    encoder: Encoder,
    label_head: Linear,
    span_head: Linear,
}

impl AnswerModel {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "answerer.encoder", config, rng);
        let label_head = Linear::new(&mut store, "answerer.label_head", config.dim, NUM_LABELS, rng);
        let span_head = Linear::new(&mut store, "answerer.span_head", config.dim, 2, rng);
        Self { store, encoder, label_head, span_head }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    /// `gate`, when given, is a `(tokens, 1)` multiplier on the token embeddings.
    pub fn forward(&self, g: &mut Graph, packed: &PackedInput, gate: Option<Var>) -> Result<AnswerVars> {
        let options = gate.map(ForwardOptions::gated).unwrap_or_default();
        let h = self.encoder.forward(g, &self.store, &packed.token_ids, options)?;
        let cls = g.gather_rows(h, &[0]);
        let labels = self.label_head.forward(g, &self.store, cls);
        let span = self.span_head.forward(g, &self.store, h);
        let start = g.slice_cols(span, 0, 1);
        let end = g.slice_cols(span, 1, 1);
        let start = g.transpose(start);
        let end = g.transpose(end);
        Ok(AnswerVars { labels, start, end })
    }

    pub fn scores(&self, packed: &PackedInput) -> Result<AnswerScores> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, packed, None)?;
        Ok(vars.scores(&g))
    }

    pub fn predict(
        &self,
        tokenizer: &Tokenizer,
        limits: &PackingLimits,
        query: &str,
        rationale: &[Sentence],
        max_answer_tokens: usize,
    ) -> Result<AnswerPrediction> {
        let packed = pack_answer_input(tokenizer, limits, query, rationale);
        Ok(decode_answer(&self.scores(&packed)?, &packed, max_answer_tokens))
    }
}
