//! Paragraph ranking, the per-pair pipeline with CNA-driven rationale
//! growth, candidate re-ranking and the final CNA gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{AnswerModel, AnswerPrediction};
use crate::autodiff::{Graph, Var};
use crate::corpus::{AnswerLabel, Example, Passage, Sentence};
use crate::encoder::{pack_extraction_input, Encoder, EncoderConfig, ForwardOptions, Linear, PackingLimits, Tokenizer};
use crate::error::{IrcError, Result};
use crate::evaluator::OfficialPredictions;
use crate::extraction::{threshold_extract, ExtractionModel, Rationale, SentenceScores};

/// Scores a single paragraph's relevance to the query from the leading
/// `[CLS_Q]` row of its extraction-style packing.
#[derive(Clone, Debug)]
pub struct RankerModel {
    pub store: crate::autodiff::ParamStore,
    encoder: Encoder,
    head: Linear,
}

impl RankerModel {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut store = crate::autodiff::ParamStore::new();
        let encoder = Encoder::new(&mut store, "ranker.encoder", config, rng);
        let head = Linear::new(&mut store, "ranker.head", config.dim, 1, rng);
        Self { store, encoder, head }
    }

    /// Pre-sigmoid relevance logit, shape `(1, 1)`.
    pub fn logit(
        &self,
        g: &mut Graph,
        tokenizer: &Tokenizer,
        limits: &PackingLimits,
        query: &str,
        sentences: &[Sentence],
    ) -> Result<Var> {
        let packed = pack_extraction_input(tokenizer, limits, query, sentences)?;
        let h = self.encoder.forward(g, &self.store, &packed.token_ids, ForwardOptions::default())?;
        let lead = g.gather_rows(h, &[0]);
        Ok(self.head.forward(g, &self.store, lead))
    }

    /// Relevance in `(0, 1)`.
    pub fn score(&self, tokenizer: &Tokenizer, limits: &PackingLimits, query: &str, sentences: &[Sentence]) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.logit(&mut g, tokenizer, limits, query, sentences)?;
        Ok(crate::autodiff::sigmoid(g.scalar(l)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParagraphPairScore {
    pub pair: (usize, usize),
    pub score: f64,
}

/// All pairs `i < j` scored by `S_i + S_j`, best first, ties by `(i, j)`;
/// the first `k` are returned.
pub fn top_pairs(paragraph_scores: &[f64], k: usize) -> Result<Vec<ParagraphPairScore>> {
    let n = paragraph_scores.len();
    if n < 2 {
        return Err(IrcError::InvalidInput(format!("ranking needs at least 2 paragraphs, got {n}")));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(ParagraphPairScore { pair: (i, j), score: paragraph_scores[i] + paragraph_scores[j] });
        }
    }
    // Stable sort keeps the (i, j) order among equal scores.
    pairs.sort_by(|a, b| b.score.total_cmp(&a.score));
    pairs.truncate(k);
    Ok(pairs)
}

pub fn rank_paragraphs(
    ranker: &RankerModel,
    tokenizer: &Tokenizer,
    limits: &PackingLimits,
    query: &str,
    passage: &Passage,
    k: usize,
) -> Result<Vec<ParagraphPairScore>> {
    let scores = passage
        .paragraphs()
        .iter()
        .map(|p| ranker.score(tokenizer, limits, query, &p.sentences))
        .collect::<Result<Vec<_>>>()?;
    top_pairs(&scores, k)
}

/// Components the pipeline loop runs on. Implemented by the trained models
/// and by fixtures in tests.
pub trait PipelineModules {
    fn extract_scores(&self, query: &str, sentences: &[Sentence]) -> Result<SentenceScores>;
    fn answer(&self, query: &str, rationale: &[Sentence]) -> Result<AnswerPrediction>;
}

/// Trained extraction and answer modules with their shared tokenizer.
pub struct TrainedModules<'a> {
    pub tokenizer: &'a Tokenizer,
    pub limits: PackingLimits,
    pub extractor: &'a ExtractionModel,
    pub answerer: &'a AnswerModel,
    pub max_answer_tokens: usize,
}

impl PipelineModules for TrainedModules<'_> {
    fn extract_scores(&self, query: &str, sentences: &[Sentence]) -> Result<SentenceScores> {
        self.extractor.score(self.tokenizer, &self.limits, query, sentences)
    }

    fn answer(&self, query: &str, rationale: &[Sentence]) -> Result<AnswerPrediction> {
        self.answerer.predict(self.tokenizer, &self.limits, query, rationale, self.max_answer_tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub answer: AnswerPrediction,
    pub rationale: Rationale,
    /// Rationale size after the threshold step and after each growth step.
    pub growth: Vec<usize>,
}

/// Threshold extraction, then while the answer is CNA and the rationale is
/// smaller than `max_rationales`, add the most probable remaining sentence
/// and answer again. The final iteration's answer is returned.
pub fn run_pipeline(
    modules: &dyn PipelineModules,
    query: &str,
    sentences: &[Sentence],
    alpha: f64,
    max_rationales: usize,
) -> Result<PipelineRun> {
    let scores = modules.extract_scores(query, sentences)?;
    let mut rationale = threshold_extract(&scores, alpha);
    let pick = |r: &Rationale| -> Vec<Sentence> { sentences.iter().filter(|s| r.contains(&s.id)).cloned().collect() };
    let mut answer = modules.answer(query, &pick(&rationale))?;
    let mut growth = vec![rationale.len()];
    while answer.label == AnswerLabel::Cna && rationale.len() < max_rationales {
        let Some(next) = scores.argmax_excluding(&rationale) else { break };
        rationale.insert(next);
        growth.push(rationale.len());
        answer = modules.answer(query, &pick(&rationale))?;
    }
    Ok(PipelineRun { answer, rationale, growth })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionCandidate {
    pub pair: ParagraphPairScore,
    pub answer: AnswerPrediction,
    /// Sentence ids in the full passage.
    pub rationale: Rationale,
    pub rerank_score: f64,
    pub growth: Vec<usize>,
}

pub fn rerank_score(pair_score: f64, cna_probability: f64) -> f64 {
    0.5 * pair_score - cna_probability
}

/// How the final answer is gated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// CNA is output iff the winner's CNA probability exceeds beta.
    CnaAware,
    /// CNA is never output; the best other label is used.
    Distractor,
}

fn unusable(c: &PredictionCandidate) -> bool {
    c.answer.label == AnswerLabel::Span && c.answer.span_text.as_deref().is_none_or(|s| s.trim().is_empty())
}

/// Picks the candidate with the highest rerank score (Span answers with an
/// empty span rank below all others; ties keep the earlier candidate) and
/// applies the CNA gate.
pub fn rerank_and_answer(candidates: &[PredictionCandidate], beta: f64, setting: Setting) -> Result<(AnswerPrediction, Rationale)> {
    let mut best: Option<&PredictionCandidate> = None;
    for c in candidates {
        let better = match best {
            None => true,
            Some(b) => (unusable(b), -b.rerank_score) > (unusable(c), -c.rerank_score),
        };
        if better {
            best = Some(c);
        }
    }
    let winner = best.ok_or_else(|| IrcError::InvalidInput("no candidates to re-rank".into()))?;
    let answer = match setting {
        Setting::CnaAware if winner.answer.cna_probability > beta => winner.answer.as_cna(),
        _ if winner.answer.label == AnswerLabel::Cna => winner.answer.best_non_cna(),
        _ => winner.answer.clone(),
    };
    Ok((answer, winner.rationale.clone()))
}

/// Runs the pipeline on each of the top-`k` paragraph pairs.
pub fn candidates_for(
    modules: &dyn PipelineModules,
    pairs: &[ParagraphPairScore],
    example: &Example,
    alpha: f64,
    max_rationales: usize,
) -> Result<Vec<PredictionCandidate>> {
    pairs
        .iter()
        .map(|pair| {
            let (sub, mapping) = example.passage.select_paragraphs(&[pair.pair.0, pair.pair.1]);
            let sentences: Vec<Sentence> = sub.sentences().cloned().collect();
            let run = run_pipeline(modules, &example.query, &sentences, alpha, max_rationales)?;
            Ok(PredictionCandidate {
                pair: *pair,
                rerank_score: rerank_score(pair.score, run.answer.cna_probability),
                rationale: run.rationale.iter().map(|&id| mapping[id]).collect(),
                answer: run.answer,
                growth: run.growth,
            })
        })
        .collect()
}

/// Final output for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamplePrediction {
    pub id: String,
    pub answer: AnswerPrediction,
    pub rationale: Rationale,
    pub candidates: Vec<PredictionCandidate>,
}

impl ExamplePrediction {
    pub fn supporting_facts(&self, passage: &Passage) -> Vec<(String, usize)> {
        self.rationale
            .iter()
            .filter_map(|&id| passage.sentence(id))
            .map(|s| (s.paragraph_title.clone(), s.source_index))
            .collect()
    }

    /// Re-applies the gate with a different threshold or setting.
    pub fn regate(&self, beta: f64, setting: Setting) -> Result<ExamplePrediction> {
        let (answer, rationale) = rerank_and_answer(&self.candidates, beta, setting)?;
        Ok(ExamplePrediction { answer, rationale, ..self.clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub alpha: f64,
    pub beta: f64,
    pub top_k_pairs: usize,
    pub max_rationales: usize,
    pub setting: Setting,
}

/// Ranks paragraph pairs, runs the pipeline per pair and gates the winner.
pub fn predict(
    modules: &TrainedModules<'_>,
    ranker: &RankerModel,
    example: &Example,
    options: &InferenceOptions,
) -> Result<ExamplePrediction> {
    let pairs = rank_paragraphs(ranker, modules.tokenizer, &modules.limits, &example.query, &example.passage, options.top_k_pairs)?;
    let candidates = candidates_for(modules, &pairs, example, options.alpha, options.max_rationales)?;
    let (answer, rationale) = rerank_and_answer(&candidates, options.beta, options.setting)?;
    Ok(ExamplePrediction { id: example.id.clone(), answer, rationale, candidates })
}

pub fn to_official(examples: &[Example], predictions: &[ExamplePrediction]) -> OfficialPredictions {
    let mut out = OfficialPredictions::default();
    for (ex, p) in examples.iter().zip(predictions) {
        out.answer.insert(p.id.clone(), p.answer.answer_string());
        out.sp.insert(p.id.clone(), p.supporting_facts(&ex.passage));
    }
    out
}
