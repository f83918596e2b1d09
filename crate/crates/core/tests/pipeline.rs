use std::cell::RefCell;

use irc_core::answer::AnswerPrediction;
use irc_core::config::{EncoderShape, TrainingConfig};
use irc_core::corpus::{AnswerLabel, Sentence};
use irc_core::error::Result;
use irc_core::extraction::{threshold_extract, SentenceScores};
use irc_core::inference::{run_pipeline, PipelineModules, Setting};
use irc_core::model::IrcModel;
use irc_core::synthetic::{generate, SyntheticSpec};
use irc_core::trainer::train_all;
use proptest::prelude::*;

/// Scripted modules: fixed extraction logits, and an answerer that reports
/// CNA until the rationale reaches `answer_at` sentences. Every call is recorded.
struct Scripted {
    logits: Vec<f64>,
    answer_at: usize,
    calls: RefCell<Vec<usize>>,
}

fn prediction(label: AnswerLabel) -> AnswerPrediction {
    AnswerPrediction {
        label,
        span_text: (label == AnswerLabel::Span).then(|| "x".into()),
        cna_probability: if label == AnswerLabel::Cna { 0.9 } else { 0.1 },
        label_scores: vec![0.0; 4],
        best_span: Some("x".into()),
    }
}

impl PipelineModules for Scripted {
    fn extract_scores(&self, _query: &str, sentences: &[Sentence]) -> Result<SentenceScores> {
        Ok(SentenceScores::from_logits(sentences.iter().map(|s| s.id).collect(), self.logits.clone()))
    }

    fn answer(&self, _query: &str, rationale: &[Sentence]) -> Result<AnswerPrediction> {
        self.calls.borrow_mut().push(rationale.len());
        Ok(prediction(if rationale.len() >= self.answer_at { AnswerLabel::Span } else { AnswerLabel::Cna }))
    }
}

fn sentences(n: usize) -> Vec<Sentence> {
    (0..n).map(|i| Sentence { id: i, paragraph_title: "p".into(), text: format!("s{i}"), source_index: i }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn growth_is_strictly_monotone_and_bounded(
        logits in prop::collection::vec(-6.0f64..6.0, 1..12),
        answer_at in 0usize..14,
        alpha in 0.0f64..0.95,
        max_rationales in 1usize..8,
    ) {
        let n = logits.len();
        let modules = Scripted { logits: logits.clone(), answer_at, calls: RefCell::new(vec![]) };
        let run = run_pipeline(&modules, "q", &sentences(n), alpha, max_rationales).unwrap();
        let start = threshold_extract(&SentenceScores::from_logits((0..n).collect(), logits.clone()), alpha).len();

        prop_assert_eq!(run.growth[0], start);
        prop_assert!(run.growth.windows(2).all(|w| w[1] == w[0] + 1));
        // Growth stops at the bound; a threshold result above it is kept as is.
        prop_assert!(run.growth.iter().skip(1).all(|&g| g <= max_rationales));
        prop_assert_eq!(*run.growth.last().unwrap(), run.rationale.len());
        prop_assert_eq!(&*modules.calls.borrow(), &run.growth);

        let last = run.rationale.len();
        if run.answer.label == AnswerLabel::Cna {
            prop_assert!(last >= max_rationales || last == n);
        }
        // Grown sentences are taken in decreasing probability order.
        let start_set = threshold_extract(&SentenceScores::from_logits((0..n).collect(), logits.clone()), alpha);
        let added: Vec<f64> = run.rationale.difference(&start_set).map(|&i| logits[i]).collect();
        let outside_max = (0..n).filter(|i| !run.rationale.contains(i)).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(added.iter().all(|&l| l >= outside_max));
    }

    #[test]
    fn pipeline_is_deterministic(logits in prop::collection::vec(-6.0f64..6.0, 1..10), answer_at in 0usize..10) {
        let make = || Scripted { logits: logits.clone(), answer_at, calls: RefCell::new(vec![]) };
        let a = run_pipeline(&make(), "q", &sentences(logits.len()), 0.5, 5).unwrap();
        let b = run_pipeline(&make(), "q", &sentences(logits.len()), 0.5, 5).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn trained() -> (IrcModel, Vec<irc_core::corpus::Example>) {
    let train = generate(&SyntheticSpec { examples: 10, ..SyntheticSpec::default() }).unwrap();
    let dev = generate(&SyntheticSpec { examples: 10, split: "dev".into(), ..SyntheticSpec::default() }).unwrap();
    let shape = EncoderShape { dim: 16, layers: 1, heads: 2, ff_dim: 32, max_positions: 128 };
    let mut t = TrainingConfig { batch_size: 4, pretrain_epochs: 2, ranker_epochs: 1, e2e_epochs: 1, learning_rate: 1e-3, ..TrainingConfig::default() };
    t.limits.max_sequence_length = 128;
    let mut m = IrcModel::initialize(&train, t, shape).unwrap();
    train_all(&mut m, &train).unwrap();
    (m, dev)
}

#[test]
fn trained_inference_satisfies_growth_invariants_and_is_bit_deterministic() {
    let (m, dev) = trained();
    let opts = m.inference_options(Setting::CnaAware);
    let a = m.predict_all(&dev, &opts).unwrap();
    let b = m.predict_all(&dev, &opts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
        for (cx, cy) in x.candidates.iter().zip(&y.candidates) {
            assert_eq!(cx.rerank_score.to_bits(), cy.rerank_score.to_bits());
            assert_eq!(cx.answer.cna_probability.to_bits(), cy.answer.cna_probability.to_bits());
        }
        for c in &x.candidates {
            assert!(c.growth.windows(2).all(|w| w[1] == w[0] + 1), "{:?}", c.growth);
            assert!(c.growth.iter().skip(1).all(|&g| g <= opts.max_rationales));
        }
        assert!(x.candidates.len() <= opts.top_k_pairs);
    }
}

#[test]
fn raising_beta_never_adds_cna_answers() {
    let (m, dev) = trained();
    let base = m.predict_all(&dev, &m.inference_options(Setting::CnaAware)).unwrap();
    let betas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    for p in &base {
        let cna: Vec<bool> =
            betas.iter().map(|&b| p.regate(b, Setting::CnaAware).unwrap().answer.label == AnswerLabel::Cna).collect();
        assert!(cna.windows(2).all(|w| w[0] >= w[1]), "{}: {cna:?}", p.id);
        assert!(!cna[10], "beta = 1 leaves no room for CNA");
    }
}

#[test]
fn distractor_setting_never_answers_cna() {
    let (m, dev) = trained();
    for p in m.predict_all(&dev, &m.inference_options(Setting::Distractor)).unwrap() {
        assert_ne!(p.answer.label, AnswerLabel::Cna);
        assert_eq!(p.regate(0.0, Setting::Distractor).unwrap().answer.label == AnswerLabel::Cna, false);
    }
}
