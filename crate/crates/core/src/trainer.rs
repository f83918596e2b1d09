//! Per-module pre-training and end-to-end training with sampled rationales.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamStore};
use crate::corpus::{AnswerLabel, AnswerTarget, Example, Sentence};
use crate::dataset_builder::{gold_pair_with_augmentation, TfidfIndex};
use crate::encoder::{pack_answer_input, pack_extraction_input, Segment};
use crate::error::{IrcError, Result};
use crate::extraction::{
    gumbel_sample, no_answer_penalty_var, rationale_loss_var, smoothed_rationale_loss_var, straight_through_mask, Rationale, SampledRationale,
    SentenceScores,
};
use crate::model::IrcModel;
use crate::optim::{clip_global_norm, AdamW, AdamWState, GradAccumulator};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extractor,
    Answerer,
    Ranker,
    EndToEnd,
}

impl Stage {
    pub fn key(self) -> &'static str {
        match self {
            Stage::Extractor => "train-extractor",
            Stage::Answerer => "train-answerer",
            Stage::Ranker => "train-ranker",
            Stage::EndToEnd => "train-e2e",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Module {
    Extractor,
    Answerer,
    Ranker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    pub examples: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_answer_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_rationale_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_no_answer_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub example_id: String,
    pub sampled_rationale: Rationale,
    pub effective_label: AnswerLabel,
    pub answer_loss: f64,
    pub rationale_loss: f64,
    /// Absent when the penalty weight is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_answer_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<TrainStepRecord>,
}

/// Gold-paragraph views of every example, each followed by its
/// negative-sampled CNA companion.
pub fn pretraining_set(examples: &[Example], ngram: usize, seed: u64) -> Vec<Example> {
    let mut out = Vec::with_capacity(examples.len() * 2);
    for ex in examples {
        let (gold, aug) = gold_pair_with_augmentation(ex, ngram, seed);
        match gold {
            Some(g) => out.push(g),
            None => log::warn!("{}: no gold paragraph in passage, skipped", ex.id),
        }
        out.extend(aug);
    }
    out
}

fn sentences_in(example: &Example, ids: &Rationale) -> Vec<Sentence> {
    example.passage.sentences().filter(|s| ids.contains(&s.id)).cloned().collect()
}

type ModuleGrads = Vec<Option<Matrix>>;

struct StepOutput {
    loss: f64,
    answer_loss: Option<f64>,
    rationale_loss: Option<f64>,
    no_answer_loss: Option<f64>,
    /// One entry per module of the stage, in the same order.
    grads: Vec<ModuleGrads>,
    record: Option<TrainStepRecord>,
}

fn store(model: &IrcModel, m: Module) -> &ParamStore {
    match m {
        Module::Extractor => &model.extractor.store,
        Module::Answerer => &model.answerer.store,
        Module::Ranker => &model.ranker.store,
    }
}

fn store_mut(model: &mut IrcModel, m: Module) -> &mut ParamStore {
    match m {
        Module::Extractor => &mut model.extractor.store,
        Module::Answerer => &mut model.answerer.store,
        Module::Ranker => &mut model.ranker.store,
    }
}

fn optimizer_slot(model: &mut IrcModel, m: Module) -> &mut Option<AdamWState> {
    match m {
        Module::Extractor => &mut model.extractor_optimizer,
        Module::Answerer => &mut model.answerer_optimizer,
        Module::Ranker => &mut model.ranker_optimizer,
    }
}

fn progress_slot(model: &mut IrcModel, stage: Stage) -> &mut usize {
    match stage {
        Stage::Extractor => &mut model.progress.extractor_epochs,
        Stage::Answerer => &mut model.progress.answerer_epochs,
        Stage::Ranker => &mut model.progress.ranker_epochs,
        Stage::EndToEnd => &mut model.progress.e2e_epochs,
    }
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Shared epoch loop: seeded shuffling, gradient accumulation up to the batch
/// size, optional clipping, and one AdamW per trained module. Runs from the
/// stage's completed epoch count up to `target_epochs`, so a reloaded
/// checkpoint continues exactly where it stopped.
fn run_stage(
    model: &mut IrcModel,
    stage: Stage,
    modules: &[(Module, bool)],
    item_ids: &[String],
    target_epochs: usize,
    log: &mut TrainingLog,
    step: &mut dyn FnMut(&IrcModel, usize, usize) -> Result<StepOutput>,
) -> Result<()> {
    if item_ids.is_empty() {
        return Err(IrcError::EmptyDataset(format!("{} has no training items", stage.key())));
    }
    let cfg = model.training.clone();
    let done = *progress_slot(model, stage);
    let lr = match stage {
        Stage::EndToEnd => cfg.e2e_learning_rate.unwrap_or(cfg.learning_rate),
        _ => cfg.learning_rate,
    };
    let mut optimizers = Vec::with_capacity(modules.len());
    for &(m, _) in modules {
        let mut opt = AdamW::new(store(model, m), lr, cfg.weight_decay);
        if done > 0 {
            let state = optimizer_slot(model, m)
                .clone()
                .ok_or_else(|| IrcError::Checkpoint(format!("{} resumed without optimizer state", stage.key())))?;
            opt.restore(state)?;
        }
        optimizers.push(opt);
    }

    let mut step_index = 0;
    for epoch in done..target_epochs {
        let mut order: Vec<usize> = (0..item_ids.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, stage.key(), &[epoch as u64]));
        let mut losses = Vec::with_capacity(order.len());
        let (mut la, mut lr, mut lna) = (Vec::new(), Vec::new(), Vec::new());

        for batch in order.chunks(cfg.batch_size) {
            let mut accs: Vec<GradAccumulator> = modules.iter().map(|&(m, _)| GradAccumulator::new(store(model, m).len())).collect();
            for &i in batch {
                let out = step(model, i, epoch)?;
                if !out.loss.is_finite() {
                    return Err(IrcError::Divergence {
                        step: step_index,
                        loss: out.loss,
                        example_ids: batch.iter().map(|&b| item_ids[b].clone()).collect(),
                    });
                }
                losses.push(out.loss);
                la.push(out.answer_loss);
                lr.push(out.rationale_loss);
                lna.push(out.no_answer_loss);
                for (acc, g) in accs.iter_mut().zip(out.grads) {
                    acc.add(g);
                }
                log.steps.extend(out.record);
            }
            let mut grads: Vec<ModuleGrads> = accs.iter_mut().map(GradAccumulator::take_mean).collect();
            if let Some(max) = cfg.max_grad_norm {
                let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
                let mut flat: ModuleGrads = grads.into_iter().flatten().collect();
                clip_global_norm(&mut flat, max);
                let mut rest = flat.into_iter();
                grads = sizes.iter().map(|&n| rest.by_ref().take(n).collect()).collect();
            }
            for ((&(m, trainable), opt), g) in modules.iter().zip(&mut optimizers).zip(grads) {
                if trainable {
                    opt.step(store_mut(model, m), &g);
                }
            }
            step_index += 1;
        }

        let entry = EpochLog {
            stage,
            epoch: epoch + 1,
            examples: losses.len(),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            mean_answer_loss: mean_of(&la),
            mean_rationale_loss: mean_of(&lr),
            mean_no_answer_loss: mean_of(&lna),
        };
        log::info!("{}: epoch {} mean loss {:.5}", stage.key(), entry.epoch, entry.mean_loss);
        log.epochs.push(entry);
        *progress_slot(model, stage) = epoch + 1;
        for (&(m, _), opt) in modules.iter().zip(&optimizers) {
            *optimizer_slot(model, m) = Some(opt.state());
        }
    }
    Ok(())
}

fn extractor_step(model: &IrcModel, ex: &Example) -> Result<StepOutput> {
    let sentences: Vec<Sentence> = ex.passage.sentences().cloned().collect();
    let packed = pack_extraction_input(&model.tokenizer, &model.training.limits, &ex.query, &sentences)?;
    let mut g = Graph::new();
    let logits = model.extractor.logits(&mut g, &packed)?;
    let loss = smoothed_rationale_loss_var(&mut g, logits, &packed.sentence_ids, &ex.gold_rationale, model.training.rationale_label_smoothing);
    let grads = g.backward(loss);
    let value = g.scalar(loss);
    Ok(StepOutput {
        loss: value,
        answer_loss: None,
        rationale_loss: Some(value),
        no_answer_loss: None,
        grads: vec![g.param_grads(&grads, &model.extractor.store)],
        record: None,
    })
}

fn answerer_step(model: &IrcModel, ex: &Example) -> Result<StepOutput> {
    let rationale = sentences_in(ex, &ex.gold_rationale);
    let packed = pack_answer_input(&model.tokenizer, &model.training.limits, &ex.query, &rationale);
    let mut g = Graph::new();
    let vars = model.answerer.forward(&mut g, &packed, None)?;
    let loss = crate::answer::answer_loss_var(&mut g, &vars, &ex.gold_answer, &packed);
    let grads = g.backward(loss);
    let value = g.scalar(loss);
    Ok(StepOutput {
        loss: value,
        answer_loss: Some(value),
        rationale_loss: None,
        no_answer_loss: None,
        grads: vec![g.param_grads(&grads, &model.answerer.store)],
        record: None,
    })
}

/// Trains the extraction module with the rationale loss on gold-pair
/// passages (and their CNA companions).
pub fn pretrain_extractor(model: &mut IrcModel, data: &[Example]) -> Result<TrainingLog> {
    let ids: Vec<String> = data.iter().map(|e| e.id.clone()).collect();
    let mut log = TrainingLog::default();
    let epochs = model.training.pretrain_epochs;
    run_stage(model, Stage::Extractor, &[(Module::Extractor, true)], &ids, epochs, &mut log, &mut |m, i, _| {
        extractor_step(m, &data[i])
    })?;
    Ok(log)
}

/// Trains the answer module on `(query, gold rationale)` inputs.
pub fn pretrain_answerer(model: &mut IrcModel, data: &[Example]) -> Result<TrainingLog> {
    let ids: Vec<String> = data.iter().map(|e| e.id.clone()).collect();
    let mut log = TrainingLog::default();
    let epochs = model.training.pretrain_epochs;
    run_stage(model, Stage::Answerer, &[(Module::Answerer, true)], &ids, epochs, &mut log, &mut |m, i, _| {
        answerer_step(m, &data[i])
    })?;
    Ok(log)
}

/// Binary relevance items for the ranker: every gold paragraph as a positive
/// and the most TF-IDF-similar non-gold paragraphs as negatives.
pub fn ranker_items(examples: &[Example], negatives: usize, ngram: usize) -> Vec<(usize, usize, bool)> {
    let mut items = Vec::new();
    for (e, ex) in examples.iter().enumerate() {
        let gold = ex.gold_paragraph_indices();
        if gold.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..ex.passage.paragraph_count()).filter(|p| !gold.contains(p)).collect();
        items.extend(gold.iter().map(|&p| (e, p, true)));
        if others.is_empty() || negatives == 0 {
            continue;
        }
        let pool = others.iter().map(|&p| ex.passage.paragraphs()[p].clone()).collect();
        let ranked = TfidfIndex::build(pool, ngram).ranked_paragraphs(&ex.query);
        items.extend(ranked.into_iter().take(negatives).map(|k| (e, others[k], false)));
    }
    items
}

/// Trains the paragraph ranker on full passages.
pub fn pretrain_ranker(model: &mut IrcModel, examples: &[Example]) -> Result<TrainingLog> {
    let items = ranker_items(examples, model.training.ranker_negatives, model.training.tfidf_ngram);
    let ids: Vec<String> = items.iter().map(|&(e, p, _)| format!("{}@{p}", examples[e].id)).collect();
    let mut log = TrainingLog::default();
    let epochs = model.training.ranker_epochs;
    run_stage(model, Stage::Ranker, &[(Module::Ranker, true)], &ids, epochs, &mut log, &mut |m, i, _| {
        let (e, p, positive) = items[i];
        let ex = &examples[e];
        let mut g = Graph::new();
        let sentences = &ex.passage.paragraphs()[p].sentences;
        let logit = m.ranker.logit(&mut g, &m.tokenizer, &m.training.limits, &ex.query, sentences)?;
        let gold = if positive { BTreeSet::from([0]) } else { BTreeSet::new() };
        let loss = rationale_loss_var(&mut g, logit, &[0], &gold);
        let grads = g.backward(loss);
        Ok(StepOutput {
            loss: g.scalar(loss),
            answer_loss: None,
            rationale_loss: None,
            no_answer_loss: None,
            grads: vec![g.param_grads(&grads, &m.ranker.store)],
            record: None,
        })
    })?;
    Ok(log)
}

/// Gradients of one end-to-end step for the extraction and answer modules.
pub struct E2eGradients {
    pub extractor: Vec<Option<Matrix>>,
    pub answerer: Vec<Option<Matrix>>,
}

/// Gumbel sample of a rationale; an empty draw falls back to the most
/// probable sentence so the answer module always sees some evidence.
pub fn sample_nonempty(scores: &SentenceScores, tau: f64, rng: &mut impl Rng) -> SampledRationale {
    let mut sample = gumbel_sample(scores, tau, rng);
    if !sample.hard_mask.iter().any(|&h| h) {
        let top = scores.argmax_excluding(&Rationale::new()).expect("scores are non-empty");
        let k = scores.sentence_ids.iter().position(|&id| id == top).expect("argmax is a scored sentence");
        sample.hard_mask[k] = true;
    }
    sample
}

/// One end-to-end step: sample a rationale, replace the target with CNA when
/// the sample misses a gold sentence, and back-propagate
/// `L_answer + lambda_r * L_rationale + lambda_na * L_no_answer`, reaching the
/// extraction module through the straight-through gate on the answer input.
pub fn e2e_step(model: &IrcModel, example: &Example, rng: &mut impl Rng) -> Result<(E2eGradients, TrainStepRecord)> {
    let cfg = &model.training;
    let sentences: Vec<Sentence> = example.passage.sentences().cloned().collect();
    let ext_input = pack_extraction_input(&model.tokenizer, &cfg.limits, &example.query, &sentences)?;
    let ids = &ext_input.sentence_ids;

    let mut g = Graph::new();
    let logits = model.extractor.logits(&mut g, &ext_input)?;
    let scores = SentenceScores::from_logits(ids.clone(), g.value(logits).column(0).to_vec());
    let sample = sample_nonempty(&scores, cfg.temperature, rng);
    let sampled = sample.selected(ids);

    let target = if sampled.is_superset(&example.gold_rationale) { example.gold_answer.clone() } else { AnswerTarget::cna() };
    let ans_input = pack_answer_input(&model.tokenizer, &cfg.limits, &example.query, &sentences_in(example, &sampled));

    // Row k of the mask gates sentence ids[k]; the appended row of ones covers markers and the query.
    let mask = straight_through_mask(&mut g, logits, &sample, cfg.temperature);
    let ones = g.constant(Array2::ones((1, 1)));
    let rows = g.concat_rows(&[mask, ones]);
    let gate_index: Vec<usize> = ans_input
        .segments
        .iter()
        .map(|s| match s {
            Segment::Sentence { id, .. } => ids.iter().position(|x| x == id).expect("answer sentence was extracted"),
            _ => ids.len(),
        })
        .collect();
    let gate = g.gather_rows(rows, &gate_index);

    let vars = model.answerer.forward(&mut g, &ans_input, Some(gate))?;
    let answer_loss = crate::answer::answer_loss_var(&mut g, &vars, &target, &ans_input);
    let rationale_loss = smoothed_rationale_loss_var(&mut g, logits, ids, &example.gold_rationale, cfg.rationale_label_smoothing);
    let weighted_r = g.scale(rationale_loss, cfg.lambda_rationale);
    let mut total = g.add(answer_loss, weighted_r);
    let mut no_answer_loss = None;
    if cfg.lambda_no_answer > 0.0 {
        let penalty = no_answer_penalty_var(&mut g, logits, ids, &sampled, &example.answer_sentences());
        no_answer_loss = Some(penalty.map_or(0.0, |p| g.scalar(p)));
        if let Some(p) = penalty {
            let weighted = g.scale(p, cfg.lambda_no_answer);
            total = g.add(total, weighted);
        }
    }

    let grads = g.backward(total);
    let record = TrainStepRecord {
        example_id: example.id.clone(),
        sampled_rationale: sampled,
        effective_label: target.label,
        answer_loss: g.scalar(answer_loss),
        rationale_loss: g.scalar(rationale_loss),
        no_answer_loss,
        total_loss: g.scalar(total),
    };
    let out = E2eGradients {
        extractor: g.param_grads(&grads, &model.extractor.store),
        answerer: g.param_grads(&grads, &model.answerer.store),
    };
    Ok((out, record))
}

const E2E_SAMPLE_TAG: u64 = 0x4532_45;

/// End-to-end training of both modules (the answer module stays fixed when
/// `freeze_answerer` is set). Each step draws its rationale from a stream
/// keyed by (seed, example id, epoch).
pub fn train_e2e(model: &mut IrcModel, data: &[Example]) -> Result<TrainingLog> {
    let ids: Vec<String> = data.iter().map(|e| e.id.clone()).collect();
    let mut log = TrainingLog::default();
    let epochs = model.training.e2e_epochs;
    let modules = [(Module::Extractor, true), (Module::Answerer, !model.training.freeze_answerer)];
    let seed = model.training.seed;
    run_stage(model, Stage::EndToEnd, &modules, &ids, epochs, &mut log, &mut |m, i, epoch| {
        let ex = &data[i];
        let mut rng = seed::rng(seed, &ex.id, &[E2E_SAMPLE_TAG, epoch as u64]);
        let (grads, record) = e2e_step(m, ex, &mut rng)?;
        Ok(StepOutput {
            loss: record.total_loss,
            answer_loss: Some(record.answer_loss),
            rationale_loss: Some(record.rationale_loss),
            no_answer_loss: record.no_answer_loss,
            grads: vec![grads.extractor, grads.answerer],
            record: Some(record),
        })
    })?;
    Ok(log)
}

/// Both sides of `-log E[P(A*|R,Q)] <= E[-log P(A*|R,Q)]`, estimated over
/// rationales drawn from the extractor. The bound holds when
/// `violation()` is non-positive up to sampling error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenEstimate {
    pub draws: usize,
    pub neg_log_mean: f64,
    pub mean_neg_log: f64,
    /// Standard error of `mean_neg_log`.
    pub std_error: f64,
}

impl JensenEstimate {
    pub fn violation(&self) -> f64 {
        self.neg_log_mean - self.mean_neg_log
    }
}

pub fn jensen_estimate(model: &IrcModel, example: &Example, draws: usize, rng: &mut impl Rng) -> Result<JensenEstimate> {
    if draws < 2 {
        return Err(IrcError::InvalidInput("need at least two draws".into()));
    }
    let cfg = &model.training;
    let sentences: Vec<Sentence> = example.passage.sentences().cloned().collect();
    let scores = model.extractor.score(&model.tokenizer, &cfg.limits, &example.query, &sentences)?;
    let mut nll = Vec::with_capacity(draws);
    for _ in 0..draws {
        let sampled = sample_nonempty(&scores, cfg.temperature, rng).selected(&scores.sentence_ids);
        let packed = pack_answer_input(&model.tokenizer, &cfg.limits, &example.query, &sentences_in(example, &sampled));
        nll.push(crate::answer::answer_loss(&model.answerer.scores(&packed)?, &example.gold_answer, &packed));
    }
    let n = draws as f64;
    let mean_neg_log = nll.iter().sum::<f64>() / n;
    // -log mean(exp(-x)) via log-sum-exp.
    let lo = nll.iter().copied().fold(f64::INFINITY, f64::min);
    let neg_log_mean = lo - (nll.iter().map(|x| (lo - x).exp()).sum::<f64>() / n).ln();
    let var = nll.iter().map(|x| (x - mean_neg_log).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(JensenEstimate { draws, neg_log_mean, mean_neg_log, std_error: (var / n).sqrt() })
}

/// Every pre-training stage followed by end-to-end training. `train` holds
/// full passages; the module stages see gold-pair views plus CNA companions.
pub fn train_all(model: &mut IrcModel, train: &[Example]) -> Result<TrainingLog> {
    let set = pretraining_set(train, model.training.tfidf_ngram, model.training.seed);
    let mut log = pretrain_extractor(model, &set)?;
    for part in [pretrain_answerer(model, &set)?, pretrain_ranker(model, train)?, train_e2e(model, &set)?] {
        log.epochs.extend(part.epochs);
        log.steps.extend(part.steps);
    }
    Ok(log)
}
