//! The trained model bundle and its self-describing JSON checkpoint.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answer::AnswerModel;
use crate::autodiff::ParamStore;
use crate::config::{EncoderShape, TrainingConfig};
use crate::corpus::Example;
use crate::encoder::Tokenizer;
use crate::error::{IrcError, Result};
use crate::extraction::ExtractionModel;
use crate::evaluator::evaluate;
use crate::inference::{self, to_official, ExamplePrediction, InferenceOptions, RankerModel, Setting, TrainedModules};
use crate::optim::{AdamWState, Tensor};
use crate::seed;

/// Completed epochs per training stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub extractor_epochs: usize,
    pub answerer_epochs: usize,
    pub ranker_epochs: usize,
    pub e2e_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleState {
    pub params: BTreeMap<String, Tensor>,
    /// Optimizer of the stage that last updated the module.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamWState>,
}

impl ModuleState {
    fn capture(store: &ParamStore, optimizer: Option<&AdamWState>) -> Self {
        Self {
            params: store.named().map(|(n, m)| (n.to_string(), Tensor::from(m))).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.clone().try_into()?)))
            .collect::<Result<Vec<_>>>()?;
        store.load_named(tensors)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub training: TrainingConfig,
    pub shape: EncoderShape,
    pub tokenizer: Tokenizer,
    pub progress: Progress,
    pub extractor: ModuleState,
    pub answerer: ModuleState,
    pub ranker: ModuleState,
}

const FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| IrcError::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| IrcError::json(path.display().to_string(), e))?;
        w.flush().map_err(|e| IrcError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| IrcError::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| IrcError::json(path.display().to_string(), e))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(IrcError::Checkpoint(format!("unsupported format version {}", ckpt.format_version)));
        }
        Ok(ckpt)
    }
}

/// Tokenizer, the three modules and the training state needed to resume.
#[derive(Clone, Debug)]
pub struct IrcModel {
    pub training: TrainingConfig,
    pub shape: EncoderShape,
    pub tokenizer: Tokenizer,
    pub extractor: ExtractionModel,
    pub answerer: AnswerModel,
    pub ranker: RankerModel,
    pub progress: Progress,
    pub extractor_optimizer: Option<AdamWState>,
    pub answerer_optimizer: Option<AdamWState>,
    pub ranker_optimizer: Option<AdamWState>,
}

impl IrcModel {
    /// Builds the vocabulary from the training queries and passages and
    /// initializes every module from the configured seed.
    pub fn initialize(train: &[Example], training: TrainingConfig, shape: EncoderShape) -> Result<Self> {
        training.validate()?;
        if train.is_empty() {
            return Err(IrcError::EmptyDataset("no training examples to build a vocabulary from".into()));
        }
        let texts = train
            .iter()
            .flat_map(|ex| std::iter::once(ex.query.as_str()).chain(ex.passage.sentences().map(|s| s.text.as_str())));
        let tokenizer = Tokenizer::build(texts, training.min_token_count);
        let config = shape.with_vocab(tokenizer.vocab_size());
        config.validate(training.limits.max_sequence_length)?;
        let s = training.seed;
        Ok(Self {
            extractor: ExtractionModel::new(config, &mut seed::rng(s, "init-extractor", &[])),
            answerer: AnswerModel::new(config, &mut seed::rng(s, "init-answerer", &[])),
            ranker: RankerModel::new(config, &mut seed::rng(s, "init-ranker", &[])),
            training,
            shape,
            tokenizer,
            progress: Progress::default(),
            extractor_optimizer: None,
            answerer_optimizer: None,
            ranker_optimizer: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            training: self.training.clone(),
            shape: self.shape,
            tokenizer: self.tokenizer.clone(),
            progress: self.progress,
            extractor: ModuleState::capture(&self.extractor.store, self.extractor_optimizer.as_ref()),
            answerer: ModuleState::capture(&self.answerer.store, self.answerer_optimizer.as_ref()),
            ranker: ModuleState::capture(&self.ranker.store, self.ranker_optimizer.as_ref()),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.shape.with_vocab(ckpt.tokenizer.vocab_size());
        // Parameters are overwritten below, so the init stream is irrelevant.
        let mut rng = seed::rng(0, "checkpoint-skeleton", &[]);
        let mut extractor = ExtractionModel::new(config, &mut rng);
        let mut answerer = AnswerModel::new(config, &mut rng);
        let mut ranker = RankerModel::new(config, &mut rng);
        ckpt.extractor.restore_into(&mut extractor.store)?;
        ckpt.answerer.restore_into(&mut answerer.store)?;
        ckpt.ranker.restore_into(&mut ranker.store)?;
        Ok(Self {
            training: ckpt.training.clone(),
            shape: ckpt.shape,
            tokenizer: ckpt.tokenizer.clone(),
            extractor,
            answerer,
            ranker,
            progress: ckpt.progress,
            extractor_optimizer: ckpt.extractor.optimizer.clone(),
            answerer_optimizer: ckpt.answerer.optimizer.clone(),
            ranker_optimizer: ckpt.ranker.optimizer.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn modules(&self) -> TrainedModules<'_> {
        TrainedModules {
            tokenizer: &self.tokenizer,
            limits: self.training.limits,
            extractor: &self.extractor,
            answerer: &self.answerer,
            max_answer_tokens: self.training.max_answer_tokens,
        }
    }

    pub fn inference_options(&self, setting: Setting) -> InferenceOptions {
        InferenceOptions {
            alpha: self.training.alpha,
            beta: self.training.beta,
            top_k_pairs: self.training.top_k_pairs,
            max_rationales: self.training.max_rationales,
            setting,
        }
    }

    pub fn predict(&self, example: &Example, options: &InferenceOptions) -> Result<ExamplePrediction> {
        inference::predict(&self.modules(), &self.ranker, example, options)
    }

    pub fn predict_all(&self, examples: &[Example], options: &InferenceOptions) -> Result<Vec<ExamplePrediction>> {
        examples.iter().map(|ex| self.predict(ex, options)).collect()
    }

    /// Grid search over extraction threshold and CNA gate for the best answer
    /// F1 on `examples`. One inference pass per alpha; beta only re-gates.
    /// Earlier grid points win ties.
    pub fn tune_thresholds(&self, examples: &[Example], alphas: &[f64], betas: &[f64], setting: Setting) -> Result<ThresholdChoice> {
        let mut best: Option<ThresholdChoice> = None;
        for &alpha in alphas {
            let options = InferenceOptions { alpha, ..self.inference_options(setting) };
            let base = self.predict_all(examples, &options)?;
            for &beta in betas {
                let gated = base.iter().map(|p| p.regate(beta, setting)).collect::<Result<Vec<_>>>()?;
                let f1 = evaluate(examples, &to_official(examples, &gated))?.answer_f1;
                if best.as_ref().is_none_or(|b| f1 > b.answer_f1) {
                    best = Some(ThresholdChoice { alpha, beta, answer_f1: f1 });
                }
            }
        }
        best.ok_or_else(|| IrcError::InvalidInput("empty threshold grid".into()))
    }

    /// Sets the inference defaults stored in the checkpoint.
    pub fn set_thresholds(&mut self, choice: &ThresholdChoice) {
        self.training.alpha = choice.alpha;
        self.training.beta = choice.beta;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub alpha: f64,
    pub beta: f64,
    pub answer_f1: f64,
}

/// `0, step, 2 * step, ...` up to and including 0.9 (up to rounding).
pub fn threshold_grid(step: f64) -> Vec<f64> {
    let n = (0.9 / step + 1e-9).floor() as u32;
    (0..=n).map(|i| f64::from(i) * step).collect()
}
