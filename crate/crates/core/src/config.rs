//! Training configuration and flat key-value config files.
//!
//! Precedence is CLI flag, then config file, then the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, PackingLimits};
use crate::error::{IrcError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda_rationale: f64,
    pub lambda_no_answer: f64,
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub e2e_epochs: usize,
    pub learning_rate: f64,
    /// Learning rate of the end-to-end stage; `None` uses `learning_rate`.
    #[serde(default)]
    pub e2e_learning_rate: Option<f64>,
    pub weight_decay: f64,
    /// Target for gold sentences is `1 - s` and for the rest `s` in the
    /// extraction loss. Zero gives plain binary cross-entropy.
    #[serde(default)]
    pub rationale_label_smoothing: f64,
    /// Upper bound on rationale size during inference growth.
    pub max_rationales: usize,
    /// Paragraph pairs kept by the ranker.
    pub top_k_pairs: usize,
    /// Extraction threshold.
    pub alpha: f64,
    /// CNA probability threshold for the final gate.
    pub beta: f64,
    pub seed: u64,
    pub max_answer_tokens: usize,
    /// Keep the answer module fixed during end-to-end training.
    pub freeze_answerer: bool,
    /// Hard negative paragraphs per example when training the ranker.
    pub ranker_negatives: usize,
    pub ranker_epochs: usize,
    pub tfidf_ngram: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub min_token_count: usize,
    pub limits: PackingLimits,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_rationale: 0.1,
            lambda_no_answer: 1.0,
            temperature: 0.5,
            batch_size: 72,
            pretrain_epochs: 5,
            e2e_epochs: 2,
            learning_rate: 5e-5,
            e2e_learning_rate: None,
            weight_decay: 0.0,
            rationale_label_smoothing: 0.0,
            max_rationales: 5,
            top_k_pairs: 3,
            alpha: 0.5,
            beta: 0.5,
            seed: 0,
            max_answer_tokens: 30,
            freeze_answerer: false,
            ranker_negatives: 3,
            ranker_epochs: 5,
            tfidf_ngram: 1,
            max_grad_norm: None,
            min_token_count: 1,
            limits: PackingLimits::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("temperature", self.temperature),
            ("learning_rate", self.learning_rate),
            ("batch_size", self.batch_size as f64),
            ("max_rationales", self.max_rationales as f64),
            ("top_k_pairs", self.top_k_pairs as f64),
            ("max_answer_tokens", self.max_answer_tokens as f64),
            ("tfidf_ngram", self.tfidf_ngram as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(IrcError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_rationale", self.lambda_rationale),
            ("lambda_no_answer", self.lambda_no_answer),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(IrcError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(IrcError::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(IrcError::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if let Some(lr) = self.e2e_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(IrcError::Config(format!("e2e_learning_rate must be positive, got {lr}")));
            }
        }
        if !(0.0..0.5).contains(&self.rationale_label_smoothing) {
            return Err(IrcError::Config(format!(
                "rationale_label_smoothing must lie in [0, 0.5), got {}",
                self.rationale_label_smoothing
            )));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(IrcError::Config(format!("max_grad_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Shape of the encoder; the vocabulary size comes from the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        let d = EncoderConfig::desk_default(1);
        Self { dim: d.dim, layers: d.layers, heads: d.heads, ff_dim: d.ff_dim, max_positions: d.max_positions }
    }
}

impl EncoderShape {
    pub fn with_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_positions: self.max_positions,
        }
    }
}

/// Every configurable key, all optional. Used for both config files and CLI overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub lambda_rationale: Option<f64>,
    pub lambda_no_answer: Option<f64>,
    pub temperature: Option<f64>,
    pub batch_size: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub e2e_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub e2e_learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub rationale_label_smoothing: Option<f64>,
    pub max_rationales: Option<usize>,
    pub top_k_pairs: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
    pub max_answer_tokens: Option<usize>,
    pub freeze_answerer: Option<bool>,
    pub ranker_negatives: Option<usize>,
    pub ranker_epochs: Option<usize>,
    pub tfidf_ngram: Option<usize>,
    pub max_grad_norm: Option<f64>,
    pub min_token_count: Option<usize>,
    pub max_sequence_length: Option<usize>,
    pub max_sentence_length: Option<usize>,
    pub max_sentences: Option<usize>,
    pub max_query_length: Option<usize>,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub max_positions: Option<usize>,
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

macro_rules! apply_fields {
    ($dst:expr, $src:ident; $($f:ident),*) => {
        $( if let Some(v) = $src.$f.clone() { $dst.$f = v; } )*
    };
}

impl ConfigOverrides {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| IrcError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| IrcError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| IrcError::Config(format!("{}: {e}", path.display())))
    }

    /// Values set in `other` win.
    pub fn merge(mut self, other: &ConfigOverrides) -> Self {
        let dst = &mut self;
        merge_fields!(dst, other;
            lambda_rationale, lambda_no_answer, temperature, batch_size, pretrain_epochs, e2e_epochs,
            learning_rate, e2e_learning_rate, weight_decay, rationale_label_smoothing, max_rationales, top_k_pairs,
            alpha, beta, seed, max_answer_tokens, freeze_answerer, ranker_negatives, ranker_epochs, tfidf_ngram,
            max_grad_norm, min_token_count,
            max_sequence_length, max_sentence_length, max_sentences, max_query_length,
            dim, layers, heads, ff_dim, max_positions);
        self
    }

    pub fn apply(&self, training: &mut TrainingConfig, shape: &mut EncoderShape) {
        let src = self;
        apply_fields!(training, src;
            lambda_rationale, lambda_no_answer, temperature, batch_size, pretrain_epochs, e2e_epochs,
            learning_rate, weight_decay, rationale_label_smoothing, max_rationales, top_k_pairs, alpha, beta, seed,
            max_answer_tokens, freeze_answerer, ranker_negatives, ranker_epochs, tfidf_ngram, min_token_count);
        if let Some(c) = src.max_grad_norm {
            training.max_grad_norm = Some(c);
        }
        if let Some(lr) = src.e2e_learning_rate {
            training.e2e_learning_rate = Some(lr);
        }
        apply_fields!(training.limits, src;
            max_sequence_length, max_sentence_length, max_sentences, max_query_length);
        apply_fields!(shape, src; dim, layers, heads, ff_dim, max_positions);
    }

    /// Layers defaults, then `file`, then `cli`.
    pub fn resolve(file: Option<&ConfigOverrides>, cli: &ConfigOverrides) -> Result<(TrainingConfig, EncoderShape)> {
        let merged = file.cloned().unwrap_or_default().merge(cli);
        let mut training = TrainingConfig::default();
        let mut shape = EncoderShape::default();
        merged.apply(&mut training, &mut shape);
        training.validate()?;
        shape.with_vocab(1).validate(training.limits.max_sequence_length)?;
        Ok((training, shape))
    }
}
