use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IrcError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfVocabulary { id: u32, vocab_size: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step} (loss {loss}); batch: {example_ids:?}")]
    Divergence {
        step: usize,
        loss: f64,
        example_ids: Vec<String>,
    },
}

impl IrcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Self::Json { context: context.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, IrcError>;
