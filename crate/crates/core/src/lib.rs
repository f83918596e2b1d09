//! Interpretable reading comprehension: an extraction module selects a
//! rationale of passage sentences, and an answer module reads only that
//! rationale to produce yes / no / span / "cannot answer" (CNA).
//!
//! The two modules are pre-trained separately and then trained end to end
//! through a straight-through Gumbel gate on the answer module's input.

pub mod answer;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod dataset_builder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod extraction;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod optim;
pub mod seed;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use config::{EncoderShape, TrainingConfig};
pub use corpus::{AnswerLabel, AnswerTarget, Example, Passage, Sentence};
pub use error::{IrcError, Result};
pub use evaluator::{evaluate, MetricReport, OfficialPredictions};
pub use inference::{InferenceOptions, Setting};
pub use model::IrcModel;
