//! Tokenization, input packing and the sequence encoder.

mod packing;
mod tokenizer;
mod transformer;

pub use packing::{pack_answer_input, pack_extraction_input, PackedInput, PackingLimits, Segment};
pub use tokenizer::{pre_tokenize, Token, Tokenizer, CLS, CLS_Q, CLS_S, PAD, SEP, SEP_Q, SEP_S, UNK};
pub use transformer::{Encoder, EncoderConfig, ForwardOptions, Linear};

