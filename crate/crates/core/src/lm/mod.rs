//! Tokenizer, frozen causal language model, caption loss and beam search.

pub mod beam;
pub mod loss;
pub mod model;
pub mod pretrain;
pub mod vocab;

pub use beam::{beam_search, greedy, BeamConfig, Hypothesis};
pub use loss::caption_loss;
pub use model::{init_lm, lm_forward, LmConfig, LM_PREFIX, TOK_EMBED};
pub use pretrain::{content_words, pretrain_lm, LmExample, LmPretrainConfig, LmReport};
pub use vocab::Vocabulary;

#[cfg(test)]
mod tests;
