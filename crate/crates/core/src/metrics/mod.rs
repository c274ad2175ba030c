//! Caption evaluation metrics and score reports.

pub mod ngram;
pub mod phrases;
pub mod report;

pub use ngram::{bleu, cider_d, meteor_exact, rouge_l, Bleu, CiderScores};
pub use phrases::{extract_phrases, phrase_coverage, phrase_embed, set_coverage, Coverage, MatchMode, PhraseEmbedding, PhraseKind};
pub use report::{distribution_report, evaluate, Distribution, ScoreReport};

#[cfg(test)]
mod tests;
