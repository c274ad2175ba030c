//! Dense `f64` tensors and the reverse-mode tape every model component runs on.

mod attention;
mod tape;
mod tensor;

pub use attention::{linear, mha, AttentionWeights};
pub use tape::{gelu, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used by every normalization in the model.
pub const LN_EPS: f64 = 1e-6;

#[cfg(test)]
mod tests;
