//! Region captioning: a frozen image encoder and a frozen causal language
//! model bridged by a trainable stack of query-based feature mixers.

pub mod encoder;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prefit;
pub mod prompt;
pub mod scenegen;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
