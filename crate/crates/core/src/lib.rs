//! Multi-reference translation toolkit: weighted corpora, a small
//! encoder-decoder transformer trained from scratch, n-best decoding with
//! per-token scores, prediction filtering and weighted F1 scoring.

pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod filtering;
pub mod gbdt;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod predictions;
pub mod subword;
pub mod training;

pub use error::{Error, Result};
