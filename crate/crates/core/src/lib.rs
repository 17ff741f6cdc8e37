//! Two-stage binary function search.
//!
//! A query function is embedded, the `w` most similar pool functions are
//! retrieved by exact cosine search, and a pairwise scorer re-orders that
//! window to produce the final top-`k` list. The crate also ships the
//! evaluation harness (Recall@k, nDCG@k, oracle upper bounds, window sweeps),
//! hard-negative mining and a trainable linear scorer.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod index;
pub mod normalize;
pub mod pipeline;
pub mod rerank;

pub use error::{Error, Result};
