//! Code repair by predicting edit programs.
//!
//! A buggy token sequence is encoded once; a two-mode decoder then emits a
//! sequence of `[DELETE]`/`[INSERT]` actions, location pointers into the buggy
//! sequence and inserted words. Decoding is constrained by the edit grammar so
//! every hypothesis is a well-formed program, and hypotheses can be reranked
//! by two learned heads blended with the beam score.

pub mod data;
pub mod decoding;
pub mod diff;
pub mod error;
pub mod grammar;
mod layers;
pub mod model;
pub mod pipeline;
pub mod reranker;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{RepairError, Result};
