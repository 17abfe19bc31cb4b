//! Hybrid attention-based encoder-decoder (HAED) speech recognition.
//!
//! The decoder is split into a causal language model over previous tokens and a
//! cross-attention-only acoustic branch whose queries are encoder states at CTC
//! emission frames. Because the LM half never sees acoustics it can be adapted
//! on text alone.

pub mod acoustic;
pub mod adaptation;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decoding;
pub mod encoder;
mod error;
pub mod ilm;
pub mod lm_decoder;
pub mod metrics;
pub mod model;
pub mod ngram;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod train;
pub mod util;

pub use error::{Error, Result};
