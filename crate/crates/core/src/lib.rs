//! History-token transformers for event sequences.
//!
//! The crate is organised bottom-up:
//!
//! * [`seqdata`]: event-sequence data model, NDJSON ingestion, splitting and batching.
//! * [`toygen`]: synthetic nonstationary Markov dataset with local/global labels.
//! * [`diffcore`]: a small dense reverse-mode differentiation engine and Adam.
//! * [`encoder`]: per-field event embedding and time-based positional encoding.
//! * [`masks`]: causal and history-token attention masks plus a bottleneck checker.
//! * [`httokens`]: history-token count, placement and insertion.
//! * [`model`]: decoder-only transformer backbone, heads and embedding extraction.
//! * [`objectives`]: next-token, contrastive and supervised losses.
//! * [`pipeline`]: training loops, downstream probes, metrics and experiments.
//!
//! Batch-level work is spread over rayon when the `parallel` feature is on
//! (the default); see [`par`].

pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod httokens;
pub mod masks;
pub mod model;
pub mod objectives;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod seqdata;
pub mod toygen;

pub use error::{Error, Result};
