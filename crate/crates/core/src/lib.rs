//! Attention-guided evidence elicitation for context-grounded question
//! answering.
//!
//! The language model reads the prompt once; the attention its deeper layers
//! pay to each context sentence while producing the first answer token
//! scores that sentence as evidence. High-scoring sentences are wrapped in
//! marker strings and the model answers again from the highlighted context.
//!
//! Modules, bottom-up:
//!
//! - [`trace`]: attention traces and the `SETR1` trace file format
//! - [`segment`]: sentence splitting and sentence/token alignment
//! - [`scorer`]: sentence attention, evidence scores, threshold selection
//! - [`highlight`]: context rewriting strategies and prompt templates
//! - [`metrics`]: EM / token F1, AUROC, NDCG, elicit ratio, evidence labels
//! - [`backend`]: the provider contract, a stream-protocol client and a
//!   deterministic mock provider
//! - [`pipeline`]: per-sample methods, sweeps, dataset ingestion, reports

pub mod backend;
pub mod highlight;
pub mod metrics;
pub mod pipeline;
pub mod scorer;
pub mod segment;
pub mod trace;

pub use scorer::{Granularity, LayerSpan};
pub use segment::SegmentedContext;
pub use trace::AttentionTrace;
