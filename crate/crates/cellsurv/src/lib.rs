//! Sparse multi-modal cellular-graph survival prediction.
//!
//! The crate covers the full pipeline: building pruned KNN cellular graphs from
//! per-cell tables, a multi-branch graph encoder with a shared first-layer
//! factor and shared instance attention, cross-modal aggregation with a small
//! transformer block, training-time Bernoulli node sparsification, a
//! censoring-aware batched Cox loss with censored-portion batch sampling, and a
//! survival evaluation suite (C-index, Kaplan-Meier, log-rank, median-split
//! stratification).
//!
//! All model computation runs on the in-crate reverse-mode tape in [`tape`],
//! which also keeps a floating-point-operation ledger so compute cost can be
//! measured as a function of graph sparsity.

pub mod datagen;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sparsify;
pub mod survival;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
