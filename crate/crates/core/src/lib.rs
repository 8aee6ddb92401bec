//! Knowledge-graph completion with bilinear-biased projection embeddings.
//!
//! The crate covers the whole pipeline:
//!
//! - [`kg`]: triple ingestion, vocabularies, filter indexes and relation statistics.
//! - [`features`]: co-occurrence vectors, kernelized clustering and the
//!   cluster-aggregated features that become the frozen diagonal weights.
//! - [`model`]: parameters, the bilinear (ProjB) and additive (ProjE) combine
//!   operators, candidate scoring and exact reverse-mode gradients.
//! - [`train`]: losses, the cluster-variance regularizer, samplers, Adam and
//!   the batched training loop.
//! - [`eval`]: raw/filtered ranking, Hits@k, the local-optima trial harness,
//!   variance traces and the batch timing sweep.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! reduced in a fixed order either way, so runs are bit-reproducible
//! regardless of thread count.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod kg;
pub mod model;
pub mod par;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
