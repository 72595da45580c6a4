//! Compressed, geometry-aware density estimation over embedding manifolds.
//!
//! Items live on a manifold spanned by precomputed embeddings. The manifold is
//! cut into `N` independent partitionings of `2^K` regions each by
//! density-dependent hyperplanes ([`partition`]). Every item is addressed by
//! one region per partitioning, which makes a weighted multiset of items a
//! fixed-size additive [`sketch::Sketch`]: `N` histograms of width `W`.
//!
//! On top of sketches the crate provides
//!
//! * pure density estimation and a brute-force kernel density oracle
//!   ([`density`]),
//! * a feed-forward conditional estimator mapping input sketches to output
//!   sketches, trained with width-wise KL divergence averaged over depth
//!   ([`model`]),
//! * session / top-k example construction, ranking and evaluation metrics
//!   ([`recsys`]).
//!
//! Data-parallel loops go through [`par`], which runs on rayon when the
//! `parallel` feature is enabled (the default) and sequentially otherwise.
//! Both paths produce identical results.

pub mod density;
pub mod embeddings;
mod error;
pub mod format;
mod keyed;
pub mod model;
pub mod par;
pub mod partition;
pub mod recsys;
pub mod sketch;
pub mod synth;

pub use embeddings::EmbeddingTable;
pub use error::{Error, Result};
pub use partition::{CodesMatrix, Partitioning};
pub use sketch::{Aggregator, Norm, Sketch};
