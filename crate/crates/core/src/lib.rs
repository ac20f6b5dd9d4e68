//! Self-training classification of flow-feature records with discovery of
//! traffic classes the model has never seen.
//!
//! Each pipeline step runs four stages over the pool of unlabeled flows:
//!
//! 1. train the classifier on the current labeled set and embed the pool,
//! 2. cluster the pool embeddings with DBSCAN,
//! 3. align every cluster with the nearest known-class centroid, or mark it
//!    as a potential unknown when no class is close enough,
//! 4. cross-check the alignment against model confidence: confident,
//!    agreeing samples become pseudo-labels; unconfident, unaligned samples
//!    are reported as unknown traffic (optionally routed to an expert).

pub mod alignment;
pub mod classifier;
pub mod clustering;
pub mod config;
pub mod dataset;
mod error;
pub mod evaluation;
pub mod pipeline;
pub mod updater;

pub use error::{Error, Result};
