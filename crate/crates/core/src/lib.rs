//! Simulator for fragment-wise decentralized learning: nodes train locally,
//! split their models into fragments, and gossip each fragment along its own
//! randomly sampled topology.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::manual_is_multiple_of)]

pub mod config;
pub mod engine;
pub mod error;
pub mod fragmentation;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod spectral;
pub mod tasks;
pub mod topology;

pub use error::{Error, Result};
