//! Locating and projecting out a toxic subspace from the feed-forward value
//! vectors of a small transformer.

pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod interventions;
pub mod microformer;
pub mod numerics;
pub mod pipeline;
pub mod ranking;
pub mod surgery;
pub mod tensorstore;

pub use error::{Error, ErrorKind, Result};
