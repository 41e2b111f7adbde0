//! Self-explainable social recommendation.
//!
//! Two GNN towers encode a user–item interaction graph and a social graph.
//! For every (user, candidate item) pair, ego-paths sampled around the user
//! are scored for relevance to the candidate, a subset is drawn as the
//! explanation, and the kept paths are re-aggregated into the user
//! representation that produces the ranking score.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod egopath;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod reaggregate;
pub mod rng;
pub mod sparse;
pub mod synthetic;
pub mod tensor;
pub mod towers;
pub mod training;

pub use error::{Result, SorexError};
