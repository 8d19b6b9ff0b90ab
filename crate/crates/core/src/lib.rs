//! Counterfactual user-preference simulation for top-N recommendation.
//!
//! The crate learns stochastic structural equations for what a system shows
//! a user (impressions) and what the user picks (selections), infers the
//! exogenous noise behind the observed log, and then asks "what would this
//! user have picked from a list we never showed?". A Gaussian policy chooses
//! those lists so that the synthesized samples are hard for the ranking
//! model being trained, and a confidence filter keeps the noise in check.

pub mod config;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod intervention;
pub mod matfile;
pub mod mathcore;
pub mod pipeline;
pub mod rankers;
pub mod simulator;
pub mod synthgen;
pub mod theorylab;

pub use error::{Error, Result};
