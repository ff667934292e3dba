//! Couplings, Markov-chain simulation and central-limit diagnostics for
//! Markov operators on metric spaces.

// NaN-rejecting comparisons and index loops over dense matrices are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod clt;
pub mod coupling;
pub mod ergodicity;
pub mod error;
pub mod gene;
pub mod kernel;
pub mod measure;
pub mod rng;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};
