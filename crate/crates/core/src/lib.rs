//! Budget-aware agentic routing laboratory.
//!
//! A synthetic long-horizon environment, boundary-policy difficulty
//! profiling, boundary-guided behaviour cloning and policy optimization for
//! a SMALL/LARGE router, budget-constrained decoding, and the harness that
//! sweeps efficiency frontiers and hard-budget tables.

pub mod config;
pub mod cost;
pub mod decode;
pub mod env;
pub mod error;
pub mod harness;
pub mod io;
pub mod pipeline;
pub mod policy;
pub mod seeding;
pub mod synth;
pub mod taxonomy;
pub mod train;

pub use error::{Error, Result};
