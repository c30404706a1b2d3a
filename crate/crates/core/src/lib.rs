//! Monte Carlo and exact numerics for transient random walks in random
//! environment on supercritical Galton-Watson trees.

pub mod cli;
pub mod error;
pub mod fmt;
pub mod line_walk;
pub mod model;
pub mod quenched_exact;
pub mod regen;
pub mod rng;
pub mod tree_env;
pub mod walker;

pub use error::{Error, Result};
