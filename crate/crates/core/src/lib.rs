//! Dual-domain mean-teacher detection training with zigzag scheduling,
//! on a seeded two-domain synthetic scene task.

pub mod boxes;
pub mod cli;
pub mod detector;
pub mod error;
pub mod eval;
pub mod mt;
pub mod rng;
pub mod schedule;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
