//! Entropy-based unsupervised domain adaptation for semantic segmentation,
//! built on a small reverse-mode autodiff core and exercised on a seeded
//! synthetic source/target benchmark.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
