//! Federated learning with layered gradient compression: sparsifiers, the
//! federation loop, cost and budget models, a DDPG controller, convergence
//! checks and the experiment harness.

// `!(x > 0.0)` style checks deliberately reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod budget;
pub mod controller;
pub mod error;
pub mod federation;
pub mod harness;
pub mod netmodel;
pub mod problems;
pub mod seeding;
pub mod sparsifier;
pub mod wire;

pub use error::{Error, Result};
