//! Relation-aware meta-learning for demand prediction on data-scarce market
//! segments.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), a dual-branch GRU forecaster ([`mpfn`]), segment relational
//! representations from data and from a co-purchase graph ([`relation`]),
//! the meta-learning engine with initialization modulation ([`meta`]),
//! a deterministic synthetic marketplace generator ([`synth`]), and the
//! experiment harness behind the CLI ([`harness`]).

pub mod error;
pub mod harness;
pub mod meta;
pub mod mpfn;
pub mod relation;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
