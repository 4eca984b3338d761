//! Numerical laboratory for the bottleneck-entrance flow model
//! `x'(t) = σ(t)(1 − x(t)) − λx(t)`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotic;
pub mod dynamics;
pub mod error;
pub mod optimize;
pub mod periodic;
pub mod signals;
pub mod suite;

pub use error::{Error, Result};
