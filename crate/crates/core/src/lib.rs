
// Negated float comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod model;
pub mod numcore;
pub mod simenv;
pub mod train;
pub use error::{Error, Result};
