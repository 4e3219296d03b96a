// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the component formulas.
#![allow(clippy::needless_range_loop)]
pub mod cli;
pub mod constants;
pub mod error;
pub mod estimators;
pub mod metric;
pub mod models;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
