// Negated float comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod ctr;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod report;
mod serde_ext;
pub mod synth;
pub mod train;

pub use error::{CtrError, Result};
