//! Selective state-space vision backbone with dynamic token pruning and
//! block selection, plus the analytic cost model that goes with it.

// Index loops mirror the math in the kernels; `!(x > 0.0)` rejects NaN;
// one-element segment lists are real segment lists.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod block_select;
pub mod error;
pub mod flops;
pub mod losses;
pub mod numerics;
pub mod opcount;
pub mod pruning;
pub mod ssm;
pub mod vim;

pub use error::{Error, Result};
