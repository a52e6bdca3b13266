//! Dense tensors, seeded randomness, and small numeric utilities.

mod grad;
mod linalg;
pub mod nn;
mod rng;
mod tensor;

pub use grad::{finite_diff_grad, relative_error};
pub use linalg::{expm, solve};
pub use rng::{gumbel_sample, Rng, UNIFORM_CLAMP};
pub use tensor::{matmul, Tensor};
