//! Dense tensors, the gradient tape, AdamW and seeded randomness.

mod graph;
pub(crate) mod kernels;
mod optim;
mod rng;
mod tensor;

pub use graph::{AttnDims, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use rng::{derive_seed, SeededRng};
pub use tensor::{max_abs_diff, DType, Real, Tensor};
