//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Training runs at `f32`; every operation is generic over [`Scalar`] so the
//! same code can be evaluated at `f64` when verifying gradients.

mod kernels;
mod layers;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use layers::swiglu;
pub use rng::{stream_rng, SeedStream};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
