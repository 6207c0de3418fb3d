//! Minimal reverse-mode autodiff engine for causal sequence models.
//!
//! Provides exactly the operations a decoder language model needs: matrix
//! products, causal 1-D convolution, (masked) softmax, layer norm, ReLU,
//! inverted dropout, embedding lookup, and a fused cross-entropy loss,
//! each with reverse-mode gradients checkable against central differences
//! via [`grad_check`].
//!
//! The engine is generic over the element type: `f32` for training speed,
//! `f64` for gradient verification. All execution is sequential and all
//! randomness flows through seeded ChaCha8 streams, so identical seeds
//! reproduce results bitwise.

mod error;
mod gradcheck;
mod graph;
mod rng;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use graph::{Graph, Mode, NodeId};
pub use rng::{mix_seed, StreamRng};
pub use scalar::Scalar;
pub use tensor::{Tensor, TokenIds};
