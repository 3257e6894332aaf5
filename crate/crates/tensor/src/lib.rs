//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Provides exactly the operations the face super-resolution networks use:
//! convolution and transposed convolution, batch normalization, pointwise
//! activations, channel concatenation, nearest-neighbor rescaling and the
//! squared-error reductions.

mod conv;
mod element;
mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use element::Element;
pub use error::{Result, TensorError};
pub use tape::{BnMode, BnStats, OpKind, Tape, Var};
pub use tensor::Tensor;
