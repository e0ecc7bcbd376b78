//! Minimal deterministic tensor algebra for small convolutional and recurrent networks.
//!
//! * [`Tensor`] is a dense row-major array; image tensors use `(batch, channels, height, width)`.
//! * [`ops`] holds pure forward kernels and their adjoints.
//! * [`Tape`] records a forward pass and differentiates it in reverse mode.
//! * [`OptState`] implements Adam and RMSprop over [`NetworkParams`].
//!
//! Everything runs single-threaded, so identical inputs give bit-identical outputs.

pub mod error;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use ops::{Activation, ConvSpec};
pub use optim::{OptMethod, OptState};
pub use params::{ArchDescriptor, GradStore, LayerKind, LayerSpec, NetworkParams};
pub use scalar::Float;
pub use tape::{ParamVars, Tape, Var};
pub use tensor::Tensor;
