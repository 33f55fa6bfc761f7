//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: 2-D feature maps laid out
//! `[channels, positions]`, the handful of primitives a 1-D U-net with
//! cross attention needs, an Adam optimizer, and a finite-difference
//! gradient checker.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use nn::{AttentionOutput, Conv1d, CrossAttention, Linear};
pub use params::{Bindings, Gradients, ParamId, Parameters};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
