//! Minimal dense-tensor engine with tape-based reverse-mode automatic
//! differentiation, sized for small convolutional segmentation networks on
//! the CPU.
//!
//! Values are [`Tensor`]s; a forward computation is recorded on a [`Tape`]
//! and differentiated with [`Tape::backward`]. Learnable values live in a
//! [`ParamStore`] and are updated by [`Adam`].

mod conv;
mod element;
mod error;
mod optim;
mod param;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, Tape, Var, BCE_EPS};
pub use tensor::{dims4, Tensor};
