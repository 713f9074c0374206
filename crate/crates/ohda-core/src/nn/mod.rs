//! Minimal reverse-mode differentiation engine.
//!
//! The layer set is fixed: dense, ReLU, inverted dropout and gradient
//! reversal. A forward pass records a [`Tape`]; [`Net::backward`] consumes it
//! and returns exact parameter and input gradients. Everything runs on f64 so
//! central finite differences can certify the gradients to 1e-4 relative
//! error.

mod checkpoint;
mod loss;
mod net;
mod optim;
mod tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, LayerSpec, Manifest, NetSpec, CHECKPOINT_FORMAT,
};
pub use loss::{binary_ce, sigmoid, smooth_l1, softmax_ce, softmax_rows};
pub use net::{grad_check, DenseGrad, DropoutMode, Layer, Mode, Net, NetGrads, ParamCursor, Tape};
pub use optim::{ema_update, Adam, AdamConfig};
pub use tensor::Tensor;
