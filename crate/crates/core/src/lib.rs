//! Controllable video generation from a still image and a caption.
//!
//! An image is encoded by a VQ-VAE encoder, fused with a caption through
//! cross-attention into an initial latent state, evolved by an augmented
//! neural ODE, and decoded frame by frame at any requested set of times.

mod attention;
mod kernels;

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod odesolve;
pub mod optim;
pub mod scalar;
pub mod shapesdata;
pub mod tape;
pub mod tensor;
pub mod vqvae;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Activation, Gradients, Tape};
pub use tensor::{NodeId, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
