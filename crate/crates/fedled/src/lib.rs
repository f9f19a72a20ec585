//! Unsupervised vertical federated transfer learning for equipment fault
//! diagnosis.
//!
//! Two parties hold vibration data with different feature spaces: a source
//! agent with labeled examples and a target agent with unlabeled ones. Each
//! trains a private feature extractor; a coordinator owns the shared
//! classifier and domain discriminator and aligns the two latent spaces
//! with an adversarial conditional loss plus a joint kernel-mean penalty.
//! Only latent features and their gradients cross party boundaries.
//!
//! The crate is a deterministic training engine plus a protocol simulator:
//! the same seed produces bit-identical trajectories whether agents run in
//! one process or talk over TCP, with or without the `parallel` feature.

#![forbid(unsafe_code)]

pub mod data;
pub mod error;
pub mod harness;
mod parallel;
pub mod losses;
pub mod models;
pub mod protocol;
pub mod tape;
pub mod tensor;
pub mod transport;

pub use error::{FedError, Result};
pub use tensor::Tensor;
