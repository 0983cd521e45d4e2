//! Training laboratory for batch-normalized variational autoencoders.
//!
//! Everything runs on the CPU in f64 on a from-scratch reverse-mode tape:
//! recurrent VAE / CVAE / language models, a family of posterior
//! regularizers (fixed and extended batch normalization of the posterior
//! parameters, delta constraints, free-bits hinges), the KL-floor guarantee
//! they induce, and the evaluation estimators used to diagnose posterior
//! collapse (importance-weighted NLL, mutual information, active units, KL
//! decomposition, scalar-latent trajectory probes, linear classifier probes).

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use tape::{forward_op, Gradients, Node, OpKind, Tape, TapeError};
pub use tensor::Tensor;
