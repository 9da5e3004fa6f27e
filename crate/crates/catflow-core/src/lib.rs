//! Core mathematics for embedding-space categorical flow modeling.
//!
//! Everything in this crate is pure computation over heap-allocated `f64`
//! buffers: the variance-preserving gamma path, sphere-constrained token
//! embeddings, the learnable Gumbel noise scheduler, Bregman/cross-entropy
//! objectives, a small reverse-mode autodiff tape, the denoiser network and
//! its closed-form Bayes oracles, the training loop, deterministic ODE
//! samplers, the ODE likelihood bound, and synthetic token processes for
//! evaluation. File formats, checkpoints, and the CLI live in the `catflow`
//! companion crate.
//!
//! The crate is `no_std`-compatible (with `alloc`); enable the `libm`
//! feature when building without `std`.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("catflow-core requires either the `std` or the `libm` feature");

pub mod autodiff;
pub mod corpus;
pub mod denoiser;
pub mod embedding;
pub mod error;
pub mod gamma;
pub mod likelihood;
pub mod mat;
pub mod num;
pub mod objective;
pub mod rng;
pub mod sampler;
pub mod scheduler;
pub mod trainer;

pub use error::CoreError;
pub use gamma::{Gamma, NoisySequence, PathCoeffs};
pub use mat::Mat;
pub use rng::Rng;
