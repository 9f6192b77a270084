//! Adversarial training of miniature Vision Transformers, with warm-up of
//! attention gradient dropping and perturbation masking.
//!
//! The crate is self-contained: a small tape-based autodiff engine
//! ([`autograd`]), the model ([`vit`]), PGD attacks ([`attacks`]), warm-up
//! sampling ([`warmup`]), the training loop ([`trainer`]), datasets
//! ([`data`]), checkpoints ([`checkpoint`]) and whole-model gradient
//! verification ([`verify`]).

pub mod attacks;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod vit;
pub mod warmup;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
