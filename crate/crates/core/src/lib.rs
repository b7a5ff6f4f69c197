//! Single-step latent adversarial training (SLAT) and its baselines.
//!
//! The crate is built around a small eager reverse-mode tape
//! ([`autodiff::Tape`]) whose models expose named injection sites: one
//! backward sweep yields the loss gradient at the input and at every
//! selected latent representation, and a second forward pass re-runs the
//! network with sign-of-gradient perturbations added at those sites.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Result, SlatError};
pub use tensor::Tensor;
