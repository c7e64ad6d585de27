//! Adversarial robustness toolkit: gradient-based and search attacks,
//! preprocessing defenses with backward-pass substitution, and adversarial
//! training, all running on a small tape-based reverse-mode autodiff engine.

pub mod attack_api;
pub mod autodiff;
pub mod bpda;
pub mod config;
pub mod defenses;
pub mod error;
pub mod gradient_attacks;
pub mod idx;
pub mod models;
pub mod search_attacks;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
