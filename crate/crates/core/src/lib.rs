//! Circuit-disentangled tensor-network factorization of dense linear layers.
//!
//! A weight matrix `W` is approximated as `U · M · V†`, where `M` is a
//! low-bond-dimension matrix product operator and `U`, `V†` are brickwork
//! circuits of two-site unitaries.

pub mod baselines;
pub mod circuit;
pub mod disentangler;
pub mod error;
pub mod io;
pub mod layer;
pub mod mpo;
pub mod planted;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
