//! Discrete and quantum variational autoencoders.
//!
//! The crate provides a small reverse-mode autodiff engine ([`diffcore`]),
//! the spike-and-exponential reparameterization ([`reparam`]), classical and
//! transverse-field Boltzmann machine priors ([`rbm`], [`qbm`]), the trainable
//! model ([`model`]), evaluation ([`eval`]) and dataset handling ([`data`]).

pub mod anneal;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod qbm;
pub mod rbm;
pub mod reparam;
pub mod rng;

pub use diffcore::{ParamId, ParamStore, Tensor};
pub use error::{Error, Result};
