//! Invertible neural models on dense f64 tensors.
//!
//! The crate provides:
//!
//! - a minimal tape-based reverse-mode autodiff engine ([`autodiff`]),
//! - ODE blocks integrated with fixed-step RK4, invertible by reversing the
//!   integration window, with two independent gradient paths ([`odenet`]),
//! - invertible residual networks with spectral normalization and fixed-point
//!   inversion ([`iresnet`]),
//! - exact constructions that realize an invertible map in doubled dimension:
//!   an analytic flow embedding, an explicit residual-layer recipe, and a
//!   zero-padded field capped by a linear readout ([`construct`]),
//! - seeded experiment drivers emitting machine-readable metrics
//!   ([`experiments`]) and a thin CLI over them ([`cli`]).
//!
//! Start with the runnable programs under `examples/`; each demonstrates one
//! capability end to end.

pub mod autodiff;
pub mod cli;
pub mod construct;
pub mod error;
pub mod experiments;
pub mod iresnet;
pub mod nn;
pub mod odenet;
pub mod rng;
pub mod serialize;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
