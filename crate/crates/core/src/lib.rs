//! Construction and training of convolutional network DAGs on the CPU.
//!
//! The crate is organized around an explicit graph representation
//! ([`graph::ArchSpec`]): nodes are feature-map slots, edges are
//! parameterized convolutions. Four builders emit such graphs —
//! tunable U-Nets, convolutional autoencoders, mixed-scale dense
//! networks, and stochastically generated sparse mixed-scale networks —
//! and a single executor runs any of them forward (and, via the
//! [`autodiff`] tape, backward).
//!
//! Everything is deterministic: all randomness flows through the
//! counter-based [`rng::StreamRng`], so a `(config, seed)` pair maps to
//! exactly one network, one shuffled batch order, and one set of initial
//! weights, on every platform.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std`
//! feature enables runtime SIMD selection in the matrix-multiply kernels.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod autodiff;
pub mod builders;
pub mod conformal;
pub mod data;
pub mod ensemble;
mod error;
pub mod format;
pub mod graph;
pub mod loss;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tensor::{Dtype, Element, LabelMap, PixelMask, Tensor4};

/// Crate-wide result alias.
pub type Result<T, E = Error> = core::result::Result<T, E>;
