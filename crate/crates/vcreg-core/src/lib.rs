//! Variance-covariance regularization (VCReg) for small feedforward networks.
//!
//! The crate provides everything needed to train and inspect desk-scale models
//! under a variance/covariance penalty on intermediate representations:
//!
//! * a dense `f64` [`tensor::Tensor`] with a deterministic PRNG,
//! * a reverse-mode autodiff [`graph::Graph`] with a custom-gradient node,
//! * the penalty itself ([`vcreg`]): batch covariance statistics, hinge
//!   variance and off-diagonal covariance losses, and an analytic gradient
//!   that can be injected during the backward pass without touching the
//!   forward computation,
//! * small MLP / convnet [`models`] with named hook boundaries,
//! * an SGD [`optim`]izer and a minibatch [`train`] loop,
//! * collapse [`metrics`] (CDNV, nearest-class-center agreement, linear
//!   probes, decision-boundary margins) and synthetic [`datasets`].
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only adds `std::error::Error` impls. All float math goes through
//! `libm`, so results are reproducible bit-for-bit for a given seed and
//! crate version regardless of platform libm differences.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod datasets;
pub mod error;
pub(crate) mod fmath;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vcreg;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use rng::Rng;
pub use tensor::Tensor;
