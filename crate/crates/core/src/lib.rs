//! Limit order books driven by Hawkes random measures.
//!
//! The crate simulates the microscopic event-by-event book ([`lob`]), solves
//! the limiting price SDE / volume ODE / Volterra-Fredholm intensity system
//! ([`limit`], [`volterra`]), and provides the closed-form references
//! ([`oracles`]) and experiment drivers ([`harness`]) used to check one
//! against the other. [`hawkes`] holds the generic Hawkes random measure
//! simulator and [`cli_io`] the configuration and artifact plumbing.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod harness;
pub mod hawkes;
pub mod kernels;
pub mod limit;
pub mod lob;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod stats;
pub mod volterra;

pub use kernels::{Profile, RateMultiplier, SizeMeasure, Side, StateScalar, TimeKernel, TimeKernelDecl};
pub use model::ModelSpec;
