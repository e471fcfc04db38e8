//! Certification of feedforward ReLU classifiers against ℓ∞ perturbations.
//!
//! The crate computes rigorous upper bounds on the worst-case margin of an
//! incorrect class using a layered semidefinite relaxation ([`sdp_relax`]) and
//! the triangle LP relaxation ([`lp_relax`]), both solved by the dense ADMM
//! backend in [`conic_solver`]. Lower bounds come from PGD ([`attack`]); exact
//! values for tiny networks come from activation-pattern enumeration
//! ([`theory::exact_margin_bruteforce`]).

// `!(a <= b)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod bounds;
pub mod cli;
pub mod conic_solver;
pub mod error;
pub mod harness;
pub mod lp_relax;
pub mod network;
pub mod sdp_relax;
pub mod theory;

pub use error::{CertError, Result};
pub use network::{Activations, ReluNetwork};
