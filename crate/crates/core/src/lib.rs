//! Solver core for partially observed optimal control of semilinear
//! stochastic PDEs on an interval.
//!
//! The pipeline couples four pieces:
//!
//! * [`fem`] — P1 finite elements on `(0, L)` with homogeneous Dirichlet
//!   boundary, consistent mass matrix and a factored semi-implicit step;
//! * [`forward`] — Euler–Maruyama/implicit-Euler time stepping of the state
//!   equation, both in its truth form and in the observation-driven particle
//!   form, plus observation synthesis;
//! * [`adjoint`] — single-realization backward solvers for the scalar BSDE
//!   and the field-valued BSPDE whose solution feeds the control gradient;
//! * [`filter`] + [`control`] — a branching particle filter with fixed
//!   population size and the conditional stochastic-gradient-descent loop
//!   that assembles the control schedule interval by interval.
//!
//! Everything is deterministic given `(configuration, seed)`: all randomness
//! flows through counter-based substreams (see [`noise`]), so results do not
//! depend on scheduling or worker count.
//!
//! The crate is `no_std`-compatible (`alloc` required); disable the `std`
//! feature and enable `libm` to build for targets without a standard library.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("spdec-core needs either the `std` or the `libm` feature");

pub mod adjoint;
pub mod control;
pub mod error;
pub mod fem;
pub mod filter;
pub mod forward;
pub mod math;
pub mod model;
pub mod noise;

pub use error::{Error, Result};
