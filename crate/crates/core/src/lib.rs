//! Numerical toolkit for diffusive perturbations of integrable systems.
//!
//! The crate simulates slow-fast stochastic systems in action-angle form and
//! in Birkhoff (Cartesian) form, builds their averaged and effective
//! equations by averaging over the angle torus, and compares laws of the
//! resulting processes with the bounded-Lipschitz and Kantorovich metrics.
//!
//! Module map:
//!
//! * [`model`]: states, coordinate changes, torus rotations, system types.
//! * [`torus`]: quadrature on the torus, averaged coefficients, matrix roots,
//!   resonance diagnostics.
//! * [`effective`]: drift and dispersion of the effective equation and of
//!   the averaged action equation.
//! * [`sde`]: integrators, ensembles, stopping, lifted companion process.
//! * [`measures`]: empirical measures and distances between them.
//! * [`normal_form`]: one-degree-of-freedom action-angle construction and
//!   oscillator chains.
//! * [`scenario`]: configuration-driven experiments behind the `slowfast`
//!   binary.

pub mod effective;
pub mod error;
pub mod measures;
pub mod model;
pub mod normal_form;
pub mod scenario;
pub mod sde;
pub mod torus;

pub use error::{Error, Result};
