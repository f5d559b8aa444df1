//! Euler-scale dynamical correlation functions of integrable many-body
//! systems from generalized-hydrodynamics data.
//!
//! The crate is organized around the quasi-particle description of a
//! generalized Gibbs ensemble: a discretized spectral space ([`spectral`]),
//! thermodynamic-Bethe-ansatz dressing and state construction ([`tba`]),
//! built-in model data ([`models`]), the exact solution by characteristics
//! of the GHD equation ([`characteristics`]), the two-point propagator
//! split into direct and indirect parts ([`propagator`]), and correlator
//! assembly for conserved densities, currents and generic local
//! observables ([`correlators`]). Closed forms for free models
//! ([`free_exact`]), the domain-wall protocol ([`partitioning`]) and
//! long-time 1/t coefficients ([`asymptotics`]) complete the pipeline.

pub mod asymptotics;
pub mod characteristics;
pub mod correlators;
pub mod error;
pub mod free_exact;
pub mod interp;
pub mod models;
pub mod partitioning;
pub mod propagator;
pub mod spectral;
pub mod tba;

pub use error::{GhdError, Result};
