//! Simulation and optimisation toolkit for sparse mean-field control of a
//! noisy herd steered by a few controlled herders.
//!
//! The crate covers the finite particle system, its McKean–Vlasov limit
//! (solved by Picard iteration on the law), the one-dimensional Fokker–Planck
//! equivalent, the discrete and limit cost functionals, and derivative-free
//! minimisation of both.

pub mod control;
pub mod cost;
pub mod error;
pub mod experiments;
pub mod fokker_planck;
pub mod io;
pub mod kernels;
pub mod mckean_vlasov;
pub mod measures;
pub mod optimizer;
pub mod particle;
pub mod rng;
mod transport;

pub use error::{HerdError, Result};
