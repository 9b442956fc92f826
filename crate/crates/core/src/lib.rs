//! Fast–slow Hamiltonian systems with stiff diagonal potentials:
//! simulation of the full oscillatory dynamics, homogenized and
//! second-order averaged asymptotic models, thermodynamic observables,
//! and convergence/cost experiments.

pub mod analysis;
pub mod error;
pub mod expr;
pub mod integrator;
pub mod jet;
pub mod model;
pub mod systems;
pub mod thermo;

pub use error::{Error, Result};
