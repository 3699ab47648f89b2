//! Solver library for singularly perturbed optimal control via occupational
//! measures.
//!
//! The pipeline: assemble the finite-basis approximation of the averaged
//! semi-infinite LP over occupational measures, solve it by two-level column
//! generation ([`averaged`]), read the averaged/associated dual certificates
//! off the master LPs, synthesize a feedback control from the pointwise
//! Hamiltonian minimizer ([`control`]), integrate the stiff two-timescale
//! system ([`sim`]), and report the duality-gap near-optimality certificate.
//!
//! Entry points:
//! * [`model::example1`] / [`model::example2`] — the two built-in problems;
//! * [`averaged::solve_averaged`] — the averaged LP solve;
//! * [`control::synthesized_control`] — feedback controller construction;
//! * [`sim::integrate`] / [`sim::gap_report`] — simulation and certificate.

pub mod averaged;
pub mod basis;
pub mod colgen;
pub mod control;
pub mod expr;
pub mod io;
pub mod measures;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod simplex;
pub mod stats;
pub mod testing;

pub use basis::MonomialBasis;
pub use colgen::{ColGenConfig, ColGenResult, SemiInfiniteLP};
pub use measures::AtomicMeasure;
pub use model::{Box, ControlProblem};
pub use sim::Trajectory;
pub use simplex::{LpSolution, MasterLp};
