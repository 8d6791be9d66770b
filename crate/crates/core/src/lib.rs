//! Spectral toolkit for averaged dynamics of random heat and Schrodinger
//! equations on the unit interval, and for the variational synthesis of
//! minimal-norm averaged controls.
//!
//! The state space is the Dirichlet sine eigenbasis on (0,1). Randomness
//! enters through a scalar coefficient multiplying the Laplacian; averaging
//! over the coefficient law turns each Fourier mode into a scalar
//! "averaged multiplier" m_j(t) (the law's Laplace transform for heat
//! dynamics, its characteristic function for Schrodinger dynamics).
//! Everything downstream - propagation, observability Gramians, dual
//! conjugate-gradient control synthesis, Monte Carlo validation - works
//! coefficient-wise on top of those multipliers.

pub mod control;
pub mod dynamics;
pub mod kernels;
pub mod mc;
pub mod observe;
pub mod quad;
pub mod spectral;

pub use control::{
    ControlObjective, ControlProblem, ControlSolution, GeometrySpec, GramianSystem,
};
pub use dynamics::{AveragedTrajectory, DynamicsClass, TimeGrid};
pub use kernels::{EquationKind, MultiplierKernel, ParameterLaw};
pub use mc::McConfig;
pub use spectral::{EigenBasis, ObservationOperator, SpectralState};
