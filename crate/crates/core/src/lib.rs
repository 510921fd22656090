//! Covariance steering of nonlinear systems disturbed by Gaussian random
//! fields.
//!
//! The pipeline is: propagate a nominal trajectory ([`nominal`]), linearize
//! and discretize it with field-induced disturbance statistics
//! ([`discretize`]), stack the discrete model ([`blocks`]), pose a
//! second-order cone program over affine state-history feedback
//! ([`subproblem`]), and iterate ([`scp`]). [`monte_carlo`] validates the
//! resulting [`FeedbackPolicy`] through sampled field realizations.

pub mod linalg;
pub mod grf;
pub mod dynamics;
pub mod orbit;
pub mod quadrature;
pub mod nominal;
pub mod discretize;
pub mod stats;
pub mod blocks;
pub mod policy;
pub mod conic;
pub mod subproblem;
pub mod scp;
pub mod lincov;
pub mod monte_carlo;
pub mod scenario;

pub use blocks::{assemble_blocks, gains_from_l, l_from_gains, BlockSteeringData};
pub use conic::{ClarabelAdapter, ConicProgram, SolveStatus, SolverAdapter};
pub use discretize::{discretize, DiscreteLtvProblem};
pub use dynamics::{Aerocapture, AerocaptureParams, DensityProfile, DoubleIntegrator, SystemModel};
pub use grf::{CovarianceKernel, GaussianRandomField, KernelSpec, SequentialSampler};
pub use linalg::{Mat, Vector};
pub use nominal::{propagate_nominal, NominalTrajectory, TimePartition};
pub use policy::FeedbackPolicy;
pub use orbit::{ExitState, TargetOrbit};
pub use stats::gaussian_quantile;
