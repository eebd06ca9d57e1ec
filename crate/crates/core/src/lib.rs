//! Mean-value calculus for evolution operators with explicit Gaussian
//! fundamental solutions.
//!
//! The library evaluates, for a family of hypoelliptic operators
//! `L = div(A grad) + <b, grad>` with known transition kernels Gamma:
//!
//! - L-balls: superlevel sets `{ zeta : Gamma(z, zeta) > 1/r }`, with
//!   certified bounding boxes and Monte Carlo volumes;
//! - the kernel-weighted surface mean `M_r` and volume functionals
//!   `N_r`, `Q_r` of the associated mean-value identity;
//! - Gamma-potentials `u_f = integral of Gamma(., y) f(y) dy` with grid
//!   tabulation and persistence;
//! - the asymptotic average quotient `(M_r(u) - u) / Q_r` along radius
//!   schedules, deciding whether `u` solves `L u = -f` in the asymptotic
//!   average sense;
//! - a verification harness mapping each identity to a machine-checkable
//!   report with deterministic seeds.

pub mod asymptotic;
pub mod error;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod meanvalue;
pub mod operator;
pub mod point;
pub mod potential;
pub mod quadrature;

pub use error::{Error, Result};
pub use point::{BoundingBox, SpaceTimePoint};
pub use quadrature::{EstimateFlags, IntegralEstimate, QuadratureConfig};
