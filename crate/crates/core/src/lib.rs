//! Stochastic model predictive control with constraint tightening by
//! probabilistic reachable sets.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: Lyapunov and Riccati solvers, eigenvalues, quantiles.
//! - [`uncertainty`]: Gaussian disturbances, seeded streams, variance propagation.
//! - [`reachability`]: reachable-set construction and Pontryagin tightening.
//! - [`optimizer`]: the condensed nominal MPC quadratic program and terminal ingredients.
//! - [`controller`]: the conditional-update control law and the cost-decrease baseline.
//! - [`simulator`]: closed-loop Monte Carlo ensembles and the statistics computed on them.

pub mod controller;
pub mod error;
pub mod numerics;
pub mod optimizer;
pub mod reachability;
pub mod simulator;
pub mod system;
pub mod uncertainty;

pub use error::{Error, Result};
pub use numerics::{Matrix, Symmetric, Vector};
pub use system::LinearSystem;
