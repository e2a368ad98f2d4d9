//! Stochastic predictive control with identified multi-step predictors.
//!
//! The crate covers the whole offline/online pipeline for a linear-Gaussian
//! plant observed through noisy outputs:
//!
//! 1. [`model`]: state-space models, the mass-spring-damper benchmark,
//!    simulation and exact multi-step matrices.
//! 2. [`kalman`]: steady-state Kalman filter (DARE), filtering and
//!    Rauch-Tung-Striebel smoothing.
//! 3. [`sysid`]: surrogate state-space identification by expectation
//!    maximization.
//! 4. [`predictor`]: generalized least-squares identification of one
//!    multi-step predictor per horizon, with its parameter covariance.
//! 5. [`tightening`]: chance-constraint tightening constants and
//!    second-order-cone constraint rows.
//! 6. [`socp`]: conic program assembly and a primal-dual interior-point
//!    solver.
//! 7. [`harness`]: experiment configuration, studies and reports.

pub mod error;
pub mod harness;
pub mod io;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod predictor;
pub mod rng;
pub mod socp;
pub mod sysid;
pub mod tightening;

pub use error::{Error, Result};
