//! Force-level convex MPC for a quadruped trunk with online estimation of
//! static and periodic external disturbances.
//!
//! The pipeline per control step:
//!
//! 1. [`estimator`] turns the last one-step prediction residual into an
//!    external-wrench sample and refits a static + sinusoidal model.
//! 2. [`mpc`] condenses the horizon into a dense QP over ground reaction
//!    forces, with the disturbance forecast fed into the predicted dynamics,
//!    and solves it with [`qp`].
//! 3. [`sim`] integrates the full nonlinear rigid-body dynamics under the
//!    first force command and the injected disturbance.
//!
//! [`harness`] wires these into episodes and the scenario matrix.

pub mod dynamics;
pub mod estimator;
pub mod gait;
pub mod harness;
pub mod mpc;
pub mod qp;
pub mod sim;
