//! Zero-order robust optimization (zoRO) for nonlinear MPC.
//!
//! A Gauss-Newton SQP solver over a multiple-shooting OCP with full
//! condensing and a preparation/feedback (real-time iteration) split.
//! Between iterations the ellipsoidal uncertainty tube is propagated along
//! the current nominal trajectory and the constraint bounds are tightened by
//! the resulting backoffs. The uncertainty matrices never enter the QP.

pub mod check;
pub mod cli;
pub mod config;
pub mod error;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod ocp;
pub mod qp;
pub mod scaling;
pub mod sim;
pub mod sqp;
pub mod table;
pub mod zoro;

pub use error::{Error, Result};
