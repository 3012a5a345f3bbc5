//! Cooperative distributed MPC for planar multi-robot teams.
//!
//! The optimal control problem is split into per-robot subproblems coupled
//! only through consensus on copied neighbor trajectories. Two decentralized
//! solvers are provided: consensus ADMM for convex problems and a bi-level
//! SQP whose quadratic subproblems are solved inexactly by ADMM. A simulator
//! closes the loop and compares every applied input with a centralized
//! reference solution.

pub mod admm;
pub mod bench;
pub mod dsqp;
pub mod exec;
pub mod linalg;
pub mod messaging;
pub mod problem;
pub mod qp;
pub mod sim;

pub use exec::Execution;
