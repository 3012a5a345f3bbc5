//! Per-step controller logic shared by all agents: patch the NLP, run the
//! selected decentralized solver, keep the delay-compensated input pair.

use log::warn;
use nalgebra::Vector2;

use super::scenario::SolverChoice;
use crate::admm::{AdmmSolver, SolveOutput, SolverError, TimingLog};
use crate::dsqp::DsqpSolver;
use crate::exec::Execution;
use crate::messaging::{Endpoint, TransportStats};
use crate::problem::PartialNlp;

/// Either decentralized solver behind one interface.
pub enum TeamSolver {
    Admm(AdmmSolver),
    Dsqp(DsqpSolver),
}

impl TeamSolver {
    pub fn new(
        choice: &SolverChoice,
        nlp: &PartialNlp,
        endpoints: Vec<Box<dyn Endpoint>>,
        exec: Execution,
    ) -> Result<Self, SolverError> {
        Ok(match choice {
            SolverChoice::Admm(c) => TeamSolver::Admm(AdmmSolver::new(nlp, endpoints, *c, exec)?),
            SolverChoice::Dsqp(c) => TeamSolver::Dsqp(DsqpSolver::new(nlp, endpoints, *c, exec)?),
        })
    }

    pub fn solve(&mut self, nlp: &PartialNlp, mpc_step: u32) -> Result<SolveOutput, SolverError> {
        match self {
            TeamSolver::Admm(s) => s.solve(nlp, mpc_step),
            TeamSolver::Dsqp(s) => s.solve(nlp, mpc_step),
        }
    }

    pub fn reset(&mut self) {
        match self {
            TeamSolver::Admm(s) => s.reset(),
            TeamSolver::Dsqp(s) => s.reset(),
        }
    }

    pub fn take_timing(&mut self) -> Vec<TimingLog> {
        match self {
            TeamSolver::Admm(s) => s.take_timing(),
            TeamSolver::Dsqp(s) => s.take_timing(),
        }
    }

    pub fn endpoint_stats(&self) -> Vec<TransportStats> {
        match self {
            TeamSolver::Admm(s) => s.endpoint_stats(),
            TeamSolver::Dsqp(s) => s.endpoint_stats(),
        }
    }
}

/// Input pair of one robot. `committed` is applied over the current
/// interval; `pending` is the `u¹` of the latest solve, applied next.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InputPair {
    pub committed: Vector2<f64>,
    pub pending: Vector2<f64>,
}

/// A step where the solver failed and the previous input was held.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    pub inputs: Vec<InputPair>,
    pub step: usize,
    pub faults: Vec<Fault>,
    /// Consecutive failed steps.
    pub fault_run: usize,
}

impl ControllerState {
    pub fn new(robots: usize) -> Self {
        Self {
            inputs: vec![InputPair::default(); robots],
            step: 0,
            faults: Vec::new(),
            fault_run: 0,
        }
    }

    /// Inputs applied over the current interval.
    pub fn committed(&self) -> Vec<Vector2<f64>> {
        self.inputs.iter().map(|p| p.committed).collect()
    }

    /// Solve for the next interval. The pending input of the previous step
    /// becomes the committed input of this one. On failure the committed
    /// input is held for the next interval as well and the solver restarts
    /// cold.
    pub fn mpc_step(
        &mut self,
        solver: &mut TeamSolver,
        nlp: &mut PartialNlp,
        x_now: &[Vector2<f64>],
        setpoints: &[Vector2<f64>],
    ) -> Option<SolveOutput> {
        for p in &mut self.inputs {
            p.committed = p.pending;
        }
        let u_now = self.committed();
        let zeros = vec![Vector2::zeros(); x_now.len()];
        nlp.patch(x_now, &u_now, setpoints, &zeros);
        let result = solver.solve(nlp, self.step as u32);
        let out = match result {
            Ok(out) => {
                for (p, u) in self.inputs.iter_mut().zip(&out.inputs) {
                    p.pending = *u;
                }
                self.fault_run = 0;
                Some(out)
            }
            Err(e) => {
                warn!("step {}: solver failed ({e}); holding previous input", self.step);
                self.faults.push(Fault {
                    step: self.step,
                    message: e.to_string(),
                });
                self.fault_run += 1;
                solver.reset();
                None
            }
        };
        self.step += 1;
        out
    }
}
