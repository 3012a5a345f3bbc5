//! Decentralized consensus ADMM for convex partially separable QPs.

pub mod engine;

use std::time::Instant;

use nalgebra::{DVector, Vector2};
use thiserror::Error;

pub use engine::{average_trajectories, AgentCtx, AgentState, LocalQp, PhaseLabels, RoundKey, TimingLog};

use crate::exec::Execution;
use crate::messaging::{Endpoint, TransportError};
use crate::problem::{PartialNlp, Subsystem};
use crate::qp::{QpError, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("subsystem {agent}: local QP ended with status {status:?}")]
    LocalQp { agent: usize, status: QpStatus },
    #[error("subsystem {agent}: {error}")]
    QpBuild { agent: usize, error: QpError },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("subsystem {0} has nonlinear constraints; ADMM needs a convex QP")]
    NotConvex(usize),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub l_max: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self { rho: 1.0, l_max: 5 }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(SolverError::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if self.l_max == 0 {
            return Err(SolverError::Config("l_max must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) const ADMM_LABELS: PhaseLabels = PhaseLabels {
    qp: "qp_solve_step3",
    copies: "comm_z_steps4_5",
    averages: "comm_zbar_step6",
    round: "admm_iteration",
};

/// Result of one decentralized solve.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    /// Final local primal iterate of each agent.
    pub z: Vec<DVector<f64>>,
    /// Second input of each agent's predicted input trajectory.
    pub inputs: Vec<Vector2<f64>>,
}

/// Own-block constant rollout at the measured state held in `b_eq`: every
/// state stage equals `x_now`, `u⁰ = u_now`, later inputs zero.
pub(crate) fn own_rollout(sub: &Subsystem) -> DVector<f64> {
    let l = &sub.layout;
    let n = l.horizon;
    let x_now = sub.b_eq.fixed_rows::<2>(2 * n).into_owned();
    let u_now = sub.b_eq.fixed_rows::<2>(2 * n + 2).into_owned();
    let mut z = DVector::zeros(l.dim());
    for k in 0..=n {
        z.fixed_rows_mut::<2>(l.x(k)).copy_from(&x_now);
    }
    z.fixed_rows_mut::<2>(l.u(0)).copy_from(&u_now);
    z
}

/// Consensus ADMM over all agents of a team.
pub struct AdmmSolver {
    pub config: AdmmConfig,
    pub exec: Execution,
    agents: Vec<AgentCtx>,
    qps: Vec<LocalQp>,
    warm: bool,
}

impl AdmmSolver {
    pub fn new(
        nlp: &PartialNlp,
        endpoints: Vec<Box<dyn Endpoint>>,
        config: AdmmConfig,
        exec: Execution,
    ) -> Result<Self, SolverError> {
        config.validate()?;
        if endpoints.len() != nlp.len() {
            return Err(SolverError::Config(format!(
                "{} endpoints for {} subsystems",
                endpoints.len(),
                nlp.len()
            )));
        }
        let mut qps = Vec::with_capacity(nlp.len());
        for sub in &nlp.subsystems {
            if !sub.is_linear() {
                return Err(SolverError::NotConvex(sub.id));
            }
            qps.push(
                LocalQp::new(
                    &sub.hessian,
                    config.rho,
                    &sub.a_eq,
                    &sub.a_lin,
                    sub.gradient.clone(),
                    sub.b_eq.clone(),
                    sub.b_lin.clone(),
                )
                .map_err(|e| SolverError::QpBuild { agent: sub.id, error: e })?,
            );
        }
        let agents = endpoints
            .into_iter()
            .enumerate()
            .map(|(i, ep)| AgentCtx::new(nlp, i, ep))
            .collect();
        Ok(Self {
            config,
            exec,
            agents,
            qps,
            warm: false,
        })
    }

    /// Forget the previous solution; the next solve starts cold.
    pub fn reset(&mut self) {
        self.warm = false;
    }

    pub fn states(&self) -> Vec<&AgentState> {
        self.agents.iter().map(|a| &a.state).collect()
    }

    pub fn set_state(&mut self, i: usize, state: AgentState) {
        self.agents[i].state = state;
        self.warm = true;
    }

    pub fn take_timing(&mut self) -> Vec<TimingLog> {
        self.agents.iter_mut().map(|a| std::mem::take(&mut a.timing)).collect()
    }

    pub fn endpoint_stats(&self) -> Vec<crate::messaging::TransportStats> {
        self.agents.iter().map(|a| a.endpoint.stats()).collect()
    }

    /// Copy the linear data (gradient, initial condition) of a patched NLP.
    pub fn update_data(&mut self, nlp: &PartialNlp) {
        for (qp, sub) in self.qps.iter_mut().zip(&nlp.subsystems) {
            qp.base_gradient.copy_from(&sub.gradient);
            qp.b_eq.copy_from(&sub.b_eq);
            qp.b_in.copy_from(&sub.b_lin);
        }
    }

    /// Initialize from scratch (cold) or from the previous step's shifted
    /// iterates (warm).
    pub fn prepare(&mut self, nlp: &PartialNlp, mpc_step: u32) -> Result<(), SolverError> {
        if self.warm {
            self.exec.map_mut(&mut self.agents, |_, a| {
                a.state.zbar = engine::shift_stages(&a.layout, &a.state.zbar, false);
                a.state.gamma = engine::shift_stages(&a.layout, &a.state.gamma, true);
            });
            Ok(())
        } else {
            let initial: Vec<DVector<f64>> = nlp.subsystems.iter().map(own_rollout).collect();
            let key = RoundKey {
                mpc_step,
                outer: 0,
                inner: 0,
            };
            engine::cold_start(&mut self.agents, &initial, key, self.exec)
        }
    }

    /// Run `l_max` rounds from the current iterates.
    pub fn iterate(&mut self, mpc_step: u32) -> Result<(), SolverError> {
        let t0 = Instant::now();
        let rho = self.config.rho;
        for l in 1..=self.config.l_max {
            let key = RoundKey {
                mpc_step,
                outer: 0,
                inner: l as u16,
            };
            engine::phase_solve(&mut self.agents, &self.qps, rho, key, self.exec)?;
            engine::phase_average(&mut self.agents, key, self.exec)?;
            engine::phase_assemble(&mut self.agents, rho, key, &ADMM_LABELS, self.exec)?;
        }
        let total = engine::micros(t0);
        for a in &mut self.agents {
            let own: u64 = a.timing.iter().filter(|(l, _)| *l == ADMM_LABELS.round).map(|(_, t)| t).sum();
            a.timing.push(("admm_total", own.min(total)));
        }
        Ok(())
    }

    pub fn output(&self, nlp: &PartialNlp) -> SolveOutput {
        let z: Vec<DVector<f64>> = self.agents.iter().map(|a| a.state.z.clone()).collect();
        let inputs = nlp.subsystems.iter().zip(&z).map(|(s, z)| s.applied_input(z)).collect();
        SolveOutput { z, inputs }
    }

    /// Patch data, initialize, iterate and report the result.
    pub fn solve(&mut self, nlp: &PartialNlp, mpc_step: u32) -> Result<SolveOutput, SolverError> {
        self.update_data(nlp);
        let result = self.prepare(nlp, mpc_step).and_then(|_| self.iterate(mpc_step));
        match result {
            Ok(()) => {
                self.warm = true;
                Ok(self.output(nlp))
            }
            Err(e) => {
                self.warm = false;
                Err(e)
            }
        }
    }
}
