//! Decentralized SQP: an outer loop of full SQP steps whose coupled QP
//! subproblem is solved inexactly by consensus ADMM on the step variables.

pub mod kkt;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::admm::engine::{self, micros, AgentCtx, LocalQp, PhaseLabels, RoundKey, TimingLog};
use crate::admm::{own_rollout, SolveOutput, SolverError};
use crate::exec::Execution;
use crate::linalg::flip_regularize;
use crate::messaging::{Endpoint, TransportStats};
use crate::problem::{PartialNlp, Subsystem};
use crate::qp::{DenseQp, QpSolution};

pub const DEFAULT_EPS_REG: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianKind {
    /// Constant objective Hessian.
    GaussNewton,
    /// Lagrangian Hessian with small and negative eigenvalues flipped.
    RegularizedExact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaSchedule {
    /// `η = min(0.5, ‖F̃‖∞)`.
    Superlinear,
    Constant(f64),
}

impl EtaSchedule {
    pub fn eta(self, f_norm: f64) -> f64 {
        match self {
            EtaSchedule::Superlinear => f_norm.min(0.5),
            EtaSchedule::Constant(e) => e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stopping {
    /// Always run `l_max` inner iterations.
    Fixed,
    /// Stop the inner loop once the linearized KKT residual is small
    /// relative to the current residual; `l_max` remains a cap.
    Dynamic(EtaSchedule),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsqpConfig {
    pub q_max: usize,
    pub l_max: usize,
    pub rho: f64,
    pub hessian: HessianKind,
    pub eps_reg: f64,
    pub stopping: Stopping,
}

impl Default for DsqpConfig {
    fn default() -> Self {
        Self {
            q_max: 5,
            l_max: 3,
            rho: 1.0,
            hessian: HessianKind::RegularizedExact,
            eps_reg: DEFAULT_EPS_REG,
            stopping: Stopping::Fixed,
        }
    }
}

impl DsqpConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.q_max == 0 || self.l_max == 0 {
            return Err(SolverError::Config("q_max and l_max must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(SolverError::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.eps_reg > 0.0) {
            return Err(SolverError::Config("eps_reg must be positive".into()));
        }
        Ok(())
    }
}

/// Primal-dual iterate of one subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct SqpIterate {
    pub z: DVector<f64>,
    pub nu: DVector<f64>,
    pub mu: DVector<f64>,
    pub gamma: DVector<f64>,
}

impl SqpIterate {
    pub fn zeros(sub: &Subsystem) -> Self {
        Self {
            z: DVector::zeros(sub.dim()),
            nu: DVector::zeros(sub.n_eq()),
            mu: DVector::zeros(sub.n_in()),
            gamma: DVector::zeros(sub.dim()),
        }
    }
}

pub fn hessian_gauss_newton(sub: &Subsystem) -> DMatrix<f64> {
    sub.hessian.clone()
}

/// Flip-regularized Lagrangian Hessian at multipliers `mu`.
pub fn hessian_regularized_exact(sub: &Subsystem, mu: &DVector<f64>, eps: f64) -> Option<DMatrix<f64>> {
    flip_regularize(&sub.lagrangian_hessian(mu), eps)
}

/// Quadratic model of subsystem `sub` at `it`, in step variables.
pub fn build_subsystem_qp(sub: &Subsystem, it: &SqpIterate, config: &DsqpConfig) -> Result<DenseQp, SolverError> {
    let h = match config.hessian {
        HessianKind::GaussNewton => hessian_gauss_newton(sub),
        HessianKind::RegularizedExact => hessian_regularized_exact(sub, &it.mu, config.eps_reg).ok_or_else(|| {
            SolverError::QpBuild {
                agent: sub.id,
                error: crate::qp::QpError::NotConvex,
            }
        })?,
    };
    let eval = sub.eval_constraints(&it.z);
    Ok(DenseQp {
        h,
        g: sub.objective_gradient(&it.z),
        a_eq: eval.g_jac,
        b_eq: -eval.g_val,
        a_in: eval.h_jac,
        b_in: -eval.h_val,
    })
}

const DSQP_LABELS: PhaseLabels = PhaseLabels {
    qp: "qp_solve_step6",
    copies: "comm_z_steps7_8",
    averages: "comm_zbar_step9",
    round: "admm_iteration",
};

/// Per-outer-iteration record kept when tracing is enabled.
#[derive(Debug, Clone)]
pub struct OuterRecord {
    pub iterates: Vec<SqpIterate>,
    pub inner_iterations: usize,
    /// Reduced `(‖F̃ + ∇F̃ d‖∞, ‖F̃‖∞)` at the last dynamic check, if any.
    pub residuals: Option<(f64, f64)>,
}

/// Data an agent keeps for the local part of the dynamic stopping test.
struct StopData {
    grad: DVector<f64>,
    jg: DMatrix<f64>,
    g_val: DVector<f64>,
    jh: DMatrix<f64>,
    lag_hessian: DMatrix<f64>,
    f_norm: f64,
}

pub struct DsqpSolver {
    pub config: DsqpConfig,
    pub exec: Execution,
    agents: Vec<AgentCtx>,
    iterates: Vec<SqpIterate>,
    warm: bool,
    keep_iterates: bool,
    trace: Option<Vec<OuterRecord>>,
}

impl DsqpSolver {
    pub fn new(
        nlp: &PartialNlp,
        endpoints: Vec<Box<dyn Endpoint>>,
        config: DsqpConfig,
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
        let agents = endpoints
            .into_iter()
            .enumerate()
            .map(|(i, ep)| AgentCtx::new(nlp, i, ep))
            .collect();
        let iterates = nlp.subsystems.iter().map(SqpIterate::zeros).collect();
        Ok(Self {
            config,
            exec,
            agents,
            iterates,
            warm: false,
            keep_iterates: false,
            trace: None,
        })
    }

    pub fn reset(&mut self) {
        self.warm = false;
    }

    pub fn iterates(&self) -> &[SqpIterate] {
        &self.iterates
    }

    /// Start the next solve from exactly these iterates (no shift). The
    /// primal parts must satisfy the consensus constraint.
    pub fn set_iterates(&mut self, iterates: Vec<SqpIterate>) {
        self.iterates = iterates;
        self.keep_iterates = true;
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<OuterRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn take_timing(&mut self) -> Vec<TimingLog> {
        self.agents.iter_mut().map(|a| std::mem::take(&mut a.timing)).collect()
    }

    pub fn endpoint_stats(&self) -> Vec<TransportStats> {
        self.agents.iter().map(|a| a.endpoint.stats()).collect()
    }

    fn prepare(&mut self, nlp: &PartialNlp, mpc_step: u32) -> Result<(), SolverError> {
        if self.keep_iterates {
            self.keep_iterates = false;
            return Ok(());
        }
        if self.warm {
            let exec = self.exec;
            let layouts: Vec<_> = self.agents.iter().map(|a| a.layout.clone()).collect();
            exec.map_mut(&mut self.iterates, |i, it| {
                let sub = &nlp.subsystems[i];
                it.z = engine::shift_stages(&layouts[i], &it.z, false);
                it.gamma = engine::shift_stages(&layouts[i], &it.gamma, true);
                shift_multipliers(sub, it);
            });
            return Ok(());
        }
        let initial: Vec<DVector<f64>> = nlp.subsystems.iter().map(own_rollout).collect();
        let key = RoundKey {
            mpc_step,
            outer: 0,
            inner: 0,
        };
        engine::cold_start(&mut self.agents, &initial, key, self.exec)?;
        for (it, (a, sub)) in self.iterates.iter_mut().zip(self.agents.iter().zip(&nlp.subsystems)) {
            *it = SqpIterate::zeros(sub);
            it.z = a.state.zbar.clone();
            if let Some(s) = sub.layout.slack_index() {
                it.z[s] = sub.feasible_slack(&it.z);
            }
        }
        Ok(())
    }

    pub fn solve(&mut self, nlp: &PartialNlp, mpc_step: u32) -> Result<SolveOutput, SolverError> {
        let result = self.prepare(nlp, mpc_step).and_then(|_| self.outer_loop(nlp, mpc_step));
        match result {
            Ok(()) => {
                self.warm = true;
                let z: Vec<DVector<f64>> = self.iterates.iter().map(|it| it.z.clone()).collect();
                let inputs = nlp.subsystems.iter().zip(&z).map(|(s, z)| s.applied_input(z)).collect();
                Ok(SolveOutput { z, inputs })
            }
            Err(e) => {
                self.warm = false;
                Err(e)
            }
        }
    }

    fn outer_loop(&mut self, nlp: &PartialNlp, mpc_step: u32) -> Result<(), SolverError> {
        let cfg = self.config;
        let exec = self.exec;
        let t_total = Instant::now();
        let dynamic = matches!(cfg.stopping, Stopping::Dynamic(_));
        for q in 1..=cfg.q_max {
            // Build local QPs at the current linearization point.
            let iterates = &self.iterates;
            let built = exec.map_range(nlp.len(), |i| -> Result<(LocalQp, Option<StopData>, u64), SolverError> {
                let t0 = Instant::now();
                let sub = &nlp.subsystems[i];
                let it = &iterates[i];
                let qp = build_subsystem_qp(sub, it, &cfg)?;
                let stop = dynamic.then(|| {
                    let lag_hessian = sub.lagrangian_hessian(&it.mu);
                    let stat = &qp.g + qp.a_eq.transpose() * &it.nu + qp.a_in.transpose() * &it.mu + &it.gamma;
                    let f_norm = stat.amax().max(qp.b_eq.amax());
                    StopData {
                        grad: qp.g.clone(),
                        jg: qp.a_eq.clone(),
                        g_val: -&qp.b_eq,
                        jh: qp.a_in.clone(),
                        lag_hessian,
                        f_norm,
                    }
                });
                let local = LocalQp::new(&qp.h, cfg.rho, &qp.a_eq, &qp.a_in, qp.g, qp.b_eq, qp.b_in)
                    .map_err(|e| SolverError::QpBuild { agent: i, error: e })?;
                Ok((local, stop, micros(t0)))
            });
            let mut qps = Vec::with_capacity(nlp.len());
            let mut stops = Vec::with_capacity(nlp.len());
            for (i, b) in built.into_iter().enumerate() {
                let (local, stop, us) = b?;
                qps.push(local);
                stops.push(stop);
                self.agents[i].timing.push(("build_qp_step3", us));
            }
            for (a, it) in self.agents.iter_mut().zip(&self.iterates) {
                a.state.zbar = DVector::zeros(a.layout.dim());
                a.state.gamma = it.gamma.clone();
            }

            let t_admm = Instant::now();
            let mut inner = 0;
            let mut residuals = None;
            for l in 1..=cfg.l_max {
                inner = l;
                let key = RoundKey {
                    mpc_step,
                    outer: q as u16,
                    inner: l as u16,
                };
                engine::phase_solve(&mut self.agents, &qps, cfg.rho, key, exec)?;
                engine::phase_average(&mut self.agents, key, exec)?;
                engine::phase_assemble(&mut self.agents, cfg.rho, key, &DSQP_LABELS, exec)?;
                if let Stopping::Dynamic(schedule) = cfg.stopping {
                    let local: Vec<Vec<f64>> = self
                        .agents
                        .iter()
                        .zip(&stops)
                        .map(|(a, s)| local_stop_residuals(a, s.as_ref().expect("dynamic mode")))
                        .collect();
                    let red = engine::phase_reduce_max(&mut self.agents, &local, key, exec)?;
                    residuals = Some((red[0], red[1]));
                    if kkt::dynamic_stop_norms(red[0], red[1], schedule.eta(red[1])) {
                        break;
                    }
                }
            }
            let admm_us = micros(t_admm);

            for (a, it) in self.agents.iter_mut().zip(self.iterates.iter_mut()) {
                it.z += &a.state.zbar;
                let last = a.state.last_qp.as_ref().expect("at least one inner iteration");
                it.nu = last.lam_eq.clone();
                it.mu = last.mu_in.clone();
                it.gamma = a.state.gamma.clone();
                let own_admm: u64 = a
                    .timing
                    .iter()
                    .rev()
                    .take_while(|(lbl, _)| *lbl != "build_qp_step3")
                    .filter(|(lbl, _)| *lbl == DSQP_LABELS.round)
                    .map(|(_, t)| t)
                    .sum();
                let build = a
                    .timing
                    .iter()
                    .rev()
                    .find(|(lbl, _)| *lbl == "build_qp_step3")
                    .map(|(_, t)| *t)
                    .unwrap_or(0);
                a.timing.push(("admm_per_dsqp_iter", own_admm.min(admm_us)));
                a.timing.push(("dsqp_iteration", build + own_admm.min(admm_us)));
            }
            if let Some(trace) = self.trace.as_mut() {
                trace.push(OuterRecord {
                    iterates: self.iterates.clone(),
                    inner_iterations: inner,
                    residuals,
                });
            }
        }
        let total = micros(t_total);
        for a in &mut self.agents {
            let own: u64 = a.timing.iter().filter(|(l, _)| *l == "dsqp_iteration").map(|(_, t)| t).sum();
            a.timing.push(("dsqp_total", own.min(total)));
        }
        Ok(())
    }
}

/// Local blocks of `‖F̃ + ∇F̃ d‖∞` and `‖F̃‖∞` for one agent, with the
/// coupling rows of its own trajectory.
fn local_stop_residuals(a: &AgentCtx, s: &StopData) -> Vec<f64> {
    let dz = &a.state.z;
    let last: &QpSolution = a.state.last_qp.as_ref().expect("solved");
    let stat = &s.grad + &s.lag_hessian * dz + s.jg.transpose() * &last.lam_eq + s.jh.transpose() * &last.mu_in + &a.state.gamma;
    let eq = &s.g_val + &s.jg * dz;
    let lin = stat.amax().max(eq.amax()).max(a.coupling_residual);
    vec![lin, s.f_norm]
}

/// Shift stage-indexed multipliers: dynamics rows, input and state box rows,
/// and distance rows of each pair. Initial-condition rows keep their values.
fn shift_multipliers(sub: &Subsystem, it: &mut SqpIterate) {
    let n = sub.layout.horizon;
    engine::shift_rows(&mut it.nu, 0, 2, n);
    let n_input_rows = 4 * n.saturating_sub(1);
    engine::shift_rows(&mut it.mu, 0, 4, n.saturating_sub(1));
    let n_lin = sub.b_lin.len();
    if n_lin > n_input_rows {
        engine::shift_rows(&mut it.mu, n_input_rows, 4, n);
    }
    for p in 0..sub.distance_rows.len() / (n + 1) {
        engine::shift_rows(&mut it.mu, n_lin + p * (n + 1), 1, n + 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_partial_nlp, ConstraintSet, Ocp, PairConstraint, RobotModel, StageCost, DEFAULT_SLACK_PENALTY};
    use nalgebra::Vector2;

    fn pair_ocp() -> Ocp {
        let mut cons = vec![ConstraintSet::input_box(1.0); 2];
        cons[1].pairs.push(PairConstraint {
            neighbor: 0,
            min_distance: 0.4,
            soft: true,
        });
        Ocp {
            models: vec![RobotModel::new(0.2).unwrap(); 2],
            costs: vec![StageCost::diagonal(1.0, 1.0); 2],
            constraints: cons,
            horizon: 1,
            slack_penalty: DEFAULT_SLACK_PENALTY,
            literal_units: false,
        }
    }

    #[test]
    fn linearized_distance_row() {
        let ocp = pair_ocp();
        let nlp = build_partial_nlp(&ocp, &ocp.graph().unwrap(), &[Vector2::zeros(); 2], &[Vector2::zeros(); 2]).unwrap();
        let sub = &nlp.subsystems[1];
        let mut it = SqpIterate::zeros(sub);
        it.z[sub.layout.x(0)] = 1.0;
        let qp = build_subsystem_qp(sub, &it, &DsqpConfig::default()).unwrap();
        let row = sub.b_lin.len();
        assert!((qp.b_in[row] - 0.84).abs() < 1e-15);
        assert_eq!(qp.a_in[(row, sub.layout.x(0))], -2.0);
        assert_eq!(qp.a_in[(row, sub.layout.w(0, 0))], 2.0);
        assert_eq!(qp.a_in[(row, sub.layout.slack_index().unwrap())], -1.0);
    }

    #[test]
    fn distance_curvature_flipped() {
        let ocp = pair_ocp();
        let nlp = build_partial_nlp(&ocp, &ocp.graph().unwrap(), &[Vector2::zeros(); 2], &[Vector2::zeros(); 2]).unwrap();
        let sub = &nlp.subsystems[1];
        let mut mu = DVector::zeros(sub.n_in());
        mu[sub.b_lin.len()] = 3.0;
        let c = sub.weighted_constraint_hessian(&mu);
        // −2μ on the (x, w) difference direction, zero on the sum direction.
        let (xi, wi) = (sub.layout.x(0), sub.layout.w(0, 0));
        let mut diff = DVector::zeros(sub.dim());
        diff[xi] = 1.0;
        diff[wi] = -1.0;
        assert!((diff.dot(&(&c * &diff)) - (-2.0 * 3.0 * 4.0)).abs() < 1e-12);
        let flipped = flip_regularize(&c, 1e-4).unwrap();
        assert!((diff.dot(&(&flipped * &diff)) - 2.0 * 3.0 * 4.0).abs() < 1e-10);
    }
}
