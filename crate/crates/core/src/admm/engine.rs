//! Synchronous consensus rounds shared by plain ADMM and the inner loop of
//! the decentralized SQP method.
//!
//! One round has three phases, each run for all agents before the next one
//! starts:
//!
//! 1. solve the local QP and publish the copies of in-neighbor trajectories,
//! 2. average the own trajectory with the copies held by out-neighbors and
//!    publish the average,
//! 3. assemble the consensus vector from received averages and update the
//!    dual variable.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::SolverError;
use crate::exec::Execution;
use crate::messaging::{Endpoint, MessageKey, PHASE_AVERAGES, PHASE_COPIES, PHASE_REDUCE};
use crate::problem::{Layout, PartialNlp};
use crate::qp::{QpSolution, QpSolver};

/// Per-step timing entries `(label, microseconds)`.
pub type TimingLog = Vec<(&'static str, u64)>;

pub(crate) fn micros(since: Instant) -> u64 {
    since.elapsed().as_micros() as u64
}

/// Timing labels of the three round phases and the whole round.
#[derive(Debug, Clone, Copy)]
pub struct PhaseLabels {
    pub qp: &'static str,
    pub copies: &'static str,
    pub averages: &'static str,
    pub round: &'static str,
}

/// Local QP `min ½zᵀ(H+ρI)z + (g + γ − ρz̄)ᵀz` s.t. `A_eq z = b_eq`, `A_in z ≤ b_in`.
#[derive(Debug, Clone)]
pub struct LocalQp {
    pub solver: QpSolver,
    pub base_gradient: DVector<f64>,
    pub b_eq: DVector<f64>,
    pub b_in: DVector<f64>,
}

impl LocalQp {
    pub fn new(
        hessian: &DMatrix<f64>,
        rho: f64,
        a_eq: &DMatrix<f64>,
        a_in: &DMatrix<f64>,
        base_gradient: DVector<f64>,
        b_eq: DVector<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self, crate::qp::QpError> {
        let n = hessian.nrows();
        let h = hessian + DMatrix::identity(n, n) * rho;
        Ok(Self {
            solver: QpSolver::new(&h, a_eq, a_in)?,
            base_gradient,
            b_eq,
            b_in,
        })
    }

    pub fn solve(
        &self,
        gamma: &DVector<f64>,
        zbar: &DVector<f64>,
        rho: f64,
        warm: Option<&QpSolution>,
    ) -> Result<QpSolution, crate::qp::QpError> {
        let g = &self.base_gradient + gamma - zbar * rho;
        self.solver.solve(&g, &self.b_eq, &self.b_in, warm)
    }
}

/// Iterates held by one agent.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub z: DVector<f64>,
    pub zbar: DVector<f64>,
    pub gamma: DVector<f64>,
    pub last_qp: Option<QpSolution>,
}

impl AgentState {
    pub fn zeros(n: usize) -> Self {
        Self {
            z: DVector::zeros(n),
            zbar: DVector::zeros(n),
            gamma: DVector::zeros(n),
            last_qp: None,
        }
    }
}

/// Everything one agent needs to take part in a round: its layout, the
/// neighbor structure, its endpoint and its iterates.
pub struct AgentCtx {
    pub id: usize,
    pub layout: Layout,
    pub in_neighbors: Vec<usize>,
    /// `(j, c)`: out-neighbor `j` holds the copy of this agent at copy index `c`.
    pub out_neighbors: Vec<(usize, usize)>,
    pub n_agents: usize,
    pub endpoint: Box<dyn Endpoint>,
    pub state: AgentState,
    pub timing: TimingLog,
    /// Largest `|copy − original|` over rows owned by this agent, from the
    /// most recent averaging phase.
    pub coupling_residual: f64,
    scratch_times: [u64; 3],
}

impl AgentCtx {
    pub fn new(nlp: &PartialNlp, id: usize, endpoint: Box<dyn Endpoint>) -> Self {
        let layout = nlp.subsystems[id].layout.clone();
        let out_neighbors = nlp.graph.out_neighbors[id]
            .iter()
            .map(|&j| {
                let c = nlp.subsystems[j].layout.copy_of(id).expect("graph and layouts agree");
                (j, c)
            })
            .collect();
        let n = layout.dim();
        Self {
            id,
            in_neighbors: nlp.graph.in_neighbors[id].clone(),
            layout,
            out_neighbors,
            n_agents: nlp.len(),
            endpoint,
            state: AgentState::zeros(n),
            timing: Vec::new(),
            coupling_residual: 0.0,
            scratch_times: [0; 3],
        }
    }

    fn copies_slice<'a>(&self, z: &'a DVector<f64>) -> &'a [f64] {
        let start = self.layout.copy_start(0);
        let len = self.layout.copies.len() * self.layout.traj_len();
        &z.as_slice()[start..start + len]
    }

    /// Publish this agent's own trajectory block of `v` as an average message.
    pub fn publish_own(&mut self, v: &DVector<f64>, key: RoundKey) -> Result<(), SolverError> {
        let t = self.layout.traj_len();
        let payload = v.as_slice()[..t].to_vec();
        self.endpoint.publish(key.key(self.id, PHASE_AVERAGES), &payload)?;
        Ok(())
    }

    /// Overwrite the copy blocks of `v` with the averages published by
    /// in-neighbors under `key`.
    pub fn receive_copies_into(&mut self, v: &mut DVector<f64>, key: RoundKey) -> Result<(), SolverError> {
        let t = self.layout.traj_len();
        for c in 0..self.in_neighbors.len() {
            let j = self.in_neighbors[c];
            let p = self.endpoint.await_payload(key.key(j, PHASE_AVERAGES))?;
            let start = self.layout.copy_start(c);
            v.as_mut_slice()[start..start + t].copy_from_slice(&p[..t]);
        }
        Ok(())
    }
}

/// Identifies one round on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundKey {
    pub mpc_step: u32,
    pub outer: u16,
    pub inner: u16,
}

impl RoundKey {
    pub fn key(self, sender: usize, phase: u8) -> MessageKey {
        MessageKey {
            sender: sender as u8,
            mpc_step: self.mpc_step,
            outer_iter: self.outer,
            inner_iter: self.inner,
            phase,
        }
    }
}

/// Phase 1: local minimization and copy publication.
pub fn phase_solve(
    agents: &mut [AgentCtx],
    qps: &[LocalQp],
    rho: f64,
    key: RoundKey,
    exec: Execution,
) -> Result<(), SolverError> {
    let results = exec.map_mut(agents, |i, a| -> Result<(), SolverError> {
        let t0 = Instant::now();
        let sol = qps[i]
            .solve(&a.state.gamma, &a.state.zbar, rho, a.state.last_qp.as_ref())
            .map_err(|e| SolverError::QpBuild { agent: a.id, error: e })?;
        if !sol.is_optimal() {
            return Err(SolverError::LocalQp {
                agent: a.id,
                status: sol.status,
            });
        }
        a.state.z = sol.z.clone();
        a.state.last_qp = Some(sol);
        let t1 = Instant::now();
        let payload = a.copies_slice(&a.state.z).to_vec();
        a.endpoint.publish(key.key(a.id, PHASE_COPIES), &payload)?;
        a.scratch_times[0] = (t1 - t0).as_micros() as u64;
        a.scratch_times[1] = micros(t1);
        Ok(())
    });
    results.into_iter().collect()
}

/// Componentwise mean of the own trajectory and the copies held by
/// out-neighbors, summed in the order given.
pub fn average_trajectories(own: &[f64], copies: &[Vec<f64>]) -> Vec<f64> {
    let mut sum = own.to_vec();
    for c in copies {
        for (s, v) in sum.iter_mut().zip(c) {
            *s += v;
        }
    }
    let count = (copies.len() + 1) as f64;
    sum.iter_mut().for_each(|s| *s /= count);
    sum
}

/// Phase 2: average own trajectory with out-neighbor copies and publish it.
/// The average lands in the own block of `zbar`.
pub fn phase_average(agents: &mut [AgentCtx], key: RoundKey, exec: Execution) -> Result<(), SolverError> {
    let results = exec.map_mut(agents, |_, a| -> Result<(), SolverError> {
        let t0 = Instant::now();
        let t = a.layout.traj_len();
        let own = &a.state.z.as_slice()[..t];
        let mut copies = Vec::with_capacity(a.out_neighbors.len());
        let mut resid = 0.0f64;
        for k in 0..a.out_neighbors.len() {
            let (j, c) = a.out_neighbors[k];
            let p = a.endpoint.await_payload(key.key(j, PHASE_COPIES))?;
            let copy = p[c * t..(c + 1) * t].to_vec();
            resid = copy.iter().zip(own).fold(resid, |r, (v, o)| r.max((v - o).abs()));
            copies.push(copy);
        }
        let sum = average_trajectories(own, &copies);
        a.coupling_residual = resid;
        a.state.zbar = a.state.z.clone();
        a.state.zbar.as_mut_slice()[..t].copy_from_slice(&sum);
        a.endpoint.publish(key.key(a.id, PHASE_AVERAGES), &sum)?;
        a.scratch_times[1] += micros(t0);
        Ok(())
    });
    results.into_iter().collect()
}

/// Phase 3: assemble `z̄` from in-neighbor averages, then `γ += ρ(z − z̄)`.
pub fn phase_assemble(
    agents: &mut [AgentCtx],
    rho: f64,
    key: RoundKey,
    labels: &PhaseLabels,
    exec: Execution,
) -> Result<(), SolverError> {
    let results = exec.map_mut(agents, |_, a| -> Result<(), SolverError> {
        let t0 = Instant::now();
        let mut zbar = std::mem::replace(&mut a.state.zbar, DVector::zeros(0));
        a.receive_copies_into(&mut zbar, key)?;
        a.state.zbar = zbar;
        let diff = &a.state.z - &a.state.zbar;
        a.state.gamma.axpy(rho, &diff, 1.0);
        let t_avg = micros(t0);
        let [qp, copies, _] = a.scratch_times;
        a.timing.push((labels.qp, qp));
        a.timing.push((labels.copies, copies));
        a.timing.push((labels.averages, t_avg));
        a.timing.push((labels.round, qp + copies + t_avg));
        Ok(())
    });
    results.into_iter().collect()
}

/// All-reduce of small per-agent vectors by elementwise maximum.
pub fn phase_reduce_max(
    agents: &mut [AgentCtx],
    local: &[Vec<f64>],
    key: RoundKey,
    exec: Execution,
) -> Result<Vec<f64>, SolverError> {
    let published = exec.map_mut(agents, |i, a| a.endpoint.publish(key.key(a.id, PHASE_REDUCE), &local[i]));
    published.into_iter().collect::<Result<Vec<_>, _>>()?;
    let reduced = exec.map_mut(agents, |_, a| -> Result<Vec<f64>, SolverError> {
        let mut acc: Option<Vec<f64>> = None;
        for j in 0..a.n_agents {
            let p = a.endpoint.await_payload(key.key(j, PHASE_REDUCE))?;
            acc = Some(match acc {
                None => p,
                Some(v) => v.iter().zip(&p).map(|(x, y)| x.max(*y)).collect(),
            });
        }
        Ok(acc.unwrap_or_default())
    });
    let reduced: Vec<Vec<f64>> = reduced.into_iter().collect::<Result<_, _>>()?;
    debug_assert!(reduced.windows(2).all(|w| w[0] == w[1]));
    Ok(reduced.into_iter().next().unwrap_or_default())
}

/// Cold start: every block set to the current position, then copies filled
/// through one exchange of own trajectories.
pub fn cold_start(agents: &mut [AgentCtx], initial: &[DVector<f64>], key: RoundKey, exec: Execution) -> Result<(), SolverError> {
    let published = exec.map_mut(agents, |i, a| -> Result<(), SolverError> {
        a.state = AgentState::zeros(a.layout.dim());
        a.state.zbar = initial[i].clone();
        let v = a.state.zbar.clone();
        a.publish_own(&v, key)
    });
    published.into_iter().collect::<Result<Vec<_>, _>>()?;
    let received = exec.map_mut(agents, |_, a| -> Result<(), SolverError> {
        let mut v = std::mem::replace(&mut a.state.zbar, DVector::zeros(0));
        a.receive_copies_into(&mut v, key)?;
        a.state.zbar = v;
        Ok(())
    });
    received.into_iter().collect()
}

/// Move every stage-indexed block of `v` one stage forward. Vacated
/// terminal stages repeat the last stage, or are zeroed when `zero_tail`.
pub fn shift_stages(layout: &Layout, v: &DVector<f64>, zero_tail: bool) -> DVector<f64> {
    let mut out = v.clone();
    let n = layout.horizon;
    let mut shift_block = |start: usize, stages: usize| {
        for k in 0..stages.saturating_sub(1) {
            for d in 0..2 {
                out[start + 2 * k + d] = v[start + 2 * (k + 1) + d];
            }
        }
        if stages >= 1 {
            let last = start + 2 * (stages - 1);
            for d in 0..2 {
                out[last + d] = if zero_tail { 0.0 } else { v[last + d] };
            }
        }
    };
    shift_block(layout.x(0), n + 1);
    shift_block(layout.u(0), n);
    for c in 0..layout.copies.len() {
        shift_block(layout.w(c, 0), n + 1);
    }
    out
}

/// Shift the stage-indexed blocks of a multiplier vector with `stages`
/// consecutive blocks of `width` entries starting at `start`.
pub fn shift_rows(v: &mut DVector<f64>, start: usize, width: usize, stages: usize) {
    if stages < 2 {
        return;
    }
    for k in 0..stages - 1 {
        for d in 0..width {
            v[start + k * width + d] = v[start + (k + 1) * width + d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_rule() {
        let layout = Layout {
            horizon: 2,
            copies: vec![],
            slack: false,
        };
        let v = DVector::from_row_slice(&[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 10.0, 10.5, 11.0, 11.5]);
        let s = shift_stages(&layout, &v, false);
        assert_eq!(s.as_slice(), &[1.0, 1.5, 2.0, 2.5, 2.0, 2.5, 11.0, 11.5, 11.0, 11.5]);
        let z = shift_stages(&layout, &v, true);
        assert_eq!(z.as_slice(), &[1.0, 1.5, 2.0, 2.5, 0.0, 0.0, 11.0, 11.5, 0.0, 0.0]);
        let c = DVector::from_element(10, 3.0);
        assert_eq!(shift_stages(&layout, &c, false), c);
    }
}
