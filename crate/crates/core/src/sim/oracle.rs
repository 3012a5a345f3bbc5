//! Centralized reference solver working directly on the stacked trajectories
//! `v = (x_1, u_1, …, x_S, u_S)` without copies or splitting.

use log::debug;
use nalgebra::{DMatrix, DVector, Vector2};

use crate::linalg::{flip_regularize, symmetrize};
use crate::problem::{Ocp, PartialNlp};
use crate::qp::{QpSolution, QpSolver, QpStatus};

pub const ORACLE_TOL: f64 = 1e-9;
pub const ORACLE_MAX_ITER: usize = 100;
const HESSIAN_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleStatus {
    Optimal,
    Failed,
}

impl OracleStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleStatus::Optimal => "optimal",
            OracleStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub v: DVector<f64>,
    pub mu: DVector<f64>,
    pub status: OracleStatus,
    pub iterations: usize,
    pub kkt: f64,
}

/// Pair row `d − ‖x_i^k − x_j^k‖² − s_i ≤ 0`.
#[derive(Debug, Clone, Copy)]
struct PairRow {
    i: usize,
    j: usize,
    k: usize,
    bound: f64,
    slack: Option<usize>,
}

/// Centralized form of the OCP at one measured state.
#[derive(Debug, Clone)]
pub struct CentralizedOcp {
    pub robots: usize,
    pub horizon: usize,
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    a_lin: DMatrix<f64>,
    b_lin: DVector<f64>,
    pairs: Vec<PairRow>,
    block: usize,
    slack_offset: usize,
}

impl CentralizedOcp {
    pub fn new(ocp: &Ocp, x_now: &[Vector2<f64>], u_now: &[Vector2<f64>]) -> Self {
        let s = ocp.robots();
        let n = ocp.horizon;
        let block = 2 * (n + 1) + 2 * n;
        let soft: Vec<bool> = ocp.constraints.iter().map(|c| c.has_soft()).collect();
        let slack_offset = s * block;
        let mut slack_idx = vec![None; s];
        let mut next = slack_offset;
        for i in 0..s {
            if soft[i] {
                slack_idx[i] = Some(next);
                next += 1;
            }
        }
        let dim = next;
        let xo = |i: usize, k: usize| i * block + 2 * k;
        let uo = |i: usize, k: usize| i * block + 2 * (n + 1) + 2 * k;

        let mut h = DMatrix::zeros(dim, dim);
        let mut reference = DVector::zeros(dim);
        for i in 0..s {
            let c = &ocp.costs[i];
            for k in 0..=n {
                let (own, cross) = if k < n { (&c.q_ii, &c.q_ij) } else { (&c.p_ii, &c.p_ij) };
                h.view_mut((xo(i, k), xo(i, k)), (2, 2)).copy_from(own);
                for (&j, m) in cross {
                    h.view_mut((xo(i, k), xo(j, k)), (2, 2)).copy_from(m);
                }
                reference.fixed_rows_mut::<2>(xo(i, k)).copy_from(&c.setpoint);
            }
            for k in 0..n {
                h.view_mut((uo(i, k), uo(i, k)), (2, 2)).copy_from(&c.r_ii);
                reference.fixed_rows_mut::<2>(uo(i, k)).copy_from(&c.input_setpoint);
            }
            if let Some(si) = slack_idx[i] {
                h[(si, si)] = 2.0 * ocp.slack_penalty;
            }
        }
        let hessian = symmetrize(&h);
        let gradient = -(&hessian * &reference);

        let n_eq = s * (2 * n + 4);
        let mut a_eq = DMatrix::zeros(n_eq, dim);
        let mut b_eq = DVector::zeros(n_eq);
        let mut r = 0;
        for i in 0..s {
            let dt = ocp.models[i].dt;
            for k in 0..n {
                for d in 0..2 {
                    a_eq[(r, xo(i, k + 1) + d)] = 1.0;
                    a_eq[(r, xo(i, k) + d)] = -1.0;
                    a_eq[(r, uo(i, k) + d)] = -dt;
                    r += 1;
                }
            }
            for d in 0..2 {
                a_eq[(r, xo(i, 0) + d)] = 1.0;
                b_eq[r] = x_now[i][d];
                r += 1;
            }
            for d in 0..2 {
                a_eq[(r, uo(i, 0) + d)] = 1.0;
                b_eq[r] = u_now[i][d];
                r += 1;
            }
        }

        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..s {
            let c = &ocp.constraints[i];
            for k in 1..n {
                for d in 0..2 {
                    rows.push((uo(i, k) + d, 1.0, c.input_upper[d]));
                    rows.push((uo(i, k) + d, -1.0, -c.input_lower[d]));
                }
            }
            if let Some((lo, hi)) = &c.state_box {
                for k in 1..=n {
                    for d in 0..2 {
                        rows.push((xo(i, k) + d, 1.0, hi[d]));
                        rows.push((xo(i, k) + d, -1.0, -lo[d]));
                    }
                }
            }
        }
        let mut a_lin = DMatrix::zeros(rows.len(), dim);
        let mut b_lin = DVector::zeros(rows.len());
        for (p, &(col, sign, rhs)) in rows.iter().enumerate() {
            a_lin[(p, col)] = sign;
            b_lin[p] = rhs;
        }

        let mut pairs = Vec::new();
        for i in 0..s {
            for pc in &ocp.constraints[i].pairs {
                for k in 0..=n {
                    pairs.push(PairRow {
                        i,
                        j: pc.neighbor,
                        k,
                        bound: ocp.distance_bound(pc.min_distance),
                        slack: if pc.soft { slack_idx[i] } else { None },
                    });
                }
            }
        }
        Self {
            robots: s,
            horizon: n,
            hessian,
            gradient,
            a_eq,
            b_eq,
            a_lin,
            b_lin,
            pairs,
            block,
            slack_offset,
        }
    }

    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn is_convex(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn x(&self, v: &DVector<f64>, i: usize, k: usize) -> Vector2<f64> {
        v.fixed_rows::<2>(i * self.block + 2 * k).into_owned()
    }

    pub fn u(&self, v: &DVector<f64>, i: usize, k: usize) -> Vector2<f64> {
        v.fixed_rows::<2>(i * self.block + 2 * (self.horizon + 1) + 2 * k).into_owned()
    }

    pub fn applied_inputs(&self, v: &DVector<f64>) -> Vec<Vector2<f64>> {
        let k = if self.horizon >= 2 { 1 } else { 0 };
        (0..self.robots).map(|i| self.u(v, i, k)).collect()
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.hessian * v)) + self.gradient.dot(v)
    }

    fn ineq(&self, v: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n_lin = self.b_lin.len();
        let m = n_lin + self.pairs.len();
        let mut h = DVector::zeros(m);
        let mut j = DMatrix::zeros(m, self.dim());
        h.rows_mut(0, n_lin).copy_from(&(&self.a_lin * v - &self.b_lin));
        j.rows_mut(0, n_lin).copy_from(&self.a_lin);
        for (r, p) in self.pairs.iter().enumerate() {
            let row = n_lin + r;
            let (a, b) = (p.i * self.block + 2 * p.k, p.j * self.block + 2 * p.k);
            let mut sq = 0.0;
            for d in 0..2 {
                let diff = v[a + d] - v[b + d];
                sq += diff * diff;
                j[(row, a + d)] = -2.0 * diff;
                j[(row, b + d)] = 2.0 * diff;
            }
            h[row] = p.bound - sq;
            if let Some(s) = p.slack {
                h[row] -= v[s];
                j[(row, s)] = -1.0;
            }
        }
        (h, j)
    }

    fn lagrangian_hessian(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let n_lin = self.b_lin.len();
        let mut h = self.hessian.clone();
        for (r, p) in self.pairs.iter().enumerate() {
            let m = mu[n_lin + r];
            let (a, b) = (p.i * self.block + 2 * p.k, p.j * self.block + 2 * p.k);
            for d in 0..2 {
                h[(a + d, a + d)] -= 2.0 * m;
                h[(b + d, b + d)] -= 2.0 * m;
                h[(a + d, b + d)] += 2.0 * m;
                h[(b + d, a + d)] += 2.0 * m;
            }
        }
        h
    }

    /// Infinity norm of the KKT residual (stationarity, feasibility,
    /// complementarity) at `(v, ν, μ)`.
    pub fn kkt_error(&self, v: &DVector<f64>, nu: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let (h, jh) = self.ineq(v);
        let stat = &self.hessian * v + &self.gradient + self.a_eq.transpose() * nu + jh.transpose() * mu;
        let eq = &self.a_eq * v - &self.b_eq;
        let feas = h.iter().fold(0.0f64, |a, &x| a.max(x));
        let comp = h.iter().zip(mu.iter()).fold(0.0f64, |a, (x, m)| a.max((x * m).abs()));
        let dual = mu.iter().fold(0.0f64, |a, &m| a.max(-m));
        stat.amax().max(eq.amax()).max(feas).max(comp).max(dual)
    }

    /// Constant rollout at the measured state.
    pub fn initial_guess(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        let n = self.horizon;
        for i in 0..self.robots {
            let x0 = self.b_eq.fixed_rows::<2>(i * (2 * n + 4) + 2 * n).into_owned();
            let u0 = self.b_eq.fixed_rows::<2>(i * (2 * n + 4) + 2 * n + 2).into_owned();
            for k in 0..=n {
                v.fixed_rows_mut::<2>(i * self.block + 2 * k).copy_from(&x0);
            }
            v.fixed_rows_mut::<2>(i * self.block + 2 * (n + 1)).copy_from(&u0);
        }
        v
    }

    /// Shift a previous solution by one stage, repeating the last stage.
    pub fn shift(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        let n = self.horizon;
        for i in 0..self.robots {
            for (start, stages) in [(i * self.block, n + 1), (i * self.block + 2 * (n + 1), n)] {
                for k in 0..stages.saturating_sub(1) {
                    for d in 0..2 {
                        out[start + 2 * k + d] = v[start + 2 * (k + 1) + d];
                    }
                }
            }
        }
        out
    }

    /// Solve to KKT tolerance. Convex problems are one QP; otherwise full-step
    /// SQP with eigenvalue-flipped Lagrangian Hessians starting from `start`.
    pub fn solve(&self, start: Option<&DVector<f64>>) -> OracleSolution {
        let n_in = self.b_lin.len() + self.pairs.len();
        if self.is_convex() {
            let solver = match QpSolver::new(&self.hessian, &self.a_eq, &self.a_lin) {
                Ok(s) => s,
                Err(_) => return self.failed(0),
            };
            return match solver.solve(&self.gradient, &self.b_eq, &self.b_lin, None) {
                Ok(sol) if sol.status == QpStatus::Optimal => {
                    let kkt = self.kkt_error(&sol.z, &sol.lam_eq, &sol.mu_in);
                    OracleSolution {
                        v: sol.z,
                        mu: sol.mu_in,
                        status: if kkt <= ORACLE_TOL { OracleStatus::Optimal } else { OracleStatus::Failed },
                        iterations: 1,
                        kkt,
                    }
                }
                _ => self.failed(1),
            };
        }
        let mut v = start.cloned().unwrap_or_else(|| self.initial_guess());
        let mut mu = DVector::zeros(n_in);
        let mut warm: Option<QpSolution> = None;
        for it in 1..=ORACLE_MAX_ITER {
            let (h, jh) = self.ineq(&v);
            let Some(b) = flip_regularize(&self.lagrangian_hessian(&mu), HESSIAN_EPS) else {
                return self.failed(it);
            };
            let Ok(solver) = QpSolver::new(&b, &self.a_eq, &jh) else {
                return self.failed(it);
            };
            let g = &self.hessian * &v + &self.gradient;
            let b_eq = &self.b_eq - &self.a_eq * &v;
            let sol = match solver.solve(&g, &b_eq, &(-&h), warm.as_ref()) {
                Ok(s) if s.status == QpStatus::Optimal => s,
                _ => return self.failed(it),
            };
            v += &sol.z;
            mu = sol.mu_in.clone();
            let kkt = self.kkt_error(&v, &sol.lam_eq, &mu);
            warm = Some(sol);
            if kkt <= ORACLE_TOL {
                return OracleSolution {
                    v,
                    mu,
                    status: OracleStatus::Optimal,
                    iterations: it,
                    kkt,
                };
            }
        }
        debug!("centralized SQP did not converge in {ORACLE_MAX_ITER} iterations");
        let kkt = f64::NAN;
        OracleSolution {
            v,
            mu,
            status: OracleStatus::Failed,
            iterations: ORACLE_MAX_ITER,
            kkt,
        }
    }

    fn failed(&self, iterations: usize) -> OracleSolution {
        OracleSolution {
            v: DVector::zeros(self.dim()),
            mu: DVector::zeros(self.b_lin.len() + self.pairs.len()),
            status: OracleStatus::Failed,
            iterations,
            kkt: f64::NAN,
        }
    }

    /// Map a centralized point into per-subsystem vectors of `nlp`, filling
    /// copies with the originals.
    pub fn to_local(&self, nlp: &PartialNlp, v: &DVector<f64>) -> Vec<DVector<f64>> {
        let n = self.horizon;
        nlp.subsystems
            .iter()
            .map(|sub| {
                let l = &sub.layout;
                let mut z = DVector::zeros(l.dim());
                for k in 0..=n {
                    z.fixed_rows_mut::<2>(l.x(k)).copy_from(&self.x(v, sub.id, k));
                    for (c, &j) in l.copies.iter().enumerate() {
                        z.fixed_rows_mut::<2>(l.w(c, k)).copy_from(&self.x(v, j, k));
                    }
                }
                for k in 0..n {
                    z.fixed_rows_mut::<2>(l.u(k)).copy_from(&self.u(v, sub.id, k));
                }
                if let Some(s) = l.slack_index() {
                    let soft_before = nlp.subsystems[..sub.id].iter().filter(|s| s.layout.slack).count();
                    z[s] = v[self.slack_offset + soft_before];
                }
                z
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ConstraintSet, RobotModel, StageCost, DEFAULT_SLACK_PENALTY};

    #[test]
    fn single_robot_matches_banded_lq_solve() {
        let mut cost = StageCost::diagonal(2.0, 1.0);
        cost.setpoint = Vector2::new(1.0, -1.0);
        let ocp = Ocp {
            models: vec![RobotModel::new(0.5).unwrap()],
            costs: vec![cost],
            constraints: vec![ConstraintSet::input_box(100.0)],
            horizon: 3,
            slack_penalty: DEFAULT_SLACK_PENALTY,
            literal_units: false,
        };
        let c = CentralizedOcp::new(&ocp, &[Vector2::zeros()], &[Vector2::zeros()]);
        let sol = c.solve(None);
        assert_eq!(sol.status, OracleStatus::Optimal);
        // Eliminate the states: x^k = dt Σ_{m<k} u^m with u⁰ = 0 fixed, then
        // minimize over (u¹, u²) per axis by a 2×2 normal-equation solve.
        let dt = 0.5;
        for (axis, target) in [(0usize, 1.0), (1usize, -1.0)] {
            // x¹ = 0, x² = dt·u¹, x³ = dt·(u¹+u²); weights q=2 for x¹, x², P=2 for x³, r=1.
            let (q, r) = (2.0, 1.0);
            let a = DMatrix::from_row_slice(2, 2, &[q * dt * dt * 2.0 + r, q * dt * dt, q * dt * dt, q * dt * dt + r]);
            let b = DVector::from_row_slice(&[q * dt * target * 2.0, q * dt * target]);
            let u = a.lu().solve(&b).unwrap();
            assert!((c.u(&sol.v, 0, 1)[axis] - u[0]).abs() < 1e-10);
            assert!((c.u(&sol.v, 0, 2)[axis] - u[1]).abs() < 1e-10);
        }
    }
}
