//! Centralized KKT tools: the equality-KKT residual `F̃` and its Jacobian,
//! the inexact-Newton stopping test, regularity checks and a full-step SQP
//! reference solver in the stacked variable space.

use nalgebra::{DMatrix, DVector};

use super::SqpIterate;
use crate::linalg::{min_eigenvalue, rank, symmetrize};
use crate::problem::PartialNlp;
use crate::qp::{self, DenseQp, QpError};

/// Stacked primal-dual point `(z, ν, μ, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub z: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    pub lambda: DVector<f64>,
}

impl KktPoint {
    /// Consensus multipliers recovered from the ADMM duals by least squares.
    pub fn from_iterates(nlp: &PartialNlp, its: &[SqpIterate]) -> Self {
        let gamma: Vec<DVector<f64>> = its.iter().map(|it| it.gamma.clone()).collect();
        Self {
            z: its.iter().map(|it| it.z.clone()).collect(),
            nu: its.iter().map(|it| it.nu.clone()).collect(),
            mu: its.iter().map(|it| it.mu.clone()).collect(),
            lambda: nlp.consensus.multiplier_from_dual(&nlp.consensus.stack(&gamma)),
        }
    }

    /// Local iterates with `γ_i = E_iᵀλ`.
    pub fn to_iterates(&self, nlp: &PartialNlp) -> Vec<SqpIterate> {
        let gamma = nlp.consensus.split(&nlp.consensus.apply_transpose(&self.lambda));
        (0..self.z.len())
            .map(|i| SqpIterate {
                z: self.z[i].clone(),
                nu: self.nu[i].clone(),
                mu: self.mu[i].clone(),
                gamma: gamma[i].clone(),
            })
            .collect()
    }

    /// Flattened `[z_1, ν_1, μ_1, …, z_S, ν_S, μ_S, λ]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::new();
        for i in 0..self.z.len() {
            v.extend_from_slice(self.z[i].as_slice());
            v.extend_from_slice(self.nu[i].as_slice());
            v.extend_from_slice(self.mu[i].as_slice());
        }
        v.extend_from_slice(self.lambda.as_slice());
        DVector::from_vec(v)
    }

    pub fn distance(&self, other: &KktPoint) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

/// `F̃(p)` and `∇F̃(p)`. Rows: per subsystem the Lagrangian gradient and the
/// equality residuals, then the consensus rows `E z`. Columns follow
/// [`KktPoint::to_vector`].
pub fn kkt_residual(nlp: &PartialNlp, p: &KktPoint) -> (DVector<f64>, DMatrix<f64>) {
    let e = nlp.consensus.to_dense();
    let m_e = e.nrows();
    let gamma = nlp.consensus.split(&nlp.consensus.apply_transpose(&p.lambda));
    let n_rows: usize = nlp.subsystems.iter().map(|s| s.dim() + s.n_eq()).sum::<usize>() + m_e;
    let n_cols: usize = nlp.subsystems.iter().map(|s| s.dim() + s.n_eq() + s.n_in()).sum::<usize>() + m_e;
    let mut f = DVector::zeros(n_rows);
    let mut jac = DMatrix::zeros(n_rows, n_cols);
    let lam_col = n_cols - m_e;
    let (mut r, mut c) = (0, 0);
    for (i, sub) in nlp.subsystems.iter().enumerate() {
        let (n, m_eq, m_in) = (sub.dim(), sub.n_eq(), sub.n_in());
        let ev = sub.eval_constraints(&p.z[i]);
        let stat = sub.objective_gradient(&p.z[i])
            + ev.g_jac.transpose() * &p.nu[i]
            + ev.h_jac.transpose() * &p.mu[i]
            + &gamma[i];
        f.rows_mut(r, n).copy_from(&stat);
        f.rows_mut(r + n, m_eq).copy_from(&ev.g_val);
        jac.view_mut((r, c), (n, n)).copy_from(&sub.lagrangian_hessian(&p.mu[i]));
        jac.view_mut((r, c + n), (n, m_eq)).copy_from(&ev.g_jac.transpose());
        jac.view_mut((r, c + n + m_eq), (n, m_in)).copy_from(&ev.h_jac.transpose());
        let e_i = e.columns(nlp.consensus.offsets[i], n);
        jac.view_mut((r, lam_col), (n, m_e)).copy_from(&e_i.transpose());
        jac.view_mut((r + n, c), (m_eq, n)).copy_from(&ev.g_jac);
        jac.view_mut((n_rows - m_e, c), (m_e, n)).copy_from(&e_i);
        r += n + m_eq;
        c += n + m_eq + m_in;
    }
    let stacked = nlp.consensus.stack(&p.z);
    f.rows_mut(n_rows - m_e, m_e).copy_from(&nlp.consensus.apply(&stacked));
    (f, jac)
}

/// `‖F̃ + ∇F̃ d‖∞ ≤ η‖F̃‖∞`.
pub fn dynamic_stop(f: &DVector<f64>, jac: &DMatrix<f64>, d: &DVector<f64>, eta: f64) -> bool {
    dynamic_stop_norms((f + jac * d).amax(), f.amax(), eta)
}

pub fn dynamic_stop_norms(linearized: f64, residual: f64, eta: f64) -> bool {
    linearized <= eta * residual
}

/// Whether a constraint row counts as active at tolerance `tol`.
fn is_active(h: f64, tol: f64) -> bool {
    h >= -tol
}

/// Linear independence of the equality, active inequality and consensus
/// constraint gradients at `z`.
pub fn licq(nlp: &PartialNlp, z: &[DVector<f64>], active_tol: f64) -> bool {
    let e = nlp.consensus.to_dense();
    let n_cols = e.ncols();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for (i, sub) in nlp.subsystems.iter().enumerate() {
        let ev = sub.eval_constraints(&z[i]);
        let off = nlp.consensus.offsets[i];
        let mut push = |row: nalgebra::DVectorView<f64>| {
            let mut full = DVector::zeros(n_cols);
            full.rows_mut(off, sub.dim()).copy_from(&row);
            rows.push(full);
        };
        for k in 0..ev.g_jac.nrows() {
            push(ev.g_jac.row(k).transpose().as_view());
        }
        for k in 0..ev.h_jac.nrows() {
            if is_active(ev.h_val[k], active_tol) {
                push(ev.h_jac.row(k).transpose().as_view());
            }
        }
    }
    for k in 0..e.nrows() {
        rows.push(e.row(k).transpose());
    }
    if rows.is_empty() {
        return true;
    }
    let m = DMatrix::from_columns(&rows).transpose();
    rank(&m, 1e-10) == m.nrows()
}

/// Smallest `μ_p − h_p` over all inequality rows; strictly positive means
/// strict complementarity.
pub fn complementarity_margin(nlp: &PartialNlp, z: &[DVector<f64>], mu: &[DVector<f64>]) -> f64 {
    let mut margin = f64::INFINITY;
    for (i, sub) in nlp.subsystems.iter().enumerate() {
        let ev = sub.eval_constraints(&z[i]);
        for k in 0..ev.h_val.len() {
            margin = margin.min(mu[i][k] - ev.h_val[k]);
        }
    }
    margin
}

/// Smallest eigenvalue of `∇²L_i` over subsystems.
pub fn min_lagrangian_eigenvalue(nlp: &PartialNlp, mu: &[DVector<f64>]) -> f64 {
    nlp.subsystems
        .iter()
        .zip(mu)
        .map(|(s, m)| min_eigenvalue(&s.lagrangian_hessian(m)))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralSqpOptions {
    /// Weight of the consensus penalty `σEᵀE` added to the Hessian. It does
    /// not change the QP solution because `EΔz` is fixed by the constraints.
    pub sigma: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CentralSqpOptions {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            max_iter: 100,
            tol: 1e-13,
        }
    }
}

/// One full SQP step on the stacked problem: the coupled QP built at `p`
/// with Hessian `∇²L + σEᵀE` is solved exactly and `p` is replaced by the
/// new iterate. The Hessian is eigenvalue-flipped only when it is not
/// positive definite. Returns `‖Δz‖∞`.
pub fn central_sqp_step(nlp: &PartialNlp, p: &mut KktPoint, sigma: f64) -> Result<f64, QpError> {
    let e = nlp.consensus.to_dense();
    let m_e = e.nrows();
    let dims = nlp.dims();
    let n: usize = dims.iter().sum();
    let n_eq: usize = nlp.subsystems.iter().map(|s| s.n_eq()).sum();
    let n_in: usize = nlp.subsystems.iter().map(|s| s.n_in()).sum();
    let mut h = e.transpose() * &e * sigma;
    let mut g = DVector::zeros(n);
    let mut a_eq = DMatrix::zeros(n_eq + m_e, n);
    let mut b_eq = DVector::zeros(n_eq + m_e);
    let mut a_in = DMatrix::zeros(n_in, n);
    let mut b_in = DVector::zeros(n_in);
    let (mut re, mut ri) = (0, 0);
    for (i, sub) in nlp.subsystems.iter().enumerate() {
        let off = nlp.consensus.offsets[i];
        let ni = dims[i];
        let ev = sub.eval_constraints(&p.z[i]);
        let mut hv = h.view_mut((off, off), (ni, ni));
        hv += sub.lagrangian_hessian(&p.mu[i]);
        g.rows_mut(off, ni).copy_from(&sub.objective_gradient(&p.z[i]));
        a_eq.view_mut((re, off), (sub.n_eq(), ni)).copy_from(&ev.g_jac);
        b_eq.rows_mut(re, sub.n_eq()).copy_from(&(-ev.g_val));
        a_in.view_mut((ri, off), (sub.n_in(), ni)).copy_from(&ev.h_jac);
        b_in.rows_mut(ri, sub.n_in()).copy_from(&(-ev.h_val));
        re += sub.n_eq();
        ri += sub.n_in();
    }
    let z_stacked = nlp.consensus.stack(&p.z);
    a_eq.view_mut((n_eq, 0), (m_e, n)).copy_from(&e);
    b_eq.rows_mut(n_eq, m_e).copy_from(&(-nlp.consensus.apply(&z_stacked)));
    let mut h = symmetrize(&h);
    if min_eigenvalue(&h) <= 0.0 {
        h = crate::linalg::flip_regularize(&h, 1e-4).ok_or(QpError::NotConvex)?;
    }
    let sol = qp::solve(
        &DenseQp {
            h,
            g,
            a_eq,
            b_eq,
            a_in,
            b_in,
        },
        None,
    )?;
    if !sol.is_optimal() {
        return Err(QpError::NotConvex);
    }
    let dz = nlp.consensus.split(&sol.z);
    let (mut re, mut ri) = (0, 0);
    for i in 0..nlp.len() {
        p.z[i] += &dz[i];
        let (me, mi) = (nlp.subsystems[i].n_eq(), nlp.subsystems[i].n_in());
        p.nu[i] = sol.lam_eq.rows(re, me).into_owned();
        p.mu[i] = sol.mu_in.rows(ri, mi).into_owned();
        re += me;
        ri += mi;
    }
    p.lambda = sol.lam_eq.rows(n_eq, m_e).into_owned();
    Ok(sol.z.amax())
}

/// Full-step SQP on the stacked problem with the exact Lagrangian Hessian.
/// Returns the final point and the number of iterations.
pub fn solve_central_sqp(nlp: &PartialNlp, start: &KktPoint, opts: CentralSqpOptions) -> Result<(KktPoint, usize), QpError> {
    let mut p = start.clone();
    for it in 1..=opts.max_iter {
        if central_sqp_step(nlp, &mut p, opts.sigma)? <= opts.tol {
            return Ok((p, it));
        }
    }
    Ok((p, opts.max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_partial_nlp, ConstraintSet, Ocp, RobotModel, StageCost, DEFAULT_SLACK_PENALTY};
    use nalgebra::{Matrix2, Vector2};

    fn coupled_lq() -> PartialNlp {
        let mut costs = vec![StageCost::diagonal(2.0, 1.0); 2];
        costs[0].q_ij.insert(1, Matrix2::identity() * -0.5);
        costs[1].q_ij.insert(0, Matrix2::identity() * -0.5);
        costs[1].setpoint = Vector2::new(1.0, 0.0);
        let ocp = Ocp {
            models: vec![RobotModel::new(0.2).unwrap(); 2],
            costs,
            constraints: vec![ConstraintSet::input_box(10.0); 2],
            horizon: 2,
            slack_penalty: DEFAULT_SLACK_PENALTY,
            literal_units: false,
        };
        build_partial_nlp(&ocp, &ocp.graph().unwrap(), &[Vector2::zeros(); 2], &[Vector2::zeros(); 2]).unwrap()
    }

    fn zero_point(nlp: &PartialNlp) -> KktPoint {
        KktPoint {
            z: nlp.subsystems.iter().map(|s| DVector::zeros(s.dim())).collect(),
            nu: nlp.subsystems.iter().map(|s| DVector::zeros(s.n_eq())).collect(),
            mu: nlp.subsystems.iter().map(|s| DVector::zeros(s.n_in())).collect(),
            lambda: DVector::zeros(nlp.consensus.n_rows()),
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let nlp = coupled_lq();
        let mut p = zero_point(&nlp);
        for (i, z) in p.z.iter_mut().enumerate() {
            for (k, v) in z.iter_mut().enumerate() {
                *v = ((k * 7 + i * 3) % 5) as f64 * 0.1;
            }
        }
        p.lambda.iter_mut().enumerate().for_each(|(k, v)| *v = (k % 3) as f64 * 0.2);
        let (f0, jac) = kkt_residual(&nlp, &p);
        let v0 = p.to_vector();
        let h = 1e-6;
        for col in (0..v0.len()).step_by(5) {
            let mut v = v0.clone();
            v[col] += h;
            let q = unflatten(&nlp, &p, &v);
            let (f1, _) = kkt_residual(&nlp, &q);
            let fd = (f1 - &f0) / h;
            assert!((fd - jac.column(col)).amax() < 1e-6, "column {col}");
        }
    }

    fn unflatten(nlp: &PartialNlp, like: &KktPoint, v: &DVector<f64>) -> KktPoint {
        let mut q = like.clone();
        let mut o = 0;
        for i in 0..nlp.len() {
            for part in [&mut q.z[i], &mut q.nu[i], &mut q.mu[i]] {
                let n = part.len();
                part.copy_from(&v.rows(o, n));
                o += n;
            }
        }
        let n = q.lambda.len();
        q.lambda.copy_from(&v.rows(o, n));
        q
    }

    #[test]
    fn central_sqp_reaches_kkt_point_of_lq() {
        let nlp = coupled_lq();
        let (p, iters) = solve_central_sqp(&nlp, &zero_point(&nlp), CentralSqpOptions::default()).unwrap();
        assert!(iters <= 3);
        let (f, jac) = kkt_residual(&nlp, &p);
        assert!(f.amax() < 1e-10, "{}", f.amax());
        assert!(dynamic_stop(&f, &jac, &DVector::zeros(jac.ncols()), 1.0));
        assert!(licq(&nlp, &p.z, 1e-9));
    }
}
