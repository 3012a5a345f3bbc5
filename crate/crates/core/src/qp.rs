//! Dense strictly convex QP solver.
//!
//! Solves `min ½ zᵀHz + gᵀz  s.t.  A_eq z = b_eq,  A_in z ≤ b_in` with a dual
//! active-set method in the Goldfarb–Idnani family. The Cholesky factor of `H`
//! and the constraint Gram matrix `A H⁻¹ Aᵀ` are computed once per
//! [`QpSolver`]; every working-set change only refactors the (small) Schur
//! complement of the rows currently in the working set. Hot starts reuse the
//! previous active set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP hessian is not positive definite")]
    NotConvex,
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
}

/// Problem data. Inequality rows read `A_in z ≤ b_in`.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl DenseQp {
    /// Unconstrained problem with `n` variables.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    /// Objective value at `z`.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub lam_eq: DVector<f64>,
    /// One multiplier per inequality row, zero for inactive rows.
    pub mu_in: DVector<f64>,
    /// Indices of active inequality rows, ascending.
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    /// Number of working-set changes performed by this solve.
    pub changes: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    /// Largest tolerated inequality violation.
    pub feas_tol: f64,
    /// Multipliers below `-dual_tol` are dropped from the working set.
    pub dual_tol: f64,
    /// Relative Schur-complement threshold below which a row is treated as
    /// linearly dependent on the working set.
    pub dependence_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-10,
            dual_tol: 1e-12,
            dependence_tol: 1e-11,
        }
    }
}

/// Factorized QP structure (`H`, `A_eq`, `A_in`). Only `g`, `b_eq` and `b_in`
/// may change between solves.
#[derive(Debug, Clone)]
pub struct QpSolver {
    n: usize,
    m_eq: usize,
    m_in: usize,
    chol: Cholesky<f64, Dyn>,
    /// All constraint rows, equalities first.
    a: DMatrix<f64>,
    /// `H⁻¹ Aᵀ`, one column per row of `a`.
    hinv_at: DMatrix<f64>,
    /// `A H⁻¹ Aᵀ`.
    gram: DMatrix<f64>,
    settings: QpSettings,
}

struct WorkingSet {
    rows: Vec<usize>,
    lam: Vec<f64>,
}

impl QpSolver {
    pub fn new(h: &DMatrix<f64>, a_eq: &DMatrix<f64>, a_in: &DMatrix<f64>) -> Result<Self, QpError> {
        Self::with_settings(h, a_eq, a_in, QpSettings::default())
    }

    pub fn with_settings(
        h: &DMatrix<f64>,
        a_eq: &DMatrix<f64>,
        a_in: &DMatrix<f64>,
        settings: QpSettings,
    ) -> Result<Self, QpError> {
        let n = h.nrows();
        if h.ncols() != n {
            return Err(QpError::Dimension(format!("H is {}x{}", h.nrows(), h.ncols())));
        }
        if a_eq.ncols() != n || a_in.ncols() != n {
            return Err(QpError::Dimension(format!(
                "constraint matrices have {} and {} columns, expected {n}",
                a_eq.ncols(),
                a_in.ncols()
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NotConvex);
        }
        let sym = (h + h.transpose()) * 0.5;
        let chol = Cholesky::new(sym).ok_or(QpError::NotConvex)?;
        let (m_eq, m_in) = (a_eq.nrows(), a_in.nrows());
        let mut a = DMatrix::zeros(m_eq + m_in, n);
        a.rows_mut(0, m_eq).copy_from(a_eq);
        a.rows_mut(m_eq, m_in).copy_from(a_in);
        let hinv_at = chol.solve(&a.transpose());
        let gram = &a * &hinv_at;
        let gram = (&gram + gram.transpose()) * 0.5;
        Ok(Self {
            n,
            m_eq,
            m_in,
            chol,
            a,
            hinv_at,
            gram,
            settings,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_eq(&self) -> usize {
        self.m_eq
    }

    pub fn n_in(&self) -> usize {
        self.m_in
    }

    /// Solve with new linear data. Equivalent to a hot start when `warm` is
    /// the solution of a previous call on this solver.
    pub fn solve(
        &self,
        g: &DVector<f64>,
        b_eq: &DVector<f64>,
        b_in: &DVector<f64>,
        warm: Option<&QpSolution>,
    ) -> Result<QpSolution, QpError> {
        if g.len() != self.n || b_eq.len() != self.m_eq || b_in.len() != self.m_in {
            return Err(QpError::Dimension(format!(
                "g/b_eq/b_in have lengths {}/{}/{}, expected {}/{}/{}",
                g.len(),
                b_eq.len(),
                b_in.len(),
                self.n,
                self.m_eq,
                self.m_in
            )));
        }
        let m = self.m_eq + self.m_in;
        let mut b = DVector::zeros(m);
        b.rows_mut(0, self.m_eq).copy_from(b_eq);
        b.rows_mut(self.m_eq, self.m_in).copy_from(b_in);
        let v = self.chol.solve(g);
        let a_v = &self.a * &v;
        let max_changes = 10 * (self.n + m);
        let mut changes = 0usize;

        let mut ws = WorkingSet {
            rows: (0..self.m_eq).collect(),
            lam: vec![0.0; self.m_eq],
        };
        if self.schur(&ws.rows).is_none() {
            return Ok(self.finish(ws, -v, QpStatus::Infeasible, changes));
        }

        if let Some(warm) = warm {
            for &k in &warm.active_set {
                if k >= self.m_in {
                    continue;
                }
                let p = self.m_eq + k;
                let chol = self.schur(&ws.rows);
                if self.independent(&ws.rows, chol.as_ref(), p) {
                    ws.rows.push(p);
                    ws.lam.push(0.0);
                }
            }
        }

        let mut z = match self.exact(&ws.rows, &b, &v, &a_v) {
            Some((z, lam)) => {
                ws.lam = lam;
                z
            }
            None => return Ok(self.finish(ws, -v, QpStatus::Infeasible, changes)),
        };
        // Restore dual feasibility of the warm working set.
        loop {
            let worst = ws
                .rows
                .iter()
                .zip(&ws.lam)
                .enumerate()
                .filter(|(_, (&r, &l))| r >= self.m_eq && l < -self.settings.dual_tol)
                .min_by(|a, b| a.1 .1.total_cmp(b.1 .1).then(a.1 .0.cmp(b.1 .0)))
                .map(|(pos, _)| pos);
            let Some(pos) = worst else { break };
            ws.rows.remove(pos);
            ws.lam.remove(pos);
            changes += 1;
            let (zz, lam) = self
                .exact(&ws.rows, &b, &v, &a_v)
                .expect("subset of an independent working set stays independent");
            z = zz;
            ws.lam = lam;
        }

        let status = 'outer: loop {
            if changes >= max_changes {
                break QpStatus::MaxIter;
            }
            let Some(p) = self.most_violated(&ws.rows, &z, &b) else {
                break QpStatus::Optimal;
            };
            let mut lam_p = 0.0;
            loop {
                if changes >= max_changes {
                    break 'outer QpStatus::MaxIter;
                }
                let chol = self.schur(&ws.rows);
                let gwp = DVector::from_iterator(ws.rows.len(), ws.rows.iter().map(|&r| self.gram[(r, p)]));
                let r = match &chol {
                    Some(c) => -c.solve(&gwp),
                    None => DVector::zeros(0),
                };
                let kappa = self.gram[(p, p)] + gwp.dot(&r);
                let mut dz = -self.hinv_at.column(p).into_owned();
                for (j, &row) in ws.rows.iter().enumerate() {
                    dz.axpy(-r[j], &self.hinv_at.column(row), 1.0);
                }
                let (t_dual, block) = self.dual_ratio(&ws, &r);
                let dependent = kappa <= self.settings.dependence_tol * self.gram[(p, p)].max(f64::MIN_POSITIVE);
                if dependent {
                    let Some(pos) = block else {
                        break 'outer QpStatus::Infeasible;
                    };
                    for (l, rj) in ws.lam.iter_mut().zip(r.iter()) {
                        *l += t_dual * rj;
                    }
                    lam_p += t_dual;
                    ws.rows.remove(pos);
                    ws.lam.remove(pos);
                    changes += 1;
                    continue;
                }
                let s_p = self.a.row(p).dot(&z.transpose()) - b[p];
                let t_full = s_p / kappa;
                if block.is_none() || t_full <= t_dual {
                    ws.rows.push(p);
                    ws.lam.iter_mut().zip(r.iter()).for_each(|(l, rj)| *l += t_full * rj);
                    ws.lam.push(lam_p + t_full);
                    changes += 1;
                    match self.exact(&ws.rows, &b, &v, &a_v) {
                        Some((zz, lam)) => {
                            z = zz;
                            ws.lam = lam;
                        }
                        None => z.axpy(t_full, &dz, 1.0),
                    }
                    break;
                }
                z.axpy(t_dual, &dz, 1.0);
                ws.lam.iter_mut().zip(r.iter()).for_each(|(l, rj)| *l += t_dual * rj);
                lam_p += t_dual;
                let pos = block.expect("checked above");
                ws.rows.remove(pos);
                ws.lam.remove(pos);
                changes += 1;
            }
        };

        // Polish: recompute the working-set optimum with rows in canonical order
        // so that identical data and active sets give bit-identical output.
        let mut order: Vec<usize> = (0..ws.rows.len()).collect();
        order.sort_by_key(|&i| ws.rows[i]);
        let sorted_rows: Vec<usize> = order.iter().map(|&i| ws.rows[i]).collect();
        let sorted_lam: Vec<f64> = order.iter().map(|&i| ws.lam[i]).collect();
        ws = WorkingSet {
            rows: sorted_rows,
            lam: sorted_lam,
        };
        if status == QpStatus::Optimal {
            if let Some((zz, lam)) = self.exact(&ws.rows, &b, &v, &a_v) {
                z = zz;
                ws.lam = lam;
            }
        }
        Ok(self.finish(ws, z, status, changes))
    }

    fn finish(&self, ws: WorkingSet, z: DVector<f64>, status: QpStatus, changes: usize) -> QpSolution {
        let mut lam_eq = DVector::zeros(self.m_eq);
        let mut mu_in = DVector::zeros(self.m_in);
        let mut active_set = Vec::new();
        for (&r, &l) in ws.rows.iter().zip(&ws.lam) {
            if r < self.m_eq {
                lam_eq[r] = l;
            } else {
                mu_in[r - self.m_eq] = l.max(0.0);
                active_set.push(r - self.m_eq);
            }
        }
        active_set.sort_unstable();
        QpSolution {
            z,
            lam_eq,
            mu_in,
            active_set,
            status,
            changes,
        }
    }

    fn schur(&self, rows: &[usize]) -> Option<Cholesky<f64, Dyn>> {
        if rows.is_empty() {
            return Some(Cholesky::new(DMatrix::zeros(0, 0)).expect("empty factorization"));
        }
        let k = rows.len();
        let s = DMatrix::from_fn(k, k, |i, j| self.gram[(rows[i], rows[j])]);
        let chol = Cholesky::new(s)?;
        // Reject numerically singular Schur complements.
        let l = chol.l_dirty();
        let max_diag = (0..k).map(|i| self.gram[(rows[i], rows[i])]).fold(0.0, f64::max);
        let min_piv = (0..k).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        (min_piv > self.settings.dependence_tol * max_diag.max(f64::MIN_POSITIVE)).then_some(chol)
    }

    fn independent(&self, rows: &[usize], chol: Option<&Cholesky<f64, Dyn>>, p: usize) -> bool {
        let Some(chol) = chol else { return false };
        let gwp = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.gram[(r, p)]));
        let kappa = self.gram[(p, p)] - gwp.dot(&chol.solve(&gwp));
        kappa > self.settings.dependence_tol * self.gram[(p, p)].max(f64::MIN_POSITIVE)
    }

    /// Optimum of the problem restricted to the working-set rows as equalities.
    fn exact(
        &self,
        rows: &[usize],
        b: &DVector<f64>,
        v: &DVector<f64>,
        a_v: &DVector<f64>,
    ) -> Option<(DVector<f64>, Vec<f64>)> {
        let chol = self.schur(rows)?;
        let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|&r| -b[r] - a_v[r]));
        let lam = chol.solve(&rhs);
        let mut z = -v.clone();
        for (j, &r) in rows.iter().enumerate() {
            z.axpy(-lam[j], &self.hinv_at.column(r), 1.0);
        }
        Some((z, lam.iter().copied().collect()))
    }

    fn most_violated(&self, rows: &[usize], z: &DVector<f64>, b: &DVector<f64>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for p in self.m_eq..self.m_eq + self.m_in {
            if rows.contains(&p) {
                continue;
            }
            let s = self.a.row(p).dot(&z.transpose()) - b[p];
            if s > self.settings.feas_tol && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((p, s));
            }
        }
        best.map(|(p, _)| p)
    }

    /// Largest dual step keeping inequality multipliers nonnegative, and the
    /// position of the blocking row (smallest row index on ties).
    fn dual_ratio(&self, ws: &WorkingSet, r: &DVector<f64>) -> (f64, Option<usize>) {
        let mut best = (f64::INFINITY, None::<usize>);
        for (pos, (&row, &lam)) in ws.rows.iter().zip(&ws.lam).enumerate() {
            if row < self.m_eq || r[pos] >= -1e-14 {
                continue;
            }
            let t = lam.max(0.0) / -r[pos];
            let better = match best.1 {
                None => true,
                Some(bp) => t < best.0 || (t == best.0 && row < ws.rows[bp]),
            };
            if better {
                best = (t, Some(pos));
            }
        }
        best
    }
}

/// One-shot solve of `qp`, optionally warm-started from a previous active set.
pub fn solve(qp: &DenseQp, warm: Option<&QpSolution>) -> Result<QpSolution, QpError> {
    QpSolver::new(&qp.h, &qp.a_eq, &qp.a_in)?.solve(&qp.g, &qp.b_eq, &qp.b_in, warm)
}

/// Re-solve a factorized problem with new linear data, starting from `warm`.
pub fn hotstart_update(
    solver: &QpSolver,
    new_g: &DVector<f64>,
    new_b_eq: &DVector<f64>,
    new_b_in: &DVector<f64>,
    warm: &QpSolution,
) -> Result<QpSolution, QpError> {
    solver.solve(new_g, new_b_eq, new_b_in, Some(warm))
}

/// Infinity norms of the KKT residuals `(stationarity, primal infeasibility,
/// complementarity)` of a solution.
pub fn kkt_residuals(qp: &DenseQp, sol: &QpSolution) -> (f64, f64, f64) {
    let stat = &qp.h * &sol.z + &qp.g + qp.a_eq.transpose() * &sol.lam_eq + qp.a_in.transpose() * &sol.mu_in;
    let eq = &qp.a_eq * &sol.z - &qp.b_eq;
    let ineq = &qp.a_in * &sol.z - &qp.b_in;
    let infeas = eq
        .iter()
        .map(|v| v.abs())
        .chain(ineq.iter().map(|v| v.max(0.0)))
        .fold(0.0, f64::max);
    let comp = ineq
        .iter()
        .zip(sol.mu_in.iter())
        .map(|(s, m)| (s * m).abs())
        .fold(0.0, f64::max);
    (stat.amax(), infeas, comp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(h: f64, g: f64) -> DenseQp {
        DenseQp::unconstrained(DMatrix::from_element(1, 1, h), DVector::from_element(1, g))
    }

    #[test]
    fn unconstrained_minimum() {
        let sol = solve(&scalar(1.0, -1.0), None).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.z[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn single_active_bound() {
        let mut qp = scalar(1.0, -1.0);
        qp.a_in = DMatrix::from_element(1, 1, 1.0);
        qp.b_in = DVector::from_element(1, 0.5);
        let sol = solve(&qp, None).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.z[0] - 0.5).abs() < 1e-14);
        assert!((sol.mu_in[0] - 0.5).abs() < 1e-14);
        assert_eq!(sol.active_set, vec![0]);
    }

    #[test]
    fn inconsistent_bounds_are_infeasible() {
        let mut qp = scalar(1.0, 0.0);
        qp.a_in = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        qp.b_in = DVector::from_row_slice(&[-1.0, -1.0]);
        let sol = solve(&qp, None).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn dependent_equalities_are_infeasible() {
        let mut qp = DenseQp::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        qp.a_eq = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        qp.b_eq = DVector::from_row_slice(&[1.0, 3.0]);
        assert_eq!(solve(&qp, None).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn indefinite_hessian_rejected() {
        let qp = scalar(-1.0, 0.0);
        assert_eq!(solve(&qp, None).unwrap_err(), QpError::NotConvex);
    }

    #[test]
    fn hotstart_fixed_point_has_no_changes() {
        let mut qp = DenseQp::unconstrained(DMatrix::identity(2, 2), DVector::from_row_slice(&[-2.0, -2.0]));
        qp.a_in = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        qp.b_in = DVector::from_row_slice(&[0.5, 0.5]);
        let solver = QpSolver::new(&qp.h, &qp.a_eq, &qp.a_in).unwrap();
        let cold = solver.solve(&qp.g, &qp.b_eq, &qp.b_in, None).unwrap();
        assert_eq!(cold.changes, 2);
        let hot = hotstart_update(&solver, &qp.g, &qp.b_eq, &qp.b_in, &cold).unwrap();
        assert_eq!(hot.changes, 0);
        assert_eq!(hot.z, cold.z);
        assert_eq!(hot.mu_in, cold.mu_in);
    }

    #[test]
    fn degenerate_duplicate_rows() {
        // Two identical rows active at the solution.
        let mut qp = DenseQp::unconstrained(DMatrix::identity(2, 2), DVector::from_row_slice(&[-1.0, -1.0]));
        qp.a_in = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, -1.0, 0.0]);
        qp.b_in = DVector::from_row_slice(&[1.0, 1.0, 0.0]);
        let sol = solve(&qp, None).unwrap();
        assert!(sol.is_optimal());
        let (stat, infeas, comp) = kkt_residuals(&qp, &sol);
        assert!(stat < 1e-12 && infeas < 1e-12 && comp < 1e-12);
        assert!((sol.z[0] - 0.5).abs() < 1e-12 && (sol.z[1] - 0.5).abs() < 1e-12);
    }
}
