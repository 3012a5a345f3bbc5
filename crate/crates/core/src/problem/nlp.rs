use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::{ConsensusMatrix, CouplingGraph, Ocp, ProblemError, INPUT_DIM, STATE_DIM};
use crate::linalg::{matrix_abs, symmetrize};

/// Offsets of the blocks of one subsystem vector
/// `z_i = (x⁰..x^N, u⁰..u^{N-1}, w_{j₁}⁰..w_{j₁}^N, w_{j₂}⁰.., s)`.
/// Copy trajectories are contiguous per in-neighbor, ordered by neighbor id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub horizon: usize,
    pub copies: Vec<usize>,
    pub slack: bool,
}

impl Layout {
    pub fn x(&self, k: usize) -> usize {
        STATE_DIM * k
    }

    pub fn u(&self, k: usize) -> usize {
        self.traj_len() + INPUT_DIM * k
    }

    pub fn w(&self, copy: usize, k: usize) -> usize {
        self.copy_start(copy) + STATE_DIM * k
    }

    pub fn copy_start(&self, copy: usize) -> usize {
        self.traj_len() + INPUT_DIM * self.horizon + copy * self.traj_len()
    }

    /// Length of one state trajectory, `(N+1)·n_x`.
    pub fn traj_len(&self) -> usize {
        STATE_DIM * (self.horizon + 1)
    }

    pub fn slack_index(&self) -> Option<usize> {
        self.slack.then(|| self.copy_start(self.copies.len()))
    }

    pub fn dim(&self) -> usize {
        self.copy_start(self.copies.len()) + usize::from(self.slack)
    }

    pub fn copy_of(&self, owner: usize) -> Option<usize> {
        self.copies.iter().position(|&j| j == owner)
    }
}

/// One `d − ‖x^k − w^k‖² − s ≤ 0` row (`s` omitted for hard rows).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceRow {
    pub copy: usize,
    pub stage: usize,
    pub bound: f64,
    pub soft: bool,
}

/// Values and Jacobians of `g_i(z_i) = 0` and `h_i(z_i) ≤ 0`.
#[derive(Debug, Clone)]
pub struct ConstraintEval {
    pub g_val: DVector<f64>,
    pub g_jac: DMatrix<f64>,
    pub h_val: DVector<f64>,
    pub h_jac: DMatrix<f64>,
}

/// Local problem of one robot: objective `½ zᵀHz + gᵀz`, affine equalities,
/// affine inequalities followed by distance rows.
#[derive(Debug, Clone)]
pub struct Subsystem {
    pub id: usize,
    pub layout: Layout,
    pub hessian: DMatrix<f64>,
    /// Point where the objective is minimal when unconstrained, so that
    /// `gradient = −H·reference`.
    pub reference: DVector<f64>,
    pub gradient: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_lin: DMatrix<f64>,
    pub b_lin: DVector<f64>,
    pub distance_rows: Vec<DistanceRow>,
}

impl Subsystem {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn n_in(&self) -> usize {
        self.b_lin.len() + self.distance_rows.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z)
    }

    pub fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.hessian * z + &self.gradient
    }

    pub fn is_linear(&self) -> bool {
        self.distance_rows.is_empty()
    }

    pub fn eval_constraints(&self, z: &DVector<f64>) -> ConstraintEval {
        let g_val = &self.a_eq * z - &self.b_eq;
        let n_lin = self.b_lin.len();
        let n = self.dim();
        let mut h_val = DVector::zeros(self.n_in());
        let mut h_jac = DMatrix::zeros(self.n_in(), n);
        h_val.rows_mut(0, n_lin).copy_from(&(&self.a_lin * z - &self.b_lin));
        h_jac.rows_mut(0, n_lin).copy_from(&self.a_lin);
        let slack = self.layout.slack_index();
        for (r, row) in self.distance_rows.iter().enumerate() {
            let p = n_lin + r;
            let xi = self.layout.x(row.stage);
            let wi = self.layout.w(row.copy, row.stage);
            let mut sq = 0.0;
            for a in 0..STATE_DIM {
                let diff = z[xi + a] - z[wi + a];
                sq += diff * diff;
                h_jac[(p, xi + a)] = -2.0 * diff;
                h_jac[(p, wi + a)] = 2.0 * diff;
            }
            h_val[p] = row.bound - sq;
            if row.soft {
                let s = slack.expect("soft rows imply a slack variable");
                h_val[p] -= z[s];
                h_jac[(p, s)] = -1.0;
            }
        }
        ConstraintEval {
            g_val,
            g_jac: self.a_eq.clone(),
            h_val,
            h_jac,
        }
    }

    /// `Σ_p μ_p ∇²h_p`; only distance rows have curvature.
    pub fn weighted_constraint_hessian(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let n_lin = self.b_lin.len();
        let mut out = DMatrix::zeros(n, n);
        for (r, row) in self.distance_rows.iter().enumerate() {
            let m = mu[n_lin + r];
            if m == 0.0 {
                continue;
            }
            let xi = self.layout.x(row.stage);
            let wi = self.layout.w(row.copy, row.stage);
            for a in 0..STATE_DIM {
                out[(xi + a, xi + a)] -= 2.0 * m;
                out[(wi + a, wi + a)] -= 2.0 * m;
                out[(xi + a, wi + a)] += 2.0 * m;
                out[(wi + a, xi + a)] += 2.0 * m;
            }
        }
        out
    }

    /// Lagrangian Hessian `∇²f + Σ μ_p ∇²h_p`.
    pub fn lagrangian_hessian(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        &self.hessian + self.weighted_constraint_hessian(mu)
    }

    /// Local vector with every state block (own and copies) set to the given
    /// per-robot positions, inputs set to `input`, slack zero.
    pub fn constant_point(&self, positions: &[Vector2<f64>], input: &Vector2<f64>) -> DVector<f64> {
        let l = &self.layout;
        let mut z = DVector::zeros(l.dim());
        for k in 0..=l.horizon {
            z.fixed_rows_mut::<2>(l.x(k)).copy_from(&positions[self.id]);
            for (c, &j) in l.copies.iter().enumerate() {
                z.fixed_rows_mut::<2>(l.w(c, k)).copy_from(&positions[j]);
            }
        }
        for k in 0..l.horizon {
            z.fixed_rows_mut::<2>(l.u(k)).copy_from(input);
        }
        z
    }

    /// Smallest positive slack satisfying every soft row at `z` (the slack
    /// entry of `z` itself is ignored).
    pub fn feasible_slack(&self, z: &DVector<f64>) -> f64 {
        let mut zz = z.clone();
        if let Some(s) = self.layout.slack_index() {
            zz[s] = 0.0;
        }
        let h = self.eval_constraints(&zz).h_val;
        let n_lin = self.b_lin.len();
        self.distance_rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.soft)
            .map(|(r, _)| h[n_lin + r])
            .fold(0.0, f64::max)
    }

    pub fn own_trajectory<'a>(&self, z: &'a DVector<f64>) -> nalgebra::DVectorView<'a, f64> {
        z.rows(0, self.layout.traj_len())
    }

    pub fn applied_input(&self, z: &DVector<f64>) -> Vector2<f64> {
        let k = if self.layout.horizon >= 2 { 1 } else { 0 };
        Vector2::new(z[self.layout.u(k)], z[self.layout.u(k) + 1])
    }
}

/// The partially separable NLP `min Σ f_i(z_i)` s.t. local equalities and
/// inequalities and the coupling `Σ E_i z_i = 0`.
#[derive(Debug, Clone)]
pub struct PartialNlp {
    pub subsystems: Vec<Subsystem>,
    pub graph: CouplingGraph,
    pub consensus: ConsensusMatrix,
    pub horizon: usize,
}

impl PartialNlp {
    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(Subsystem::dim).collect()
    }

    /// Replace the measured state, committed input and setpoints. Structure
    /// (Hessians and constraint matrices) is untouched.
    pub fn patch(&mut self, x_now: &[Vector2<f64>], u_now: &[Vector2<f64>], setpoints: &[Vector2<f64>], input_setpoints: &[Vector2<f64>]) {
        for sub in &mut self.subsystems {
            let n = sub.layout.horizon;
            let i = sub.id;
            sub.b_eq.fixed_rows_mut::<2>(2 * n).copy_from(&x_now[i]);
            sub.b_eq.fixed_rows_mut::<2>(2 * n + 2).copy_from(&u_now[i]);
            let l = &sub.layout;
            let mut r = DVector::zeros(l.dim());
            for k in 0..=n {
                r.fixed_rows_mut::<2>(l.x(k)).copy_from(&setpoints[i]);
                for (c, &j) in l.copies.iter().enumerate() {
                    r.fixed_rows_mut::<2>(l.w(c, k)).copy_from(&setpoints[j]);
                }
            }
            for k in 0..n {
                r.fixed_rows_mut::<2>(l.u(k)).copy_from(&input_setpoints[i]);
            }
            sub.gradient = -(&sub.hessian * &r);
            sub.reference = r;
        }
    }

    pub fn objective(&self, zs: &[DVector<f64>]) -> f64 {
        self.subsystems.iter().zip(zs).map(|(s, z)| s.objective(z)).sum()
    }
}

/// Reformulate the OCP at measured state `x_now` and committed input `u_now`.
///
/// Each robot's local objective is its share of the centralized cost with
/// one adjustment: for every copy of neighbor `j` it carries
/// `½(w − x̄_j)ᵀ T (w − x̄_j)` with `T = ½|Q_ij|`, and robot `j` subtracts the
/// same term in its own state. The sum over robots is unchanged whenever the
/// copies agree with their originals, while each local Hessian stays PSD for
/// diagonally dominant weights.
pub fn build_partial_nlp(
    ocp: &Ocp,
    graph: &CouplingGraph,
    x_now: &[Vector2<f64>],
    u_now: &[Vector2<f64>],
) -> Result<PartialNlp, ProblemError> {
    ocp.validate()?;
    let n_rob = ocp.robots();
    if graph.len() != n_rob || x_now.len() != n_rob || u_now.len() != n_rob {
        return Err(ProblemError::RobotCount {
            what: "graph or initial condition",
            expected: n_rob,
            got: graph.len().min(x_now.len()).min(u_now.len()),
        });
    }
    let horizon = ocp.horizon;
    let mut subsystems = Vec::with_capacity(n_rob);
    for i in 0..n_rob {
        let cons = &ocp.constraints[i];
        let layout = Layout {
            horizon,
            copies: graph.in_neighbors[i].clone(),
            slack: cons.has_soft(),
        };
        let hessian = local_hessian(ocp, graph, i, &layout);
        let (a_eq, b_eq) = equalities(ocp, i, &layout);
        let (a_lin, b_lin) = linear_inequalities(ocp, i, &layout);
        let mut distance_rows = Vec::new();
        for pair in &cons.pairs {
            let copy = layout.copy_of(pair.neighbor).ok_or(ProblemError::UnknownRobot {
                robot: i,
                other: pair.neighbor,
            })?;
            for stage in 0..=horizon {
                distance_rows.push(DistanceRow {
                    copy,
                    stage,
                    bound: ocp.distance_bound(pair.min_distance),
                    soft: pair.soft,
                });
            }
        }
        let dim = layout.dim();
        subsystems.push(Subsystem {
            id: i,
            layout,
            hessian,
            reference: DVector::zeros(dim),
            gradient: DVector::zeros(dim),
            a_eq,
            b_eq,
            a_lin,
            b_lin,
            distance_rows,
        });
    }
    let layouts: Vec<Layout> = subsystems.iter().map(|s| s.layout.clone()).collect();
    let consensus = ConsensusMatrix::assemble(graph, &layouts);
    let mut nlp = PartialNlp {
        subsystems,
        graph: graph.clone(),
        consensus,
        horizon,
    };
    let setpoints: Vec<Vector2<f64>> = ocp.costs.iter().map(|c| c.setpoint).collect();
    let input_setpoints: Vec<Vector2<f64>> = ocp.costs.iter().map(|c| c.input_setpoint).collect();
    nlp.patch(x_now, u_now, &setpoints, &input_setpoints);
    Ok(nlp)
}

fn to_dyn(m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 2, m.as_slice())
}

fn stage_weights(ocp: &Ocp, i: usize, terminal: bool) -> (&Matrix2<f64>, &std::collections::BTreeMap<usize, Matrix2<f64>>) {
    let c = &ocp.costs[i];
    if terminal {
        (&c.p_ii, &c.p_ij)
    } else {
        (&c.q_ii, &c.q_ij)
    }
}

fn local_hessian(ocp: &Ocp, graph: &CouplingGraph, i: usize, layout: &Layout) -> DMatrix<f64> {
    let n = layout.horizon;
    let mut h = DMatrix::zeros(layout.dim(), layout.dim());
    for k in 0..=n {
        let terminal = k == n;
        let (own, cross) = stage_weights(ocp, i, terminal);
        let mut xx = symmetrize(&to_dyn(own));
        for &j in &graph.out_neighbors[i] {
            if let Some(m) = stage_weights(ocp, j, terminal).1.get(&i) {
                xx -= matrix_abs(&to_dyn(m)) * 0.5;
            }
        }
        let xo = layout.x(k);
        h.view_mut((xo, xo), (2, 2)).copy_from(&xx);
        for (c, j) in layout.copies.iter().enumerate() {
            let Some(m) = cross.get(j) else { continue };
            let m = to_dyn(m);
            let wo = layout.w(c, k);
            h.view_mut((xo, wo), (2, 2)).copy_from(&(&m * 0.5));
            h.view_mut((wo, xo), (2, 2)).copy_from(&(m.transpose() * 0.5));
            h.view_mut((wo, wo), (2, 2)).copy_from(&(matrix_abs(&m) * 0.5));
        }
    }
    let r = symmetrize(&to_dyn(&ocp.costs[i].r_ii));
    for k in 0..n {
        let uo = layout.u(k);
        h.view_mut((uo, uo), (2, 2)).copy_from(&r);
    }
    if let Some(s) = layout.slack_index() {
        h[(s, s)] = 2.0 * ocp.slack_penalty;
    }
    symmetrize(&h)
}

/// Dynamics rows `x^{k+1} − x^k − dt·u^k = 0`, then `x⁰ = x_now`, `u⁰ = u_now`.
/// The right-hand side of the initial-condition rows is filled by `patch`.
fn equalities(ocp: &Ocp, i: usize, layout: &Layout) -> (DMatrix<f64>, DVector<f64>) {
    let n = layout.horizon;
    let dt = ocp.models[i].dt;
    let rows = STATE_DIM * n + STATE_DIM + INPUT_DIM;
    let mut a = DMatrix::zeros(rows, layout.dim());
    for k in 0..n {
        for d in 0..STATE_DIM {
            let r = STATE_DIM * k + d;
            a[(r, layout.x(k + 1) + d)] = 1.0;
            a[(r, layout.x(k) + d)] = -1.0;
            a[(r, layout.u(k) + d)] = -dt;
        }
    }
    for d in 0..STATE_DIM {
        a[(STATE_DIM * n + d, layout.x(0) + d)] = 1.0;
        a[(STATE_DIM * n + STATE_DIM + d, layout.u(0) + d)] = 1.0;
    }
    (a, DVector::zeros(rows))
}

/// Input bounds for stages `1..N−1` (stage 0 is fixed by an equality) and the
/// optional state box for stages `1..N`. Per stage: upper rows, then lower rows.
fn linear_inequalities(ocp: &Ocp, i: usize, layout: &Layout) -> (DMatrix<f64>, DVector<f64>) {
    let cons = &ocp.constraints[i];
    let n = layout.horizon;
    let mut entries: Vec<(usize, f64, f64)> = Vec::new();
    for k in 1..n {
        push_box(&mut entries, layout.u(k), &cons.input_lower, &cons.input_upper);
    }
    if let Some((lo, hi)) = &cons.state_box {
        for k in 1..=n {
            push_box(&mut entries, layout.x(k), lo, hi);
        }
    }
    let mut a = DMatrix::zeros(entries.len(), layout.dim());
    let mut b = DVector::zeros(entries.len());
    for (r, &(col, sign, rhs)) in entries.iter().enumerate() {
        a[(r, col)] = sign;
        b[r] = rhs;
    }
    (a, b)
}

fn push_box(entries: &mut Vec<(usize, f64, f64)>, offset: usize, lo: &Vector2<f64>, hi: &Vector2<f64>) {
    for d in 0..2 {
        entries.push((offset + d, 1.0, hi[d]));
    }
    for d in 0..2 {
        entries.push((offset + d, -1.0, -lo[d]));
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ConstraintSet, PairConstraint, RobotModel, StageCost, DEFAULT_SLACK_PENALTY};
    use super::*;

    fn single(n: usize) -> Ocp {
        Ocp {
            models: vec![RobotModel::new(0.2).unwrap()],
            costs: vec![StageCost::diagonal(1.0, 1.0)],
            constraints: vec![ConstraintSet::input_box(1.0)],
            horizon: n,
            slack_penalty: DEFAULT_SLACK_PENALTY,
            literal_units: false,
        }
    }

    #[test]
    fn smallest_instance() {
        let ocp = single(1);
        let g = ocp.graph().unwrap();
        let nlp = build_partial_nlp(&ocp, &g, &[Vector2::new(1.0, 2.0)], &[Vector2::new(0.1, 0.0)]).unwrap();
        let s = &nlp.subsystems[0];
        assert_eq!(s.dim(), 6);
        assert_eq!(s.n_eq(), 6);
        assert_eq!(s.n_in(), 0);
        assert_eq!(nlp.consensus.n_rows(), 0);
        let z = DVector::from_row_slice(&[1.0, 2.0, 1.02, 2.0, 0.1, 0.0]);
        assert!(s.eval_constraints(&z).g_val.amax() < 1e-15);
    }

    #[test]
    fn distance_row_value_and_gradient() {
        let mut ocp = single(1);
        ocp.models.push(ocp.models[0]);
        ocp.costs.push(ocp.costs[0].clone());
        let mut c2 = ocp.constraints[0].clone();
        c2.pairs.push(PairConstraint {
            neighbor: 0,
            min_distance: 0.4,
            soft: true,
        });
        ocp.constraints.push(c2);
        let g = ocp.graph().unwrap();
        let nlp = build_partial_nlp(&ocp, &g, &[Vector2::zeros(); 2], &[Vector2::zeros(); 2]).unwrap();
        let s = &nlp.subsystems[1];
        assert_eq!(s.distance_rows.len(), 2);
        let mut z = DVector::zeros(s.dim());
        z[s.layout.x(0)] = 1.0;
        let e = s.eval_constraints(&z);
        assert!((e.h_val[0] - (0.16 - 1.0)).abs() < 1e-15);
        assert_eq!(e.h_jac[(0, s.layout.x(0))], -2.0);
        assert_eq!(e.h_jac[(0, s.layout.w(0, 0))], 2.0);
        assert_eq!(e.h_jac[(0, s.layout.slack_index().unwrap())], -1.0);
    }
}
