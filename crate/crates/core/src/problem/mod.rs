//! Optimal control problem data, its coupling graph, and the reformulation
//! as a partially separable NLP with neighbor copies.

mod consensus;
mod nlp;

pub use consensus::ConsensusMatrix;
pub use nlp::{build_partial_nlp, ConstraintEval, DistanceRow, Layout, PartialNlp, Subsystem};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix2, Vector2};
use thiserror::Error;

use crate::linalg;

pub const STATE_DIM: usize = 2;
pub const INPUT_DIM: usize = 2;

/// Default weight of the quadratic slack penalty.
pub const DEFAULT_SLACK_PENALTY: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("expected {expected} robots, got {got} in {what}")]
    RobotCount { what: &'static str, expected: usize, got: usize },
    #[error("robot {robot} references unknown robot {other}")]
    UnknownRobot { robot: usize, other: usize },
    #[error("robot {0} references itself as a neighbor")]
    SelfReference(usize),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Single-integrator robot `x⁺ = x + dt·u` in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotModel {
    pub dt: f64,
}

impl RobotModel {
    pub fn new(dt: f64) -> Result<Self, ProblemError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ProblemError::Invalid(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { dt })
    }

    pub fn step(&self, x: &Vector2<f64>, u: &Vector2<f64>) -> Vector2<f64> {
        x + u * self.dt
    }
}

/// Weights of one robot's stage cost and terminal penalty.
///
/// Cross blocks are keyed by the other robot's index; the stage cost is
/// `½ Σ_j (x_i − x̄_i)ᵀ Q_ij (x_j − x̄_j) + ½ (u_i − ū_i)ᵀ R_ii (u_i − ū_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub q_ii: Matrix2<f64>,
    pub q_ij: BTreeMap<usize, Matrix2<f64>>,
    pub r_ii: Matrix2<f64>,
    pub p_ii: Matrix2<f64>,
    pub p_ij: BTreeMap<usize, Matrix2<f64>>,
    pub setpoint: Vector2<f64>,
    pub input_setpoint: Vector2<f64>,
}

impl StageCost {
    /// Decoupled cost with `P = Q`.
    pub fn diagonal(q: f64, r: f64) -> Self {
        Self {
            q_ii: Matrix2::identity() * q,
            q_ij: BTreeMap::new(),
            r_ii: Matrix2::identity() * r,
            p_ii: Matrix2::identity() * q,
            p_ij: BTreeMap::new(),
            setpoint: Vector2::zeros(),
            input_setpoint: Vector2::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConstraint {
    pub neighbor: usize,
    pub min_distance: f64,
    pub soft: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub input_lower: Vector2<f64>,
    pub input_upper: Vector2<f64>,
    pub state_box: Option<(Vector2<f64>, Vector2<f64>)>,
    pub pairs: Vec<PairConstraint>,
}

impl ConstraintSet {
    pub fn input_box(bound: f64) -> Self {
        Self {
            input_lower: Vector2::repeat(-bound),
            input_upper: Vector2::repeat(bound),
            state_box: None,
            pairs: Vec::new(),
        }
    }

    pub fn has_soft(&self) -> bool {
        self.pairs.iter().any(|p| p.soft)
    }
}

/// In- and out-neighbor sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingGraph {
    pub in_neighbors: Vec<Vec<usize>>,
    pub out_neighbors: Vec<Vec<usize>>,
}

impl CouplingGraph {
    pub fn len(&self) -> usize {
        self.in_neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_neighbors.is_empty()
    }

    /// Symmetric closure `N_i = N_i^in ∪ N_i^out`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self.in_neighbors[i].iter().chain(&self.out_neighbors[i]).copied().collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    /// True when `j ∈ out(i) ⇔ i ∈ in(j)` holds for all pairs.
    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| {
            (0..n).all(|j| self.out_neighbors[i].contains(&j) == self.in_neighbors[j].contains(&i))
        })
    }
}

/// Derive neighbor sets from nonzero cross weights and pair constraints.
pub fn build_coupling_graph(costs: &[StageCost], constraints: &[ConstraintSet]) -> Result<CouplingGraph, ProblemError> {
    let n = costs.len();
    if constraints.len() != n {
        return Err(ProblemError::RobotCount {
            what: "constraint sets",
            expected: n,
            got: constraints.len(),
        });
    }
    let mut in_neighbors = vec![Vec::new(); n];
    for i in 0..n {
        let mut set = std::collections::BTreeSet::new();
        let cost = &costs[i];
        for (&j, m) in cost.q_ij.iter().chain(cost.p_ij.iter()) {
            check_index(i, j, n)?;
            if m.iter().any(|&v| v != 0.0) {
                set.insert(j);
            }
        }
        for pair in &constraints[i].pairs {
            check_index(i, pair.neighbor, n)?;
            set.insert(pair.neighbor);
        }
        in_neighbors[i] = set.into_iter().collect();
    }
    let mut out_neighbors = vec![Vec::new(); n];
    for (i, ins) in in_neighbors.iter().enumerate() {
        for &j in ins {
            out_neighbors[j].push(i);
        }
    }
    Ok(CouplingGraph {
        in_neighbors,
        out_neighbors,
    })
}

fn check_index(i: usize, j: usize, n: usize) -> Result<(), ProblemError> {
    if j >= n {
        return Err(ProblemError::UnknownRobot { robot: i, other: j });
    }
    if j == i {
        return Err(ProblemError::SelfReference(i));
    }
    Ok(())
}

/// Complete optimal control problem shared by all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Ocp {
    pub models: Vec<RobotModel>,
    pub costs: Vec<StageCost>,
    pub constraints: Vec<ConstraintSet>,
    pub horizon: usize,
    pub slack_penalty: f64,
    /// Use `‖x_i − x_j‖² ≥ d` instead of `‖x_i − x_j‖² ≥ d²`.
    pub literal_units: bool,
}

impl Ocp {
    pub fn robots(&self) -> usize {
        self.models.len()
    }

    pub fn has_pairs(&self) -> bool {
        self.constraints.iter().any(|c| !c.pairs.is_empty())
    }

    pub fn graph(&self) -> Result<CouplingGraph, ProblemError> {
        build_coupling_graph(&self.costs, &self.constraints)
    }

    /// Right-hand side of the distance constraint for minimum distance `d`.
    pub fn distance_bound(&self, d: f64) -> f64 {
        if self.literal_units {
            d
        } else {
            d * d
        }
    }

    /// Centralized block matrix `[Q_ij]`.
    pub fn assembled_q(&self) -> DMatrix<f64> {
        assemble(self.costs.iter().map(|c| (&c.q_ii, &c.q_ij)))
    }

    /// Centralized block matrix `[P_ij]`.
    pub fn assembled_p(&self) -> DMatrix<f64> {
        assemble(self.costs.iter().map(|c| (&c.p_ii, &c.p_ij)))
    }

    /// Centralized `blockdiag(R_ii)`.
    pub fn assembled_r(&self) -> DMatrix<f64> {
        let empty = BTreeMap::new();
        assemble(self.costs.iter().map(|c| (&c.r_ii, &empty)))
    }

    /// Positive-definiteness checks of the assembled weights. The error
    /// names the first offending diagonal block when one exists.
    pub fn check_weights(&self) -> Result<(), ProblemError> {
        let n = self.robots();
        for (name, m) in [("Q", self.assembled_q()), ("R", self.assembled_r()), ("P", self.assembled_p())] {
            if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return Err(ProblemError::NotPositiveDefinite(format!("{name} (not symmetric)")));
            }
            if linalg::min_eigenvalue(&m) > 0.0 {
                continue;
            }
            for i in 0..n {
                let block = m.view((2 * i, 2 * i), (2, 2)).into_owned();
                if linalg::min_eigenvalue(&block) <= 0.0 {
                    return Err(ProblemError::NotPositiveDefinite(format!("{name}_{}{}", i + 1, i + 1)));
                }
            }
            return Err(ProblemError::NotPositiveDefinite(name.to_string()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let n = self.robots();
        for (what, got) in [("costs", self.costs.len()), ("constraint sets", self.constraints.len())] {
            if got != n {
                return Err(ProblemError::RobotCount { what, expected: n, got });
            }
        }
        if self.horizon == 0 {
            return Err(ProblemError::Invalid("horizon must be at least 1".into()));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if (0..2).any(|a| c.input_lower[a] > c.input_upper[a]) {
                return Err(ProblemError::Invalid(format!("robot {}: input lower bound above upper bound", i + 1)));
            }
            if let Some((lo, hi)) = &c.state_box {
                if (0..2).any(|a| lo[a] > hi[a]) {
                    return Err(ProblemError::Invalid(format!("robot {}: state lower bound above upper bound", i + 1)));
                }
            }
            if c.has_soft() && !(self.slack_penalty > 0.0) {
                return Err(ProblemError::Invalid("slack penalty must be positive".into()));
            }
            for p in &c.pairs {
                if !(p.min_distance >= 0.0) {
                    return Err(ProblemError::Invalid(format!("robot {}: negative minimum distance", i + 1)));
                }
            }
        }
        self.graph()?;
        self.check_weights()
    }
}

fn assemble<'a>(blocks: impl Iterator<Item = (&'a Matrix2<f64>, &'a BTreeMap<usize, Matrix2<f64>>)>) -> DMatrix<f64> {
    let blocks: Vec<_> = blocks.collect();
    let n = blocks.len();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for (i, (diag, off)) in blocks.iter().enumerate() {
        m.view_mut((2 * i, 2 * i), (2, 2)).copy_from(*diag);
        for (&j, b) in off.iter() {
            if j < n {
                m.view_mut((2 * i, 2 * j), (2, 2)).copy_from(b);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_costs(n: usize) -> Vec<StageCost> {
        (0..n)
            .map(|i| {
                let mut c = StageCost::diagonal(if i + 1 == n { 10.0 } else { 20.0 }, 1.0);
                for j in [i.wrapping_sub(1), i + 1] {
                    if j < n {
                        c.q_ij.insert(j, Matrix2::identity() * -10.0);
                        c.p_ij.insert(j, Matrix2::identity() * -10.0);
                    }
                }
                c
            })
            .collect()
    }

    #[test]
    fn chain_graph() {
        let g = build_coupling_graph(&chain_costs(4), &vec![ConstraintSet::input_box(0.2); 4]).unwrap();
        assert_eq!(g.in_neighbors, vec![vec![1], vec![0, 2], vec![1, 3], vec![2]]);
        assert_eq!(g.out_neighbors, g.in_neighbors);
        assert!(g.is_consistent());
    }

    #[test]
    fn decoupled_graph_is_empty() {
        let costs = vec![StageCost::diagonal(1.0, 1.0); 3];
        let g = build_coupling_graph(&costs, &vec![ConstraintSet::input_box(1.0); 3]).unwrap();
        assert!(g.in_neighbors.iter().all(Vec::is_empty));
        assert!(g.out_neighbors.iter().all(Vec::is_empty));
    }

    #[test]
    fn pair_constraint_only() {
        let costs = vec![StageCost::diagonal(1.0, 1.0); 2];
        let mut cons = vec![ConstraintSet::input_box(1.0); 2];
        cons[1].pairs.push(PairConstraint {
            neighbor: 0,
            min_distance: 0.4,
            soft: true,
        });
        let g = build_coupling_graph(&costs, &cons).unwrap();
        assert_eq!(g.in_neighbors, vec![vec![], vec![0]]);
        assert_eq!(g.out_neighbors, vec![vec![1], vec![]]);
        assert_eq!(g.neighbors(0), vec![1]);
    }

    #[test]
    fn unknown_neighbor_rejected() {
        let mut costs = vec![StageCost::diagonal(1.0, 1.0); 2];
        costs[0].q_ij.insert(5, Matrix2::identity());
        let err = build_coupling_graph(&costs, &vec![ConstraintSet::input_box(1.0); 2]).unwrap_err();
        assert_eq!(err, ProblemError::UnknownRobot { robot: 0, other: 5 });
    }

    #[test]
    fn weight_check_names_block() {
        let mut costs = chain_costs(4);
        let ocp = |costs: Vec<StageCost>| Ocp {
            models: vec![RobotModel::new(0.2).unwrap(); 4],
            costs,
            constraints: vec![ConstraintSet::input_box(0.2); 4],
            horizon: 7,
            slack_penalty: DEFAULT_SLACK_PENALTY,
            literal_units: false,
        };
        assert!(ocp(costs.clone()).validate().is_ok());
        costs[3].q_ii = Matrix2::identity() * -1.0;
        assert_eq!(
            ocp(costs).check_weights().unwrap_err(),
            ProblemError::NotPositiveDefinite("Q_44".into())
        );
    }
}
