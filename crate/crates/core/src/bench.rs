//! Seeded problem generators and solver suites: random convex QPs for ADMM
//! optimality and ADMM/dSQP equivalence, and a two-robot QCQP for local
//! convergence of dSQP near a regular KKT point.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::admm::{AdmmConfig, AdmmSolver, SolverError};
use crate::dsqp::kkt::{central_sqp_step, solve_central_sqp, CentralSqpOptions, KktPoint};
use crate::dsqp::{DsqpConfig, DsqpSolver, EtaSchedule, HessianKind, Stopping};
use crate::exec::Execution;
use crate::messaging::InProcHub;
use crate::problem::{
    build_partial_nlp, ConstraintSet, Ocp, PairConstraint, PartialNlp, ProblemError, RobotModel, StageCost,
    DEFAULT_SLACK_PENALTY,
};
use crate::qp::QpError;
use crate::sim::{CentralizedOcp, OracleStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphShape {
    Chain,
    Star,
}

impl GraphShape {
    pub fn edges(self, robots: usize) -> Vec<(usize, usize)> {
        match self {
            GraphShape::Chain => (1..robots).map(|i| (i - 1, i)).collect(),
            GraphShape::Star => (1..robots).map(|i| (0, i)).collect(),
        }
    }
}

/// One OCP together with the measured state it is solved at.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub shape: GraphShape,
    pub ocp: Ocp,
    pub x_now: Vec<Vector2<f64>>,
    pub u_now: Vec<Vector2<f64>>,
}

impl Instance {
    pub fn nlp(&self) -> Result<PartialNlp, ProblemError> {
        build_partial_nlp(&self.ocp, &self.ocp.graph()?, &self.x_now, &self.u_now)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, scale: f64) -> Matrix2<f64> {
    Matrix2::from_fn(|_, _| rng.random_range(-scale..scale))
}

fn random_point(rng: &mut ChaCha8Rng, half: f64) -> Vector2<f64> {
    Vector2::new(rng.random_range(-half..half), rng.random_range(-half..half))
}

/// Random convex instance: 2 to 5 robots on a chain or star, random cross
/// weights, diagonal blocks dominant enough to keep every local Hessian
/// positive semidefinite, asymmetric input boxes and (for half of the
/// instances) a state box.
pub fn random_convex_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let robots = rng.random_range(2..=5);
    let shape = if rng.random_bool(0.5) { GraphShape::Chain } else { GraphShape::Star };
    let horizon = rng.random_range(2..=5);
    let dt = rng.random_range(0.1..0.5);
    let mut cross: Vec<BTreeMap<usize, Matrix2<f64>>> = vec![BTreeMap::new(); robots];
    for (i, j) in shape.edges(robots) {
        let m = random_matrix(&mut rng, 1.0);
        cross[i].insert(j, m);
        cross[j].insert(i, m.transpose());
    }
    let state_box = rng.random_bool(0.5).then(|| (Vector2::repeat(-5.0), Vector2::repeat(5.0)));
    let mut costs = Vec::with_capacity(robots);
    let mut constraints = Vec::with_capacity(robots);
    let mut x_now = Vec::with_capacity(robots);
    let mut u_now = Vec::with_capacity(robots);
    for q_ij in cross {
        let dominance: f64 = q_ij.values().map(|m| m.norm()).sum();
        let a = random_matrix(&mut rng, 1.0);
        let q_ii = a * a.transpose() * 0.5 + Matrix2::identity() * (dominance + rng.random_range(0.5..1.5));
        let b = random_matrix(&mut rng, 1.0);
        let r_ii = b * b.transpose() * 0.3 + Matrix2::identity() * rng.random_range(0.2..1.0);
        costs.push(StageCost {
            q_ii,
            p_ii: q_ii,
            p_ij: q_ij.clone(),
            q_ij,
            r_ii,
            setpoint: random_point(&mut rng, 1.0),
            input_setpoint: Vector2::zeros(),
        });
        let lower = -Vector2::new(rng.random_range(0.3..1.5), rng.random_range(0.3..1.5));
        let upper = Vector2::new(rng.random_range(0.3..1.5), rng.random_range(0.3..1.5));
        let u0 = Vector2::new(rng.random_range(lower.x..upper.x), rng.random_range(lower.y..upper.y));
        constraints.push(ConstraintSet {
            input_lower: lower,
            input_upper: upper,
            state_box,
            pairs: Vec::new(),
        });
        x_now.push(random_point(&mut rng, 1.0));
        u_now.push(u0);
    }
    let ocp = Ocp {
        models: vec![RobotModel { dt }; robots],
        costs,
        constraints,
        horizon,
        slack_penalty: DEFAULT_SLACK_PENALTY,
        literal_units: false,
    };
    Instance {
        seed,
        shape,
        ocp,
        x_now,
        u_now,
    }
}

/// Two robots, horizon 3, tracking setpoints about 0.136 m apart under a
/// hard 0.15 m distance constraint, so the constraint is active at the last
/// two stages. Costs are strong enough that the Lagrangian Hessians stay
/// positive definite at the solution. The geometry is small so that a
/// perturbation of 0.1 is large relative to the constraint curvature and
/// Newton's method needs several steps to reach machine precision.
pub fn qcqp_toy() -> Instance {
    let q_ij = Matrix2::identity() * -8.0;
    let mut costs = vec![StageCost::diagonal(20.0, 1.0); 2];
    costs[0].q_ij.insert(1, q_ij);
    costs[0].p_ij.insert(1, q_ij);
    costs[1].q_ij.insert(0, q_ij);
    costs[1].p_ij.insert(0, q_ij);
    costs[0].setpoint = Vector2::new(0.09, 0.0);
    costs[1].setpoint = Vector2::new(0.225, 0.015);
    let mut constraints = vec![ConstraintSet::input_box(10.0); 2];
    constraints[1].pairs.push(PairConstraint {
        neighbor: 0,
        min_distance: 0.15,
        soft: false,
    });
    let ocp = Ocp {
        models: vec![RobotModel { dt: 0.2 }; 2],
        costs,
        constraints,
        horizon: 3,
        slack_penalty: DEFAULT_SLACK_PENALTY,
        literal_units: false,
    };
    Instance {
        seed: 0,
        shape: GraphShape::Chain,
        ocp,
        x_now: vec![Vector2::new(0.075, 0.0), Vector2::new(0.255, 0.015)],
        u_now: vec![Vector2::new(0.06, 0.0), Vector2::new(-0.06, 0.0)],
    }
}

/// Centralized solution of `inst` mapped into subsystem variables, copies
/// filled with their originals.
pub fn oracle_primal(inst: &Instance, nlp: &PartialNlp) -> Option<Vec<DVector<f64>>> {
    let central = CentralizedOcp::new(&inst.ocp, &inst.x_now, &inst.u_now);
    let sol = central.solve(None);
    (sol.status == OracleStatus::Optimal).then(|| central.to_local(nlp, &sol.v))
}

/// Multipliers `(ν, μ, λ)` at primal `z` by least squares on the
/// stationarity rows, with `μ` fixed to zero on rows where `h < −active_tol`.
pub fn least_squares_multipliers(nlp: &PartialNlp, z: &[DVector<f64>], active_tol: f64) -> KktPoint {
    let e = nlp.consensus.to_dense();
    let n = e.ncols();
    let m_e = e.nrows();
    let evals: Vec<_> = nlp.subsystems.iter().zip(z).map(|(s, z)| s.eval_constraints(z)).collect();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut rhs = DVector::zeros(n);
    let mut slots = Vec::new();
    for (i, (sub, ev)) in nlp.subsystems.iter().zip(&evals).enumerate() {
        let off = nlp.consensus.offsets[i];
        rhs.rows_mut(off, sub.dim()).copy_from(&(-sub.objective_gradient(&z[i])));
        let mut push = |row: DVector<f64>| {
            let mut c = DVector::zeros(n);
            c.rows_mut(off, sub.dim()).copy_from(&row);
            cols.push(c);
        };
        for k in 0..ev.g_jac.nrows() {
            push(ev.g_jac.row(k).transpose());
            slots.push((i, 0usize, k));
        }
        for k in 0..ev.h_jac.nrows() {
            if ev.h_val[k] >= -active_tol {
                push(ev.h_jac.row(k).transpose());
                slots.push((i, 1, k));
            }
        }
    }
    for k in 0..m_e {
        cols.push(e.row(k).transpose());
        slots.push((usize::MAX, 2, k));
    }
    let a = DMatrix::from_columns(&cols);
    let sol = a
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols.len()));
    let mut p = KktPoint {
        z: z.to_vec(),
        nu: nlp.subsystems.iter().map(|s| DVector::zeros(s.n_eq())).collect(),
        mu: nlp.subsystems.iter().map(|s| DVector::zeros(s.n_in())).collect(),
        lambda: DVector::zeros(m_e),
    };
    for (v, (i, kind, k)) in sol.iter().zip(slots) {
        match kind {
            0 => p.nu[i][k] = *v,
            1 => p.mu[i][k] = *v,
            _ => p.lambda[k] = *v,
        }
    }
    p
}

/// KKT point of the toy refined to machine precision by central SQP,
/// starting from the oracle primal and least-squares multipliers.
pub fn qcqp_reference(inst: &Instance, nlp: &PartialNlp) -> Result<KktPoint, QpError> {
    let z = oracle_primal(inst, nlp).ok_or(QpError::NotConvex)?;
    let start = least_squares_multipliers(nlp, &z, 1e-8);
    let opts = CentralSqpOptions {
        max_iter: 50,
        tol: 1e-15,
        ..CentralSqpOptions::default()
    };
    Ok(solve_central_sqp(nlp, &start, opts)?.0)
}

/// Point at distance `radius` from `p` in a random direction. The primal
/// perturbation acts on originals and is copied into the copies, so the
/// consensus constraint still holds.
pub fn perturb(nlp: &PartialNlp, p: &KktPoint, radius: f64, rng: &mut ChaCha8Rng) -> KktPoint {
    let mut d = p.clone();
    for v in d.nu.iter_mut().chain(d.mu.iter_mut()) {
        v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    d.lambda.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    for (i, sub) in nlp.subsystems.iter().enumerate() {
        let l = &sub.layout;
        let own = l.traj_len();
        d.z[i] = DVector::zeros(l.dim());
        for k in 0..own {
            d.z[i][k] = rng.random_range(-1.0..1.0);
        }
        if let Some(s) = l.slack_index() {
            d.z[i][s] = 0.0;
        }
    }
    for i in 0..nlp.len() {
        let l = nlp.subsystems[i].layout.clone();
        for (c, &j) in l.copies.iter().enumerate() {
            for k in 0..=l.horizon {
                let src = nlp.subsystems[j].layout.x(k);
                let v = d.z[j].fixed_rows::<2>(src).into_owned();
                d.z[i].fixed_rows_mut::<2>(l.w(c, k)).copy_from(&v);
            }
        }
    }
    let zero = KktPoint {
        z: d.z.iter().map(|z| DVector::zeros(z.len())).collect(),
        nu: d.nu.iter().map(|v| DVector::zeros(v.len())).collect(),
        mu: d.mu.iter().map(|v| DVector::zeros(v.len())).collect(),
        lambda: DVector::zeros(d.lambda.len()),
    };
    let scale = radius / d.distance(&zero);
    let mut out = p.clone();
    for i in 0..nlp.len() {
        out.z[i] += &d.z[i] * scale;
        out.nu[i] += &d.nu[i] * scale;
        out.mu[i] += &d.mu[i] * scale;
    }
    out.lambda += &d.lambda * scale;
    out
}

/// `e_{q+1}/e_q` for consecutive errors.
pub fn error_ratios(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| w[1] / w[0]).collect()
}

/// True when the first `count` ratios are strictly decreasing.
pub fn strictly_decreasing(ratios: &[f64], count: usize) -> bool {
    ratios.len() >= count && ratios[..count].windows(2).all(|w| w[1] < w[0])
}

/// Outcome of one convex instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexRecord {
    pub seed: u64,
    pub robots: usize,
    pub shape: GraphShape,
    /// `‖z − z*‖∞` after the full iteration budget.
    pub admm_error: f64,
    /// First iteration with `‖z − z*‖∞ ≤ tol`, if reached.
    pub iterations_to_tol: Option<usize>,
    /// `max |u_ADMM − u_dSQP|` of the applied inputs.
    pub equivalence_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexSuite {
    pub seed: u64,
    pub instances: usize,
    pub rho: f64,
    pub l_max: usize,
    pub tol: f64,
    pub exec: Execution,
}

impl Default for ConvexSuite {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            rho: 1.0,
            l_max: 500,
            tol: 1e-6,
            exec: Execution::Sequential,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("instance {seed}: {source}")]
    Problem { seed: u64, source: ProblemError },
    #[error("instance {seed}: {source}")]
    Solver { seed: u64, source: SolverError },
    #[error("instance {seed}: oracle did not converge")]
    Oracle { seed: u64 },
    #[error("instance {seed}: {source}")]
    Qp { seed: u64, source: QpError },
}

/// ADMM against the centralized oracle, tracking the error after every
/// round, then dSQP with one outer step, Gauss-Newton Hessians and the same
/// inner budget from the same cold start.
pub fn run_convex_instance(inst: &Instance, suite: &ConvexSuite) -> Result<ConvexRecord, BenchError> {
    let seed = inst.seed;
    let nlp = inst.nlp().map_err(|source| BenchError::Problem { seed, source })?;
    let z_star = oracle_primal(inst, &nlp).ok_or(BenchError::Oracle { seed })?;
    let solver_err = |source| BenchError::Solver { seed, source };
    let hub = InProcHub::new();
    let one_round = AdmmConfig {
        rho: suite.rho,
        l_max: 1,
    };
    let mut admm = AdmmSolver::new(&nlp, hub.endpoints(nlp.len()), one_round, suite.exec).map_err(solver_err)?;
    admm.update_data(&nlp);
    admm.prepare(&nlp, 0).map_err(solver_err)?;
    let mut iterations_to_tol = None;
    let mut admm_error = f64::INFINITY;
    for l in 1..=suite.l_max {
        // Each round gets its own step index so message keys never collide.
        admm.iterate(l as u32).map_err(solver_err)?;
        admm_error = admm
            .states()
            .iter()
            .zip(&z_star)
            .map(|(s, z)| (&s.z - z).amax())
            .fold(0.0, f64::max);
        if iterations_to_tol.is_none() && admm_error <= suite.tol {
            iterations_to_tol = Some(l);
        }
    }
    let admm_inputs = admm.output(&nlp).inputs;

    let cfg = DsqpConfig {
        q_max: 1,
        l_max: suite.l_max,
        rho: suite.rho,
        hessian: HessianKind::GaussNewton,
        stopping: Stopping::Fixed,
        ..DsqpConfig::default()
    };
    let hub = InProcHub::new();
    let mut dsqp = DsqpSolver::new(&nlp, hub.endpoints(nlp.len()), cfg, suite.exec).map_err(solver_err)?;
    let out = dsqp.solve(&nlp, 0).map_err(solver_err)?;
    let equivalence_delta = admm_inputs
        .iter()
        .zip(&out.inputs)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    Ok(ConvexRecord {
        seed,
        robots: nlp.len(),
        shape: inst.shape,
        admm_error,
        iterations_to_tol,
        equivalence_delta,
    })
}

pub fn run_convex_suite(suite: &ConvexSuite) -> Vec<Result<ConvexRecord, BenchError>> {
    (0..suite.instances as u64)
        .map(|k| run_convex_instance(&random_convex_instance(suite.seed.wrapping_add(k)), suite))
        .collect()
}

/// How the coupled QP of each outer step is solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerSolve {
    /// Exact centralized solution of the coupled QP.
    Exact,
    /// Decentralized ADMM with the given budget and stopping rule.
    Admm { rho: f64, l_max: usize, stopping: Stopping },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcqpSuite {
    pub seed: u64,
    pub instances: usize,
    pub radius: f64,
    pub outer: usize,
    pub inner: InnerSolve,
}

impl Default for QcqpSuite {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            radius: 0.1,
            outer: 5,
            inner: InnerSolve::Admm {
                rho: 1.0,
                l_max: 200,
                stopping: Stopping::Dynamic(EtaSchedule::Superlinear),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcqpRecord {
    pub seed: u64,
    /// `‖p^q − p*‖` for `q = 0..=outer`.
    pub errors: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Inner iterations per outer step (zero for exact solves).
    pub inner_iterations: Vec<usize>,
}

impl QcqpRecord {
    /// Ratios shrink over the first four outer steps.
    pub fn vanishing_ratios(&self) -> bool {
        strictly_decreasing(&self.ratios, 4)
    }
}

/// Outer iterations of dSQP on the toy from one random start within
/// `radius` of the reference KKT point.
pub fn run_qcqp_instance(
    nlp: &PartialNlp,
    reference: &KktPoint,
    seed: u64,
    suite: &QcqpSuite,
) -> Result<QcqpRecord, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Radius of a point drawn uniformly from the ball of radius `suite.radius`.
    let dim = reference.to_vector().len() as f64;
    let radius = suite.radius * rng.random::<f64>().powf(1.0 / dim);
    let start = perturb(nlp, reference, radius, &mut rng);
    let mut errors = vec![start.distance(reference)];
    let mut inner_iterations = Vec::new();
    match suite.inner {
        InnerSolve::Exact => {
            let mut p = start;
            for _ in 0..suite.outer {
                // σ = 0: the step uses the plain Lagrangian Hessian.
                central_sqp_step(nlp, &mut p, 0.0).map_err(|source| BenchError::Qp { seed, source })?;
                errors.push(p.distance(reference));
                inner_iterations.push(0);
            }
        }
        InnerSolve::Admm { rho, l_max, stopping } => {
            let cfg = DsqpConfig {
                q_max: suite.outer,
                l_max,
                rho,
                hessian: HessianKind::RegularizedExact,
                stopping,
                ..DsqpConfig::default()
            };
            let hub = InProcHub::new();
            let mut solver = DsqpSolver::new(nlp, hub.endpoints(nlp.len()), cfg, Execution::Sequential)
                .map_err(|source| BenchError::Solver { seed, source })?;
            solver.set_iterates(start.to_iterates(nlp));
            solver.enable_trace();
            solver.solve(nlp, 0).map_err(|source| BenchError::Solver { seed, source })?;
            for rec in solver.take_trace() {
                errors.push(KktPoint::from_iterates(nlp, &rec.iterates).distance(reference));
                inner_iterations.push(rec.inner_iterations);
            }
        }
    }
    Ok(QcqpRecord {
        seed,
        ratios: error_ratios(&errors),
        errors,
        inner_iterations,
    })
}

pub fn run_qcqp_suite(suite: &QcqpSuite) -> Result<Vec<Result<QcqpRecord, BenchError>>, BenchError> {
    let inst = qcqp_toy();
    let nlp = inst.nlp().map_err(|source| BenchError::Problem { seed: 0, source })?;
    let reference = qcqp_reference(&inst, &nlp).map_err(|source| BenchError::Qp { seed: 0, source })?;
    Ok((0..suite.instances as u64)
        .map(|k| run_qcqp_instance(&nlp, &reference, suite.seed.wrapping_add(k), suite))
        .collect())
}
