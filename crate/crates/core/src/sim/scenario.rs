//! Scenario files: robots, weights, bounds, pair constraints, a
//! piecewise-constant setpoint schedule, solver selection and plant model.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix2, Vector2};
use serde::Deserialize;
use thiserror::Error;

use crate::admm::AdmmConfig;
use crate::dsqp::{DsqpConfig, EtaSchedule, HessianKind, Stopping, DEFAULT_EPS_REG};
use crate::linalg;
use crate::problem::{ConstraintSet, Ocp, PairConstraint, RobotModel, StageCost, DEFAULT_SLACK_PENALTY};

pub const RECTANGLE: &str = include_str!("../../scenarios/rectangle.toml");
pub const FORMATION_CHANGE: &str = include_str!("../../scenarios/formation_change.toml");

/// Name and text of every scenario shipped with the crate.
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "rectangle" => Some(RECTANGLE),
        "formation_change" => Some(FORMATION_CHANGE),
        _ => None,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown override key `{0}` (expected rho, l_max, q_max, hessian, stopping)")]
    UnknownOverride(String),
    #[error("override `{key}`: {reason}")]
    BadOverride { key: String, reason: String },
}

type RawMatrix = [[f64; 2]; 2];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    duration: f64,
    #[serde(default)]
    seed: u64,
    robots: RawRobots,
    cost: RawCost,
    bounds: RawBounds,
    #[serde(default)]
    pairs: Option<RawPairs>,
    schedule: Vec<RawSegment>,
    solver: RawSolver,
    #[serde(default)]
    plant: RawPlant,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRobots {
    count: usize,
    dt: f64,
    horizon: usize,
    initial: Vec<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiag {
    robots: Vec<usize>,
    matrix: RawMatrix,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOffDiag {
    /// `[i, j]`: block `(i, j)`, 1-based.
    pairs: Vec<[usize; 2]>,
    matrix: RawMatrix,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    #[serde(rename = "Qii")]
    q_ii: Vec<RawDiag>,
    #[serde(rename = "Qij", default)]
    q_ij: Vec<RawOffDiag>,
    #[serde(rename = "R")]
    r: Vec<RawDiag>,
    /// Terminal blocks; when both are absent, `P = Q`.
    #[serde(rename = "Pii", default)]
    p_ii: Vec<RawDiag>,
    #[serde(rename = "Pij", default)]
    p_ij: Vec<RawOffDiag>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBounds {
    u_lower: [f64; 2],
    u_upper: [f64; 2],
    #[serde(default)]
    x_lower: Option<[f64; 2]>,
    #[serde(default)]
    x_upper: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPairs {
    min_distance: f64,
    #[serde(default = "yes")]
    soft: bool,
    #[serde(default)]
    literal_units: bool,
    #[serde(default = "default_penalty")]
    penalty: f64,
    /// `[i, j]`: robot `i` keeps its distance to robot `j`.
    list: Vec<[usize; 2]>,
}

fn yes() -> bool {
    true
}

fn default_penalty() -> f64 {
    DEFAULT_SLACK_PENALTY
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    start: f64,
    end: f64,
    setpoints: Vec<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    kind: String,
    #[serde(default = "one")]
    rho: f64,
    l_max: usize,
    #[serde(default)]
    q_max: Option<usize>,
    #[serde(default)]
    hessian: Option<String>,
    #[serde(default)]
    stopping: Option<String>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    #[serde(default)]
    tau: f64,
    #[serde(default)]
    sigma: f64,
}

/// Solver selection with its configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverChoice {
    Admm(AdmmConfig),
    Dsqp(DsqpConfig),
}

impl SolverChoice {
    pub fn name(&self) -> &'static str {
        match self {
            SolverChoice::Admm(_) => "admm",
            SolverChoice::Dsqp(_) => "dsqp",
        }
    }

    /// Apply one `key=value` override.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        let bad = |reason: String| ScenarioError::BadOverride {
            key: key.to_string(),
            reason,
        };
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("`{v}`: {e}")));
        match (key, &mut *self) {
            ("rho", SolverChoice::Admm(c)) => c.rho = value.parse().map_err(|e| bad(format!("`{value}`: {e}")))?,
            ("rho", SolverChoice::Dsqp(c)) => c.rho = value.parse().map_err(|e| bad(format!("`{value}`: {e}")))?,
            ("l_max", SolverChoice::Admm(c)) => c.l_max = parse_usize(value)?,
            ("l_max", SolverChoice::Dsqp(c)) => c.l_max = parse_usize(value)?,
            ("q_max", SolverChoice::Dsqp(c)) => c.q_max = parse_usize(value)?,
            ("hessian", SolverChoice::Dsqp(c)) => c.hessian = parse_hessian(value).map_err(bad)?,
            ("stopping", SolverChoice::Dsqp(c)) => c.stopping = parse_stopping(value).map_err(bad)?,
            ("q_max" | "hessian" | "stopping", SolverChoice::Admm(_)) => {
                return Err(bad("only applies to the dsqp solver".into()));
            }
            _ => return Err(ScenarioError::UnknownOverride(key.to_string())),
        }
        let check = match self {
            SolverChoice::Admm(c) => c.validate(),
            SolverChoice::Dsqp(c) => c.validate(),
        };
        check.map_err(|e| bad(e.to_string()))
    }
}

fn parse_hessian(s: &str) -> Result<HessianKind, String> {
    match s {
        "gauss_newton" => Ok(HessianKind::GaussNewton),
        "regularized_exact" => Ok(HessianKind::RegularizedExact),
        _ => Err(format!("unknown hessian `{s}` (gauss_newton, regularized_exact)")),
    }
}

/// `fixed`, `dynamic` (superlinear schedule) or `dynamic:<eta>`.
fn parse_stopping(s: &str) -> Result<Stopping, String> {
    match s {
        "fixed" => Ok(Stopping::Fixed),
        "dynamic" => Ok(Stopping::Dynamic(EtaSchedule::Superlinear)),
        _ => match s.strip_prefix("dynamic:").map(str::parse::<f64>) {
            Some(Ok(eta)) if eta > 0.0 => Ok(Stopping::Dynamic(EtaSchedule::Constant(eta))),
            _ => Err(format!("unknown stopping rule `{s}` (fixed, dynamic, dynamic:<eta>)")),
        },
    }
}

/// First-order velocity lag plus Gaussian position noise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantModel {
    pub tau: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub setpoints: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub duration: f64,
    pub seed: u64,
    pub dt: f64,
    pub initial: Vec<Vector2<f64>>,
    /// Problem data; setpoints are those of the first segment.
    pub ocp: Ocp,
    pub schedule: Vec<Segment>,
    pub solver: SolverChoice,
    pub plant: PlantModel,
}

/// One line of a validation report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.ok)
    }

    fn push(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            ok,
            detail: detail.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.ok { "ok" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn matrix(m: &RawMatrix) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

fn vec2(v: &[f64; 2]) -> Vector2<f64> {
    Vector2::new(v[0], v[1])
}

impl Scenario {
    /// Parse scenario text. Structural problems (unknown keys, wrong types,
    /// robot indices out of range) are errors; semantic checks live in
    /// [`Scenario::validate`].
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(parse_message(text, &e)))?;
        let n = raw.robots.count;
        if n == 0 {
            return Err(ScenarioError::Invalid("robots.count must be at least 1".into()));
        }
        let idx = |what: &str, r: usize| -> Result<usize, ScenarioError> {
            if r == 0 || r > n {
                Err(ScenarioError::Invalid(format!("{what}: robot {r} outside 1..={n}")))
            } else {
                Ok(r - 1)
            }
        };
        if raw.robots.initial.len() != n {
            return Err(ScenarioError::Invalid(format!(
                "robots.initial has {} entries for {n} robots",
                raw.robots.initial.len()
            )));
        }
        let model = RobotModel::new(raw.robots.dt).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let zero = Matrix2::zeros();
        let mut costs = vec![
            StageCost {
                q_ii: zero,
                q_ij: BTreeMap::new(),
                r_ii: zero,
                p_ii: zero,
                p_ij: BTreeMap::new(),
                setpoint: Vector2::zeros(),
                input_setpoint: Vector2::zeros(),
            };
            n
        ];
        let mut seen_q = vec![false; n];
        for d in &raw.cost.q_ii {
            for &r in &d.robots {
                let i = idx("cost.Qii", r)?;
                costs[i].q_ii = matrix(&d.matrix);
                seen_q[i] = true;
            }
        }
        let mut seen_r = vec![false; n];
        for d in &raw.cost.r {
            for &r in &d.robots {
                let i = idx("cost.R", r)?;
                costs[i].r_ii = matrix(&d.matrix);
                seen_r[i] = true;
            }
        }
        for (what, seen) in [("cost.Qii", &seen_q), ("cost.R", &seen_r)] {
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(ScenarioError::Invalid(format!("{what}: no block for robot {}", i + 1)));
            }
        }
        for o in &raw.cost.q_ij {
            for &[i, j] in &o.pairs {
                let (i, j) = (idx("cost.Qij", i)?, idx("cost.Qij", j)?);
                if i == j {
                    return Err(ScenarioError::Invalid(format!("cost.Qij: diagonal pair [{0}, {0}]", i + 1)));
                }
                costs[i].q_ij.insert(j, matrix(&o.matrix));
            }
        }
        if raw.cost.p_ii.is_empty() && raw.cost.p_ij.is_empty() {
            for c in &mut costs {
                c.p_ii = c.q_ii;
                c.p_ij = c.q_ij.clone();
            }
        } else {
            let mut seen_p = vec![false; n];
            for d in &raw.cost.p_ii {
                for &r in &d.robots {
                    let i = idx("cost.Pii", r)?;
                    costs[i].p_ii = matrix(&d.matrix);
                    seen_p[i] = true;
                }
            }
            if let Some(i) = seen_p.iter().position(|s| !s) {
                return Err(ScenarioError::Invalid(format!("cost.Pii: no block for robot {}", i + 1)));
            }
            for o in &raw.cost.p_ij {
                for &[i, j] in &o.pairs {
                    let (i, j) = (idx("cost.Pij", i)?, idx("cost.Pij", j)?);
                    if i == j {
                        return Err(ScenarioError::Invalid(format!("cost.Pij: diagonal pair [{0}, {0}]", i + 1)));
                    }
                    costs[i].p_ij.insert(j, matrix(&o.matrix));
                }
            }
        }

        let b = &raw.bounds;
        let state_box = match (b.x_lower, b.x_upper) {
            (Some(lo), Some(hi)) => Some((vec2(&lo), vec2(&hi))),
            (None, None) => None,
            _ => return Err(ScenarioError::Invalid("bounds: x_lower and x_upper must be given together".into())),
        };
        let mut constraints = vec![
            ConstraintSet {
                input_lower: vec2(&b.u_lower),
                input_upper: vec2(&b.u_upper),
                state_box,
                pairs: Vec::new(),
            };
            n
        ];
        let (mut penalty, mut literal_units) = (DEFAULT_SLACK_PENALTY, false);
        if let Some(p) = &raw.pairs {
            penalty = p.penalty;
            literal_units = p.literal_units;
            for &[i, j] in &p.list {
                let (i, j) = (idx("pairs.list", i)?, idx("pairs.list", j)?);
                if i == j {
                    return Err(ScenarioError::Invalid(format!("pairs.list: robot {} paired with itself", i + 1)));
                }
                constraints[i].pairs.push(PairConstraint {
                    neighbor: j,
                    min_distance: p.min_distance,
                    soft: p.soft,
                });
            }
        }

        let mut schedule = Vec::with_capacity(raw.schedule.len());
        for (k, s) in raw.schedule.iter().enumerate() {
            if s.setpoints.len() != n {
                return Err(ScenarioError::Invalid(format!(
                    "schedule[{k}] has {} setpoints for {n} robots",
                    s.setpoints.len()
                )));
            }
            schedule.push(Segment {
                start: s.start,
                end: s.end,
                setpoints: s.setpoints.iter().map(vec2).collect(),
            });
        }
        if schedule.is_empty() {
            return Err(ScenarioError::Invalid("schedule is empty".into()));
        }
        for (c, sp) in costs.iter_mut().zip(&schedule[0].setpoints) {
            c.setpoint = *sp;
        }

        let s = &raw.solver;
        let solver = match s.kind.as_str() {
            "admm" => {
                if s.q_max.is_some() || s.hessian.is_some() || s.stopping.is_some() {
                    return Err(ScenarioError::Invalid(
                        "solver: q_max, hessian and stopping only apply to kind = \"dsqp\"".into(),
                    ));
                }
                SolverChoice::Admm(AdmmConfig { rho: s.rho, l_max: s.l_max })
            }
            "dsqp" => SolverChoice::Dsqp(DsqpConfig {
                q_max: s.q_max.unwrap_or(5),
                l_max: s.l_max,
                rho: s.rho,
                hessian: s
                    .hessian
                    .as_deref()
                    .map(parse_hessian)
                    .transpose()
                    .map_err(ScenarioError::Invalid)?
                    .unwrap_or(HessianKind::RegularizedExact),
                eps_reg: DEFAULT_EPS_REG,
                stopping: s
                    .stopping
                    .as_deref()
                    .map(parse_stopping)
                    .transpose()
                    .map_err(ScenarioError::Invalid)?
                    .unwrap_or(Stopping::Fixed),
            }),
            other => return Err(ScenarioError::Invalid(format!("solver.kind `{other}` (expected admm or dsqp)"))),
        };

        Ok(Scenario {
            name: raw.name,
            duration: raw.duration,
            seed: raw.seed,
            dt: raw.robots.dt,
            initial: raw.robots.initial.iter().map(vec2).collect(),
            ocp: Ocp {
                models: vec![model; n],
                costs,
                constraints,
                horizon: raw.robots.horizon,
                slack_penalty: penalty,
                literal_units,
            },
            schedule,
            solver,
            plant: PlantModel {
                tau: raw.plant.tau,
                sigma: raw.plant.sigma,
            },
        })
    }

    pub fn builtin(name: &str) -> Option<Self> {
        builtin(name).map(|t| Self::from_toml(t).expect("shipped scenarios parse"))
    }

    pub fn robots(&self) -> usize {
        self.initial.len()
    }

    /// Number of MPC steps in `[0, duration)`.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    /// Index of the segment active at time `t`.
    pub fn segment_at(&self, t: f64) -> usize {
        self.schedule
            .iter()
            .rposition(|s| s.start <= t + 1e-9)
            .unwrap_or(0)
    }

    pub fn setpoints_at(&self, t: f64) -> &[Vector2<f64>] {
        &self.schedule[self.segment_at(t)].setpoints
    }

    /// Semantic checks: weights, graph symmetry, bounds, schedule coverage.
    pub fn validate(&self) -> ValidationReport {
        let mut rep = ValidationReport::default();
        let ocp = &self.ocp;
        rep.push(
            "horizon",
            ocp.horizon >= 1,
            format!("N = {}", ocp.horizon),
        );
        rep.push("duration", self.duration > 0.0 && self.duration.is_finite(), format!("{} s", self.duration));
        for (name, m) in [("Q", ocp.assembled_q()), ("R", ocp.assembled_r()), ("P", ocp.assembled_p())] {
            let minors = linalg::leading_minors(&m);
            let pd = (&m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && linalg::min_eigenvalue(&m) > 0.0;
            let detail = if pd {
                let x_axis: Vec<usize> = (0..m.nrows()).step_by(2).collect();
                let skeleton = m.select_rows(&x_axis).select_columns(&x_axis);
                format!(
                    "positive definite, x-axis leading minors {:?}",
                    linalg::leading_minors(&skeleton).iter().map(|v| round_sig(*v)).collect::<Vec<_>>()
                )
            } else {
                let offender = ocp
                    .check_weights()
                    .err()
                    .map(|e| e.to_string())
                    .unwrap_or_else(|| name.to_string());
                format!(
                    "{offender}; leading minors {:?}",
                    minors.iter().map(|v| round_sig(*v)).collect::<Vec<_>>()
                )
            };
            rep.push(format!("{name} positive definite"), pd, detail);
        }
        let mut asym = Vec::new();
        for (i, c) in ocp.costs.iter().enumerate() {
            for label in ["Q", "P"] {
                let side = |c: &StageCost| if label == "Q" { c.q_ij.clone() } else { c.p_ij.clone() };
                for (&j, m) in &side(c) {
                    let back = ocp.costs.get(j).and_then(|cj| side(cj).get(&i).copied());
                    if back.is_none_or(|b| (b - m.transpose()).amax() > 1e-12) {
                        asym.push(format!("{label}_{}{} vs {label}_{}{}", i + 1, j + 1, j + 1, i + 1));
                    }
                }
            }
        }
        let graph = ocp.graph();
        let consistent = graph.as_ref().is_ok_and(|g| g.is_consistent());
        rep.push(
            "graph symmetry",
            asym.is_empty() && consistent,
            if asym.is_empty() {
                match &graph {
                    Ok(g) => format!(
                        "in-neighbors {:?}",
                        g.in_neighbors.iter().map(|v| v.iter().map(|j| j + 1).collect::<Vec<_>>()).collect::<Vec<_>>()
                    ),
                    Err(e) => e.to_string(),
                }
            } else {
                format!("coupling blocks not mirrored: {}", asym.join(", "))
            },
        );
        let mut bound_issues = Vec::new();
        for (i, c) in ocp.constraints.iter().enumerate() {
            if (0..2).any(|a| c.input_lower[a] > c.input_upper[a]) {
                bound_issues.push(format!("robot {} input lower > upper", i + 1));
            }
            if (0..2).any(|a| c.input_lower[a] > 0.0 || c.input_upper[a] < 0.0) {
                bound_issues.push(format!("robot {} input box excludes zero", i + 1));
            }
            if let Some((lo, hi)) = &c.state_box {
                if (0..2).any(|a| lo[a] > hi[a]) {
                    bound_issues.push(format!("robot {} state lower > upper", i + 1));
                }
            }
            for p in &c.pairs {
                if !(p.min_distance > 0.0) {
                    bound_issues.push(format!("robot {} non-positive minimum distance", i + 1));
                }
            }
            if c.has_soft() && !(ocp.slack_penalty > 0.0) {
                bound_issues.push("slack penalty must be positive".into());
            }
        }
        rep.push(
            "bounds",
            bound_issues.is_empty(),
            if bound_issues.is_empty() { "consistent".to_string() } else { bound_issues.join("; ") },
        );
        let cov = self.coverage_issues();
        rep.push(
            "schedule coverage",
            cov.is_empty(),
            if cov.is_empty() {
                format!("{} segment(s) cover [0, {}]", self.schedule.len(), self.duration)
            } else {
                cov.join("; ")
            },
        );
        let solver_ok = match &self.solver {
            SolverChoice::Admm(c) => c.validate().err().map(|e| e.to_string()),
            SolverChoice::Dsqp(c) => c.validate().err().map(|e| e.to_string()),
        };
        let admm_nonconvex = matches!(self.solver, SolverChoice::Admm(_)) && ocp.has_pairs();
        rep.push(
            "solver",
            solver_ok.is_none() && !admm_nonconvex,
            match (solver_ok, admm_nonconvex) {
                (Some(e), _) => e,
                (None, true) => "admm cannot handle pair constraints; use dsqp".into(),
                (None, false) => self.solver.name().into(),
            },
        );
        rep.push(
            "plant",
            self.plant.tau >= 0.0 && self.plant.sigma >= 0.0,
            format!("tau = {}, sigma = {}", self.plant.tau, self.plant.sigma),
        );
        rep
    }

    fn coverage_issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        let tol = 1e-9;
        let mut cursor = 0.0;
        for (k, s) in self.schedule.iter().enumerate() {
            if s.end <= s.start {
                out.push(format!("segment {k} is empty ([{}, {}])", s.start, s.end));
            }
            if s.start > cursor + tol {
                out.push(format!("gap [{cursor}, {}]", s.start));
            } else if s.start < cursor - tol {
                out.push(format!("overlap at {}", s.start));
            }
            cursor = s.end;
        }
        if cursor < self.duration - tol {
            out.push(format!("gap [{cursor}, {}]", self.duration));
        }
        out
    }
}

fn round_sig(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(9 - v.abs().log10().floor() as i32);
    (v * scale).round() / scale
}

/// Parse error message with 1-based line and column.
fn parse_message(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
            format!("line {line}, column {col}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_scenarios_validate() {
        for name in ["rectangle", "formation_change"] {
            let s = Scenario::builtin(name).unwrap();
            let rep = s.validate();
            assert!(rep.passed(), "{name}:\n{rep}");
        }
    }

    #[test]
    fn rectangle_minors() {
        let s = Scenario::builtin("rectangle").unwrap();
        let q = s.ocp.assembled_q();
        let skeleton = q.select_rows(&[0, 2, 4, 6]).select_columns(&[0, 2, 4, 6]);
        let minors = linalg::leading_minors(&skeleton);
        for (m, e) in minors.iter().zip([20.0, 300.0, 4000.0, 10000.0]) {
            assert!((m - e).abs() < 1e-9 * e);
        }
    }

    #[test]
    fn parse_error_has_position() {
        let err = Scenario::from_toml("name = \"x\"\nduration = [").unwrap_err();
        let ScenarioError::Parse(msg) = err else { panic!() };
        assert!(msg.starts_with("line 2, column"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = RECTANGLE.replace("[robots]", "[robots]\nwheels = 3");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn overrides() {
        let mut s = Scenario::builtin("formation_change").unwrap().solver;
        s.apply_override("l_max", "3").unwrap();
        s.apply_override("stopping", "dynamic:0.1").unwrap();
        assert!(matches!(s.apply_override("gamma", "1"), Err(ScenarioError::UnknownOverride(k)) if k == "gamma"));
        assert!(s.apply_override("rho", "-1").is_err());
        let mut a = Scenario::builtin("rectangle").unwrap().solver;
        assert!(matches!(a.apply_override("q_max", "2"), Err(ScenarioError::BadOverride { .. })));
    }
}
