//! Closed-loop runs: plant, agents, oracle and the CSV artifacts.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::controller::{ControllerState, Fault, TeamSolver};
use super::oracle::{CentralizedOcp, OracleStatus};
use super::plant::Plant;
use super::scenario::{Scenario, SolverChoice};
use crate::admm::SolverError;
use crate::exec::Execution;
use crate::messaging::{
    Endpoint, InProcHub, IterateLog, MeasurementBus, MeasurementMessage, RecordingEndpoint, TransportError,
    TransportStats, UdpConfig, UdpNetwork,
};
use crate::problem::{build_partial_nlp, ProblemError};

/// Residuals within this long after a setpoint change are excluded from the
/// post-warm-up maximum.
pub const WARMUP_S: f64 = 5.0;
/// Segments at least this long are checked for convergence at their end.
pub const MIN_SETTLE_SEGMENT_S: f64 = 10.0;

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const RESIDUAL_CSV: &str = "residual.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const TIMING_REPORT_CSV: &str = "timing_report.csv";

#[derive(Debug, Clone)]
pub enum Transport {
    InProc,
    Udp(UdpConfig),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub transport: Transport,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub exec: Execution,
    /// Sleep until each sampling instant instead of running as fast as possible.
    pub realtime: bool,
    pub oracle: bool,
    /// Record every delivered iterate payload per agent.
    pub record_iterates: bool,
    /// Stop after this many steps instead of the scenario duration.
    pub max_steps: Option<usize>,
    /// Abort after this many consecutive failed steps.
    pub max_consecutive_faults: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            transport: Transport::InProc,
            seed: None,
            exec: Execution::default(),
            realtime: false,
            oracle: true,
            record_iterates: false,
            max_steps: None,
            max_consecutive_faults: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub robot: usize,
    pub x: f64,
    pub y: f64,
    pub ux_applied: f64,
    pub uy_applied: f64,
    pub xbar: f64,
    pub ybar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub t: f64,
    pub residual_inf: f64,
    pub oracle_status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub t: f64,
    pub robot: usize,
    pub step_label: String,
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummaryRow {
    pub step_label: String,
    pub count: usize,
    pub median_us: f64,
    pub max_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub solver: String,
    pub steps: usize,
    /// Largest distance to the setpoint over robots at the last step.
    pub final_tracking_error: f64,
    /// Largest distance to the setpoint at the end of every segment lasting
    /// at least [`MIN_SETTLE_SEGMENT_S`], in schedule order.
    pub segment_end_errors: Vec<f64>,
    /// Largest residual over steps with a converged oracle, at least
    /// [`WARMUP_S`] after the most recent setpoint change.
    pub max_residual_after_warmup: Option<f64>,
    pub oracle_failures: usize,
    pub min_pairwise_distance: f64,
    pub min_consecutive_distance: f64,
    pub timing: Vec<TimingSummaryRow>,
}

impl Summary {
    /// Everything here is derived from the CSV rows and the scenario.
    pub fn from_rows(
        scenario: &Scenario,
        solver: &str,
        trajectory: &[TrajectoryRow],
        residuals: &[ResidualRow],
        timing: &[TimingRow],
    ) -> Self {
        let n = scenario.robots();
        let steps = trajectory.len() / n.max(1);
        let at_step = |k: usize| &trajectory[k * n..(k + 1) * n];
        let err = |rows: &[TrajectoryRow]| {
            rows.iter()
                .map(|r| ((r.x - r.xbar).powi(2) + (r.y - r.ybar).powi(2)).sqrt())
                .fold(0.0f64, f64::max)
        };
        let final_tracking_error = if steps > 0 { err(at_step(steps - 1)) } else { f64::NAN };
        let dt = scenario.dt;
        let mut segment_end_errors = Vec::new();
        for seg in &scenario.schedule {
            if seg.end - seg.start < MIN_SETTLE_SEGMENT_S - 1e-9 {
                continue;
            }
            let last = ((seg.end / dt).round() as usize).saturating_sub(1);
            if last < steps {
                segment_end_errors.push(err(at_step(last)));
            }
        }
        let mut max_res: Option<f64> = None;
        let mut oracle_failures = 0;
        for r in residuals {
            if r.oracle_status != OracleStatus::Optimal.as_str() {
                oracle_failures += usize::from(r.oracle_status == OracleStatus::Failed.as_str());
                continue;
            }
            let change = scenario.schedule[scenario.segment_at(r.t)].start;
            if r.t + 1e-9 >= change + WARMUP_S {
                max_res = Some(max_res.map_or(r.residual_inf, |m| m.max(r.residual_inf)));
            }
        }
        let (mut min_pair, mut min_consec) = (f64::INFINITY, f64::INFINITY);
        for k in 0..steps {
            let rows = at_step(k);
            for i in 0..n {
                for j in i + 1..n {
                    let d = ((rows[i].x - rows[j].x).powi(2) + (rows[i].y - rows[j].y).powi(2)).sqrt();
                    min_pair = min_pair.min(d);
                    if j == i + 1 {
                        min_consec = min_consec.min(d);
                    }
                }
            }
        }
        Summary {
            scenario: scenario.name.clone(),
            solver: solver.to_string(),
            steps,
            final_tracking_error,
            segment_end_errors,
            max_residual_after_warmup: max_res,
            oracle_failures,
            min_pairwise_distance: min_pair,
            min_consecutive_distance: min_consec,
            timing: timing_report(timing),
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {} ({}), {} steps", self.scenario, self.solver, self.steps)?;
        writeln!(f, "final tracking error: {:.3e} m", self.final_tracking_error)?;
        let seg: Vec<String> = self.segment_end_errors.iter().map(|e| format!("{e:.3e}")).collect();
        writeln!(f, "segment end errors: [{}] m", seg.join(", "))?;
        match self.max_residual_after_warmup {
            Some(r) => writeln!(f, "max residual after {WARMUP_S} s warm-up: {r:.3e} m/s")?,
            None => writeln!(f, "max residual after {WARMUP_S} s warm-up: n/a")?,
        }
        writeln!(f, "oracle failures: {}", self.oracle_failures)?;
        writeln!(f, "min pairwise distance: {:.4} m", self.min_pairwise_distance)?;
        writeln!(f, "min consecutive distance: {:.4} m", self.min_consecutive_distance)?;
        writeln!(f, "timing (median / max, us):")?;
        for t in &self.timing {
            writeln!(f, "  {:<22} {:>10.1} {:>10}  (n = {})", t.step_label, t.median_us, t.max_us, t.count)?;
        }
        Ok(())
    }
}

/// Median and maximum per label, labels in first-seen order.
pub fn timing_report(rows: &[TimingRow]) -> Vec<TimingSummaryRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.step_label.as_str()) {
            labels.push(&r.step_label);
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let mut v: Vec<u64> = rows.iter().filter(|r| r.step_label == l).map(|r| r.micros).collect();
            v.sort_unstable();
            let m = v.len();
            let median = if m % 2 == 1 { v[m / 2] as f64 } else { (v[m / 2 - 1] + v[m / 2]) as f64 / 2.0 };
            TimingSummaryRow {
                step_label: l.to_string(),
                count: m,
                median_us: median,
                max_us: v[m - 1],
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub trajectory: Vec<TrajectoryRow>,
    pub residuals: Vec<ResidualRow>,
    pub timing: Vec<TimingRow>,
    pub faults: Vec<Fault>,
    pub stale_measurements: usize,
    pub transport: Vec<TransportStats>,
    /// Delivered iterate payloads per agent when recording was requested.
    pub iterates: Vec<IterateLog>,
    pub summary: Summary,
}

impl RunArtifacts {
    pub fn trajectory_csv(&self) -> String {
        to_csv(&self.trajectory)
    }

    pub fn residual_csv(&self) -> String {
        to_csv(&self.residuals)
    }

    pub fn timing_csv(&self) -> String {
        to_csv(&self.timing)
    }

    pub fn timing_report_csv(&self) -> String {
        to_csv(&self.summary.timing)
    }

    /// Write the CSV artifacts into `dir` and return their paths.
    pub fn write(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (name, body) in [
            (TRAJECTORY_CSV, self.trajectory_csv()),
            (RESIDUAL_CSV, self.residual_csv()),
            (TIMING_CSV, self.timing_csv()),
            (TIMING_REPORT_CSV, self.timing_report_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Parse rows previously written by [`RunArtifacts::write`].
pub fn read_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario failed validation:\n{0}")]
    Invalid(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },
}

/// A failed run with whatever artifacts were produced before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: RunError,
    pub partial: Option<Box<RunArtifacts>>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

impl From<RunError> for RunFailure {
    fn from(error: RunError) -> Self {
        Self { error, partial: None }
    }
}

/// Validate the scenario, open the transport and run it.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunArtifacts, RunFailure> {
    let report = scenario.validate();
    if !report.passed() {
        return Err(RunError::Invalid(report.to_string()).into());
    }
    let n = scenario.robots();
    let endpoints = match &opts.transport {
        Transport::InProc => InProcHub::new().endpoints(n),
        Transport::Udp(cfg) => {
            let mut cfg = cfg.clone();
            cfg.seed = opts.seed.unwrap_or(scenario.seed) ^ cfg.seed;
            UdpNetwork::boxed(n, &cfg).map_err(RunError::from)?
        }
    };
    run_with_endpoints(scenario, opts, endpoints)
}

/// Run with caller-supplied endpoints (one per robot, in order).
pub fn run_with_endpoints(
    scenario: &Scenario,
    opts: &RunOptions,
    endpoints: Vec<Box<dyn Endpoint>>,
) -> Result<RunArtifacts, RunFailure> {
    let n = scenario.robots();
    let seed = opts.seed.unwrap_or(scenario.seed);
    let mut logs = Vec::new();
    let endpoints: Vec<Box<dyn Endpoint>> = if opts.record_iterates {
        endpoints
            .into_iter()
            .map(|ep| {
                let (rec, log) = RecordingEndpoint::new(ep);
                logs.push(log);
                Box::new(rec) as Box<dyn Endpoint>
            })
            .collect()
    } else {
        endpoints
    };

    let mut ocp = scenario.ocp.clone();
    let graph = ocp.graph().map_err(RunError::from)?;
    let zeros = vec![Vector2::zeros(); n];
    let mut nlp = build_partial_nlp(&ocp, &graph, &scenario.initial, &zeros).map_err(RunError::from)?;
    let mut solver = TeamSolver::new(&scenario.solver, &nlp, endpoints, opts.exec).map_err(RunError::from)?;
    let mut plant = Plant::new(scenario.plant, scenario.dt, &scenario.initial, seed);
    let bus = MeasurementBus::new(n);
    let mut ctrl = ControllerState::new(n);

    let steps = opts.max_steps.map_or(scenario.steps(), |m| m.min(scenario.steps()));
    let mut trajectory = Vec::with_capacity(steps * n);
    let mut residuals = Vec::with_capacity(steps);
    let mut timing = Vec::new();
    let mut stale = 0;
    let mut oracle_prev: Option<DVector<f64>> = None;
    let mut last_known = scenario.initial.clone();
    let started = Instant::now();
    let mut abort = None;

    for k in 0..steps {
        let t = k as f64 * scenario.dt;
        let timestamp_ns = (k as u64) * (scenario.dt * 1e9).round() as u64;
        for (i, p) in plant.positions.iter().enumerate() {
            bus.publish(MeasurementMessage {
                robot: i,
                timestamp_ns,
                position: *p,
            });
        }
        let mut x_now = Vec::with_capacity(n);
        for i in 0..n {
            let wait = if opts.realtime { Duration::from_secs_f64(scenario.dt / 4.0) } else { Duration::ZERO };
            match bus.await_measurement(i, wait) {
                Ok(r) => {
                    stale += usize::from(r.stale);
                    last_known[i] = r.message.position;
                    x_now.push(r.message.position);
                }
                Err(e) => {
                    warn!("step {k}: {e}; reusing last known position");
                    stale += 1;
                    x_now.push(last_known[i]);
                }
            }
        }
        let setpoints = scenario.setpoints_at(t).to_vec();
        for (c, sp) in ocp.costs.iter_mut().zip(&setpoints) {
            c.setpoint = *sp;
        }
        ctrl.mpc_step(&mut solver, &mut nlp, &x_now, &setpoints);
        let applied = ctrl.committed();
        for (i, ((x, u), sp)) in x_now.iter().zip(&applied).zip(&setpoints).enumerate() {
            trajectory.push(TrajectoryRow {
                t,
                robot: i + 1,
                x: x.x,
                y: x.y,
                ux_applied: u.x,
                uy_applied: u.y,
                xbar: sp.x,
                ybar: sp.y,
            });
        }
        for (i, log) in solver.take_timing().into_iter().enumerate() {
            for (label, us) in log {
                timing.push(TimingRow {
                    t,
                    robot: i + 1,
                    step_label: label.to_string(),
                    micros: us,
                });
            }
        }
        if opts.oracle {
            let central = CentralizedOcp::new(&ocp, &x_now, &applied);
            let start = oracle_prev.as_ref().map(|v| central.shift(v));
            let sol = central.solve(start.as_ref());
            let pending: Vec<Vector2<f64>> = ctrl.inputs.iter().map(|p| p.pending).collect();
            let residual = central
                .applied_inputs(&sol.v)
                .iter()
                .zip(&pending)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0f64, f64::max);
            if sol.status == OracleStatus::Failed {
                warn!("step {k}: centralized oracle did not converge; step excluded from residual statistics");
                oracle_prev = None;
            } else {
                oracle_prev = Some(sol.v);
            }
            residuals.push(ResidualRow {
                t,
                residual_inf: residual,
                oracle_status: sol.status.as_str().to_string(),
            });
        }
        plant.advance(&applied);
        if ctrl.fault_run >= opts.max_consecutive_faults {
            abort = Some(RunError::Aborted {
                step: k,
                reason: format!(
                    "{} consecutive solver failures, last: {}",
                    ctrl.fault_run,
                    ctrl.faults.last().map(|f| f.message.as_str()).unwrap_or("")
                ),
            });
            break;
        }
        if opts.realtime {
            let deadline = started + Duration::from_secs_f64((k + 1) as f64 * scenario.dt);
            if let Some(rest) = deadline.checked_duration_since(Instant::now()) {
                std::thread::sleep(rest);
            }
        }
    }
    info!("{} steps in {:.2} s", trajectory.len() / n.max(1), started.elapsed().as_secs_f64());

    let summary = Summary::from_rows(scenario, solver_name(&scenario.solver), &trajectory, &residuals, &timing);
    let artifacts = RunArtifacts {
        trajectory,
        residuals,
        timing,
        faults: ctrl.faults,
        stale_measurements: stale,
        transport: solver.endpoint_stats(),
        iterates: logs,
        summary,
    };
    match abort {
        None => Ok(artifacts),
        Some(error) => Err(RunFailure {
            error,
            partial: Some(Box::new(artifacts)),
        }),
    }
}

fn solver_name(s: &SolverChoice) -> &'static str {
    s.name()
}
