//! Closed-loop simulation, scenarios and the centralized reference solver.

pub mod controller;
pub mod oracle;
pub mod plant;
pub mod runner;
pub mod scenario;

pub use controller::{ControllerState, Fault, InputPair, TeamSolver};
pub use oracle::{CentralizedOcp, OracleSolution, OracleStatus};
pub use plant::{plant_advance, Plant};
pub use runner::{
    read_csv, run_scenario, run_with_endpoints, timing_report, ResidualRow, RunArtifacts, RunError, RunFailure, RunOptions,
    Summary, TimingRow, TimingSummaryRow, Transport, TrajectoryRow, RESIDUAL_CSV, TIMING_CSV, TIMING_REPORT_CSV,
    TRAJECTORY_CSV, WARMUP_S,
};
pub use scenario::{PlantModel, Scenario, ScenarioError, SolverChoice, ValidationReport};
