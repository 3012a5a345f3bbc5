use std::collections::HashSet;

use dmpc::messaging::{Endpoint, InProcHub, MessageKey, TransportError, TransportStats};
use dmpc::problem::build_partial_nlp;
use dmpc::sim::{
    read_csv, run_scenario, run_with_endpoints, CentralizedOcp, ControllerState, ResidualRow, RunError, RunOptions,
    Scenario, Summary, TeamSolver, TimingRow, TrajectoryRow, RESIDUAL_CSV, TIMING_CSV, TRAJECTORY_CSV,
};
use dmpc::Execution;
use nalgebra::Vector2;

fn single_robot(setpoint: [f64; 2], duration: f64) -> Scenario {
    let text = format!(
        r#"
name = "single"
duration = {duration}
seed = 1

[robots]
count = 1
dt = 0.2
horizon = 7
initial = [[0.0, 0.0]]

[[cost.Qii]]
robots = [1]
matrix = [[20.0, 0.0], [0.0, 20.0]]

[[cost.R]]
robots = [1]
matrix = [[1.0, 0.0], [0.0, 1.0]]

[bounds]
u_lower = [-0.2, -0.2]
u_upper = [0.2, 0.2]

[[schedule]]
start = 0.0
end = {duration}
setpoints = [[{}, {}]]

[solver]
kind = "admm"
rho = 1.0
l_max = 5
"#,
        setpoint[0], setpoint[1]
    );
    Scenario::from_toml(&text).unwrap()
}

fn quick() -> RunOptions {
    RunOptions {
        exec: Execution::Sequential,
        ..RunOptions::default()
    }
}

#[test]
fn null_scenario_is_quiet() {
    let sc = single_robot([0.0, 0.0], 4.0);
    let art = run_scenario(&sc, &quick()).unwrap();
    assert_eq!(art.trajectory.len(), 20);
    for r in &art.trajectory {
        assert!(r.ux_applied.abs() <= 1e-12 && r.uy_applied.abs() <= 1e-12, "{r:?}");
        assert!(r.x.abs() <= 1e-12 && r.y.abs() <= 1e-12);
    }
    for r in &art.residuals {
        assert!(r.residual_inf <= 1e-12, "{r:?}");
    }
}

#[test]
fn rectangle_at_rest_on_setpoints_stays_put() {
    let mut sc = Scenario::builtin("rectangle").unwrap();
    sc.initial = sc.setpoints_at(0.0).to_vec();
    let n = sc.robots();
    let mut nlp = build_partial_nlp(&sc.ocp, &sc.ocp.graph().unwrap(), &sc.initial, &vec![Vector2::zeros(); n]).unwrap();
    let hub = InProcHub::new();
    let mut solver = TeamSolver::new(&sc.solver, &nlp, hub.endpoints(n), Execution::Sequential).unwrap();
    let mut ctrl = ControllerState::new(n);
    let setpoints = sc.setpoints_at(0.0).to_vec();
    for _ in 0..3 {
        let out = ctrl.mpc_step(&mut solver, &mut nlp, &sc.initial, &setpoints).unwrap();
        for u in &out.inputs {
            assert!(u.amax() <= 1e-6, "{u}");
        }
    }
}

#[test]
fn large_step_saturates_input() {
    let sc = single_robot([0.4, 0.0], 1.0);
    let x_now = [Vector2::zeros()];
    let u_now = [Vector2::zeros()];
    let mut nlp = build_partial_nlp(&sc.ocp, &sc.ocp.graph().unwrap(), &x_now, &u_now).unwrap();
    let mut solver = TeamSolver::new(&sc.solver, &nlp, InProcHub::new().endpoints(1), Execution::Sequential).unwrap();
    let mut ctrl = ControllerState::new(1);
    let out = ctrl.mpc_step(&mut solver, &mut nlp, &x_now, sc.setpoints_at(0.0)).unwrap();
    assert!((out.inputs[0].x - 0.2).abs() <= 1e-9, "{}", out.inputs[0]);
    assert!(out.inputs[0].y.abs() <= 1e-9);

    let mut ocp = sc.ocp.clone();
    ocp.costs[0].setpoint = Vector2::new(0.4, 0.0);
    let central = CentralizedOcp::new(&ocp, &x_now, &u_now);
    let u_star = central.applied_inputs(&central.solve(None).v);
    assert!((u_star[0].x - 0.2).abs() <= 1e-9);
}

/// The input applied over `[t, t+Δt)` is the `u¹` solved at `t − Δt`.
#[test]
fn pending_input_is_applied_next_step() {
    let sc = Scenario::builtin("rectangle").unwrap();
    let n = sc.robots();
    let mut nlp = build_partial_nlp(&sc.ocp, &sc.ocp.graph().unwrap(), &sc.initial, &vec![Vector2::zeros(); n]).unwrap();
    let mut solver = TeamSolver::new(&sc.solver, &nlp, InProcHub::new().endpoints(n), Execution::Sequential).unwrap();
    let mut ctrl = ControllerState::new(n);
    let mut x = sc.initial.clone();
    let mut previous: Option<Vec<Vector2<f64>>> = None;
    for k in 0..10 {
        let out = ctrl.mpc_step(&mut solver, &mut nlp, &x, sc.setpoints_at(0.0)).unwrap();
        let applied = ctrl.committed();
        match &previous {
            None => assert!(applied.iter().all(|u| u.amax() == 0.0)),
            Some(p) => assert_eq!(&applied, p, "step {k}"),
        }
        for (p, u) in ctrl.inputs.iter().zip(&out.inputs) {
            assert_eq!(p.pending, *u);
        }
        for (xi, u) in x.iter_mut().zip(&applied) {
            *xi += u * sc.dt;
        }
        previous = Some(out.inputs);
    }
}

#[test]
fn runs_are_deterministic() {
    let sc = Scenario::builtin("rectangle").unwrap();
    let opts = RunOptions {
        max_steps: Some(60),
        ..quick()
    };
    let a = run_scenario(&sc, &opts).unwrap();
    let b = run_scenario(&sc, &opts).unwrap();
    assert_eq!(a.trajectory_csv(), b.trajectory_csv());
    assert_eq!(a.residual_csv(), b.residual_csv());
}

#[test]
fn summary_is_recomputable_from_csv() {
    let sc = Scenario::builtin("rectangle").unwrap();
    let opts = RunOptions {
        max_steps: Some(40),
        ..quick()
    };
    let art = run_scenario(&sc, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    art.write(dir.path()).unwrap();
    let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap();
    let traj: Vec<TrajectoryRow> = read_csv(&read(TRAJECTORY_CSV)).unwrap();
    let res: Vec<ResidualRow> = read_csv(&read(RESIDUAL_CSV)).unwrap();
    let timing: Vec<TimingRow> = read_csv(&read(TIMING_CSV)).unwrap();
    let again = Summary::from_rows(&sc, &art.summary.solver, &traj, &res, &timing);
    assert_eq!(again, art.summary);
}

/// In-process endpoint that fails every receive during the listed MPC steps.
struct Flaky {
    inner: Box<dyn Endpoint>,
    failing: HashSet<u32>,
}

impl Endpoint for Flaky {
    fn id(&self) -> usize {
        self.inner.id()
    }

    fn publish(&mut self, key: MessageKey, payload: &[f64]) -> Result<(), TransportError> {
        self.inner.publish(key, payload)
    }

    fn await_payload(&mut self, key: MessageKey) -> Result<Vec<f64>, TransportError> {
        if self.failing.contains(&key.mpc_step) {
            return Err(TransportError::Timeout {
                agent: self.id(),
                key,
                waited_ms: 0,
            });
        }
        self.inner.await_payload(key)
    }

    fn stats(&self) -> TransportStats {
        self.inner.stats()
    }
}

fn flaky_endpoints(n: usize, failing: &[u32]) -> Vec<Box<dyn Endpoint>> {
    InProcHub::new()
        .endpoints(n)
        .into_iter()
        .map(|inner| {
            Box::new(Flaky {
                inner,
                failing: failing.iter().copied().collect(),
            }) as Box<dyn Endpoint>
        })
        .collect()
}

#[test]
fn failed_step_holds_previous_input() {
    let sc = Scenario::builtin("rectangle").unwrap();
    let n = sc.robots();
    let opts = RunOptions {
        max_steps: Some(10),
        ..quick()
    };
    let art = run_with_endpoints(&sc, &opts, flaky_endpoints(n, &[4])).unwrap();
    assert_eq!(art.faults.len(), 1);
    assert_eq!(art.faults[0].step, 4);
    let applied = |k: usize, i: usize| {
        let r = &art.trajectory[k * n + i];
        (r.ux_applied, r.uy_applied)
    };
    for i in 0..n {
        assert_eq!(applied(5, i), applied(4, i), "robot {i}");
    }
    // The run recovers after the fault.
    assert!(art.trajectory[9 * n].x > art.trajectory[5 * n].x);
}

#[test]
fn persistent_faults_abort_with_partial_artifacts() {
    let sc = Scenario::builtin("rectangle").unwrap();
    let opts = RunOptions {
        max_steps: Some(20),
        max_consecutive_faults: 3,
        ..quick()
    };
    let failing: Vec<u32> = (2..20).collect();
    let err = run_with_endpoints(&sc, &opts, flaky_endpoints(sc.robots(), &failing)).unwrap_err();
    assert!(matches!(err.error, RunError::Aborted { step: 4, .. }), "{}", err.error);
    let partial = err.partial.unwrap();
    assert_eq!(partial.trajectory.len(), 5 * sc.robots());
}

#[test]
fn noisy_plant_still_tracks() {
    let mut sc = Scenario::builtin("rectangle").unwrap();
    sc.plant.sigma = 0.002;
    let opts = RunOptions {
        max_steps: Some(100),
        oracle: false,
        ..quick()
    };
    let art = run_scenario(&sc, &opts).unwrap();
    assert!(art.summary.final_tracking_error <= 0.02, "{}", art.summary.final_tracking_error);
}
