use std::fs;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use dmpc::bench::{self, ConvexSuite, InnerSolve, QcqpSuite};
use dmpc::dsqp::{EtaSchedule, Stopping};
use dmpc::messaging::UdpConfig;
use dmpc::sim::{run_scenario, RunOptions, Scenario, ScenarioError, Transport};
use dmpc::Execution;

/// Distributed MPC for planar robot teams: closed-loop runs, scenario checks
/// and solver benchmarks.
#[derive(Parser, Debug)]
#[command(name = "dmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario in closed loop and write trajectory, residual and timing CSVs.
    Run(RunArgs),
    /// Check a scenario file: weights, coupling graph, bounds, schedule coverage.
    Validate {
        /// Built-in scenario name or path to a scenario file.
        scenario: String,
    },
    /// Randomized solver benchmarks against centralized references.
    Bench(BenchArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    Inproc,
    Udp,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ExecKind {
    Parallel,
    Sequential,
}

impl From<ExecKind> for Execution {
    fn from(e: ExecKind) -> Self {
        match e {
            ExecKind::Parallel => Execution::Parallel,
            ExecKind::Sequential => Execution::Sequential,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Built-in scenario name (rectangle, formation_change) or path to a scenario file.
    #[arg(long)]
    scenario: String,
    #[arg(long, value_enum, default_value_t = TransportKind::Inproc)]
    transport: TransportKind,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the CSV artifacts.
    #[arg(long, env = "DMPC_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Solver overrides as key=value (rho, l_max, q_max, hessian, stopping).
    #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1..)]
    overrides: Vec<String>,
    /// Stop after this many MPC steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Skip the centralized reference solve (no residual CSV rows).
    #[arg(long)]
    no_oracle: bool,
    /// Pace steps with the wall clock instead of simulated time.
    #[arg(long)]
    realtime: bool,
    #[arg(long, value_enum, default_value_t = ExecKind::Parallel)]
    exec: ExecKind,
    /// UDP: bind address of all agents.
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// UDP: first port; agent i binds base_port + i. 0 picks free ports.
    #[arg(long, default_value_t = 0)]
    base_port: u16,
    /// UDP: probability of dropping an outgoing datagram.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    /// UDP: receive timeout per message in milliseconds.
    #[arg(long, default_value_t = 150)]
    timeout_ms: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    Convex,
    Qcqp,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Inner {
    Exact,
    Admm,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(value_enum)]
    suite: Suite,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long)]
    l_max: Option<usize>,
    /// QCQP: how the coupled QP of each outer step is solved.
    #[arg(long, value_enum, default_value_t = Inner::Admm)]
    inner: Inner,
    /// QCQP with ADMM inner solves: fixed, dynamic or dynamic:<eta>.
    #[arg(long, default_value = "dynamic")]
    stopping: String,
    /// QCQP: outer iterations per instance.
    #[arg(long, default_value_t = 5)]
    outer: usize,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Runtime(anyhow::Error),
    Invalid(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Bench(args) => cmd_bench(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(spec: &str) -> Result<Scenario, Failure> {
    let text = match dmpc::sim::scenario::builtin(spec) {
        Some(t) if !Path::new(spec).exists() => t.to_string(),
        _ => fs::read_to_string(spec)
            .with_context(|| format!("cannot read scenario `{spec}`"))
            .map_err(Failure::Invalid)?,
    };
    Scenario::from_toml(&text).map_err(|e| Failure::Invalid(anyhow::Error::new(e).context(format!("parsing `{spec}`"))))
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let mut scenario = load_scenario(&args.scenario)?;
    for ov in &args.overrides {
        let Some((key, value)) = ov.split_once('=') else {
            return Err(Failure::Invalid(anyhow::anyhow!("override `{ov}` is not of the form key=value")));
        };
        scenario
            .solver
            .apply_override(key.trim(), value.trim())
            .map_err(|e: ScenarioError| Failure::Invalid(e.into()))?;
    }
    let report = scenario.validate();
    if !report.passed() {
        eprint!("{report}");
        return Err(Failure::Invalid(anyhow::anyhow!("scenario `{}` failed validation", scenario.name)));
    }
    let transport = match args.transport {
        TransportKind::Inproc => Transport::InProc,
        TransportKind::Udp => {
            if !(0.0..1.0).contains(&args.loss) {
                return Err(Failure::Invalid(anyhow::anyhow!("--loss must lie in [0, 1)")));
            }
            Transport::Udp(UdpConfig {
                host: args.host,
                base_port: args.base_port,
                loss: args.loss,
                timeout: Duration::from_millis(args.timeout_ms),
                ..UdpConfig::default()
            })
        }
    };
    let opts = RunOptions {
        transport,
        seed: args.seed,
        exec: args.exec.into(),
        realtime: args.realtime,
        oracle: !args.no_oracle,
        max_steps: args.max_steps,
        ..RunOptions::default()
    };
    info!("running `{}` with {}", scenario.name, scenario.solver.name());
    match run_scenario(&scenario, &opts) {
        Ok(art) => {
            let written = art.write(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
            print!("{}", art.summary);
            if !art.faults.is_empty() {
                println!("faults: {} step(s) held the previous input", art.faults.len());
            }
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Err(fail) => {
            if let Some(partial) = &fail.partial {
                match partial.write(&args.out) {
                    Ok(_) => warn!("partial artifacts written to {}", args.out.display()),
                    Err(e) => warn!("could not write partial artifacts: {e}"),
                }
                print!("{}", partial.summary);
            }
            match fail.error {
                dmpc::sim::RunError::Invalid(msg) => Err(Failure::Invalid(anyhow::anyhow!(msg))),
                e => Err(Failure::Runtime(e.into())),
            }
        }
    }
}

fn cmd_validate(spec: &str) -> Result<(), Failure> {
    let scenario = load_scenario(spec)?;
    let report = scenario.validate();
    print!("{report}");
    if report.passed() {
        println!("scenario `{}`: all checks passed", scenario.name);
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(Failure::Invalid(anyhow::anyhow!("failed checks: {}", names.join(", "))))
    }
}

fn parse_stopping(s: &str) -> Result<Stopping> {
    Ok(match s {
        "fixed" => Stopping::Fixed,
        "dynamic" => Stopping::Dynamic(EtaSchedule::Superlinear),
        _ => match s.strip_prefix("dynamic:").map(str::parse::<f64>) {
            Some(Ok(eta)) if eta > 0.0 => Stopping::Dynamic(EtaSchedule::Constant(eta)),
            _ => bail!("unknown stopping rule `{s}` (fixed, dynamic, dynamic:<eta>)"),
        },
    })
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Failure> {
    match args.suite {
        Suite::Convex => bench_convex(args),
        Suite::Qcqp => bench_qcqp(args),
    }
}

fn bench_convex(args: &BenchArgs) -> Result<(), Failure> {
    let suite = ConvexSuite {
        seed: args.seed,
        instances: args.instances.unwrap_or(100),
        rho: args.rho,
        l_max: args.l_max.unwrap_or(500),
        ..ConvexSuite::default()
    };
    println!("seed,robots,shape,admm_error,iterations_to_tol,equivalence_delta");
    let (mut worst_err, mut worst_delta, mut flagged, mut ok) = (0.0f64, 0.0f64, 0, 0);
    for res in bench::run_convex_suite(&suite) {
        match res {
            Ok(r) => {
                ok += 1;
                worst_err = worst_err.max(r.admm_error);
                worst_delta = worst_delta.max(r.equivalence_delta);
                let iters = r.iterations_to_tol.map_or("-".to_string(), |l| l.to_string());
                println!(
                    "{},{},{:?},{:.3e},{},{:.3e}",
                    r.seed, r.robots, r.shape, r.admm_error, iters, r.equivalence_delta
                );
            }
            Err(e) => {
                flagged += 1;
                println!("# flagged: {e}");
            }
        }
    }
    if ok + flagged == 0 {
        println!("# empty suite");
        return Ok(());
    }
    println!("# {ok} instances, {flagged} flagged");
    println!("# max ADMM error vs oracle: {worst_err:.3e}");
    println!("# max |u_admm - u_dsqp(q=1)|: {worst_delta:.3e}");
    Ok(())
}

fn bench_qcqp(args: &BenchArgs) -> Result<(), Failure> {
    let inner = match args.inner {
        Inner::Exact => InnerSolve::Exact,
        Inner::Admm => InnerSolve::Admm {
            rho: args.rho,
            l_max: args.l_max.unwrap_or(200),
            stopping: parse_stopping(&args.stopping).map_err(Failure::Invalid)?,
        },
    };
    let suite = QcqpSuite {
        seed: args.seed,
        instances: args.instances.unwrap_or(50),
        outer: args.outer,
        inner,
        ..QcqpSuite::default()
    };
    if suite.instances == 0 {
        println!("# empty suite");
        return Ok(());
    }
    let records = bench::run_qcqp_suite(&suite).context("building the QCQP reference")?;
    println!("seed,vanishing_ratios,errors,ratios,inner_iterations");
    let (mut vanishing, mut ok, mut flagged) = (0, 0, 0);
    for res in records {
        match res {
            Ok(r) => {
                ok += 1;
                vanishing += usize::from(r.vanishing_ratios());
                let fmt = |v: &[f64]| v.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(" ");
                let inner: Vec<String> = r.inner_iterations.iter().map(|l| l.to_string()).collect();
                println!(
                    "{},{},{},{},{}",
                    r.seed,
                    r.vanishing_ratios(),
                    fmt(&r.errors),
                    fmt(&r.ratios),
                    inner.join(" ")
                );
            }
            Err(e) => {
                flagged += 1;
                println!("# flagged: {e}");
            }
        }
    }
    println!("# {ok} instances, {flagged} flagged");
    println!(
        "# vanishing error ratios: {vanishing}/{ok} ({:.1}%)",
        100.0 * vanishing as f64 / ok.max(1) as f64
    );
    Ok(())
}
