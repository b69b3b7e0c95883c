//! Command-line interface.
//!
//! One binary, five subcommands: `profile` probes configurations and
//! writes a profile file, `run` executes the step loop, `dispatch-bench`
//! compares the two dispatch strategies over a payload sweep, `worker`
//! joins a TCP session as one peer process, and `report` turns a trace
//! into CSVs and a summary.
//!
//! Exit codes: 1 internal failure, 2 configuration problems, 3 resource
//! exhaustion (a predicted OOM abort, or a bucket no candidate fits), 4
//! malformed data files, 5 transport failures.

use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::config::{
    build_profile, load_config, load_profile, save_profile, BackendKind, BenchSection,
    ConfigError, RunConfig,
};
use crate::dispatch::{plan_all_to_all, plan_gather_scatter, row_payload, RowStore, ShardLayout};
use crate::model::{ClusterSpec, ParallelismConfig};
use crate::orchestrator::{
    run, OrchestratorError, RunOutcome, RunResult, SimulatedDispatch, TcpDispatch, TraceRow,
};
use crate::report::{
    read_trace, summarize, write_aggregate_csv, write_steps_csv, ReportError, TraceWriter,
};
use crate::selector::{build_policy, speedup_pct, SelectorError, ThroughputProfile};
use crate::transport::sim::{simulate_latency, NetModel};
use crate::transport::tcp::{PeerBook, TcpOptions, TcpSession, TransportError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RESOURCE: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_TRANSPORT: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Resource(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Resource(_) => EXIT_RESOURCE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Transport(_) => EXIT_TRANSPORT,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        CliError::Transport(e.to_string())
    }
}

fn selector_error(e: SelectorError) -> CliError {
    match e {
        SelectorError::UnsatisfiableBucket { .. } => CliError::Resource(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn orchestrator_error(e: OrchestratorError) -> CliError {
    match e {
        OrchestratorError::Transport(t) => CliError::Transport(t.to_string()),
        OrchestratorError::Selector(s) => selector_error(s),
        other => CliError::Other(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Sim,
    Tcp,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Sim => BackendKind::Sim,
            BackendArg::Tcp => BackendKind::Tcp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WorkerModeArg {
    /// Mirror the step loop of a `run` session.
    Run,
    /// Mirror a `dispatch-bench` session.
    Bench,
}

/// Desk-scale testbed for parallelism selection and batch dispatch.
#[derive(Debug, Parser)]
#[command(name = "earl", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe candidate configurations per context bucket and write the
    /// profile file.
    Profile {
        /// Configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Profile output path (default: output.profile_out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override workload.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Execute the step loop and stream a JSONL trace.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trace output path (default: output.trace).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override run.backend.
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Override workload.seed; pass the same value to every worker.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare gather-scatter against all-to-all over a payload sweep.
    DispatchBench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV output path; no CSV is written when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override run.backend.
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
    /// Join a TCP session as one worker process.
    Worker {
        #[arg(long)]
        config: Option<PathBuf>,
        /// This process's worker id (index into transport.peers).
        #[arg(long)]
        id: u32,
        /// Listen address override; EARL_LISTEN is consulted next, then
        /// the peer book entry.
        #[arg(long)]
        listen: Option<String>,
        #[arg(long, value_enum, default_value = "run")]
        mode: WorkerModeArg,
        /// Must match the seed of the driving `run` command.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn a trace into per-step and aggregate CSVs plus a summary.
    Report {
        #[arg(long)]
        trace: PathBuf,
        /// Output directory for the CSVs (default: next to the trace).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Profile { config, out, seed } => cmd_profile(config, out, seed),
        Command::Run {
            config,
            out,
            backend,
            seed,
        } => cmd_run(config, out, backend, seed),
        Command::DispatchBench {
            config,
            out,
            backend,
        } => cmd_dispatch_bench(config, out, backend),
        Command::Worker {
            config,
            id,
            listen,
            mode,
            seed,
        } => cmd_worker(config, id, listen, mode, seed),
        Command::Report { trace, out } => cmd_report(trace, out),
    }
}

fn load(config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match config {
        Some(path) => Ok(load_config(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_profile(config: &RunConfig) -> Result<ThroughputProfile, CliError> {
    match &config.profile.path {
        Some(path) => Ok(load_profile(path)?),
        None => build_profile(config).map_err(CliError::Config),
    }
}

fn cmd_profile(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config = load(&config)?;
    if let Some(seed) = seed {
        config.workload.seed = seed;
    }
    let profile = build_profile(&config).map_err(CliError::Config)?;
    print_profile(&profile);
    match build_policy(
        &profile,
        config.selector.hysteresis_tokens,
        config.selector.switch_cost_s,
    ) {
        Ok(policy) => {
            println!("policy:");
            for (bucket, pick) in &policy.table {
                println!("  [{:>6}, {:>6}) -> {pick}", bucket.lower, bucket.upper);
            }
        }
        Err(e @ SelectorError::UnsatisfiableBucket { .. }) => {
            eprintln!("warning: {e}; no policy can cover this profile");
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    }
    let out = out.unwrap_or_else(|| config.output.profile_out.clone());
    save_profile(&out, &profile)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn print_profile(profile: &ThroughputProfile) {
    let configs = profile.configs();
    println!(
        "profiled {} configurations over {} context buckets",
        configs.len(),
        profile.buckets().len()
    );
    for bucket in profile.buckets() {
        let mut line = format!("  [{:>6}, {:>6})", bucket.lower, bucket.upper);
        let mut alive: Vec<(ParallelismConfig, f64)> = Vec::new();
        for config in &configs {
            match profile.lookup(config, &bucket).and_then(|e| e.tgs) {
                Some(tgs) => {
                    line.push_str(&format!("  {config} {tgs:.1}"));
                    alive.push((*config, tgs));
                }
                None => line.push_str(&format!("  {config} OOM")),
            }
        }
        alive.sort_by(|a, b| b.1.total_cmp(&a.1));
        match alive.as_slice() {
            [] => line.push_str("  no configuration fits"),
            [(best, _)] => line.push_str(&format!("  best {best}")),
            [(best, best_tgs), (runner, runner_tgs), ..] => {
                let pct = speedup_pct(*runner_tgs, *best_tgs).expect("positive throughputs");
                line.push_str(&format!("  best {best} ({pct:+.1}% vs {runner})"));
            }
        }
        println!("{line}");
    }
}

fn cmd_run(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    backend: Option<BackendArg>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config = load(&config)?;
    if let Some(backend) = backend {
        config.run.backend = backend.into();
        config
            .validate()
            .map_err(CliError::Config)?;
    }
    if let Some(seed) = seed {
        config.workload.seed = seed;
    }
    let profile = resolve_profile(&config)?;
    let params = config.run_params(profile).map_err(selector_error)?;
    let trace_path = out.unwrap_or_else(|| config.output.trace.clone());
    let mut writer = TraceWriter::create(&trace_path)?;
    let sink = |row: &TraceRow| writer.write_row(row);

    let result = match config.run.backend {
        BackendKind::Sim => {
            let mut backend = SimulatedDispatch::new(&config.cluster);
            run(&params, &mut backend, sink).map_err(orchestrator_error)?
        }
        BackendKind::Tcp => {
            let book = config
                .transport
                .peer_book()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let my_id = config.cluster.controller_id;
            let mut session =
                TcpSession::establish(my_id, &book, config.transport.options())?;
            let outcome = {
                let mut backend = TcpDispatch {
                    session: &mut session,
                };
                run(&params, &mut backend, sink)
            };
            match outcome {
                Ok(result) => {
                    session.close()?;
                    result
                }
                Err(e) => {
                    let e = orchestrator_error(e);
                    session.abort(&e.to_string());
                    return Err(e);
                }
            }
        }
    };
    writer.finish()?;
    println!("{}", summarize(&result.rows));
    println!("wrote {}", trace_path.display());
    finish_run(result)
}

/// Completed runs exit 0; a predicted-OOM abort exits with the resource
/// code after the trace has been flushed.
fn finish_run(result: RunResult) -> Result<(), CliError> {
    match result.outcome {
        RunOutcome::Completed => Ok(()),
        RunOutcome::OomAborted { step } => {
            let last = result.rows.last().expect("abort emits a row");
            Err(CliError::Resource(format!(
                "aborted at step {step}: TP{}xDP{} predicted out-of-memory at context length {}",
                last.tensor_parallel, last.data_parallel, last.max_context_len
            )))
        }
    }
}

fn resolve_listener(
    id: u32,
    book: &PeerBook,
    listen: Option<String>,
    opts: TcpOptions,
) -> Result<TcpSession, CliError> {
    let listen = listen.or_else(|| std::env::var("EARL_LISTEN").ok());
    match listen {
        Some(addr) => {
            let listener = TcpListener::bind(&addr)
                .map_err(|e| CliError::Transport(format!("bind {addr}: {e}")))?;
            Ok(TcpSession::establish_with_listener(id, book, listener, opts)?)
        }
        None => Ok(TcpSession::establish(id, book, opts)?),
    }
}

fn cmd_worker(
    config: Option<PathBuf>,
    id: u32,
    listen: Option<String>,
    mode: WorkerModeArg,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config = load(&config)?;
    if let Some(seed) = seed {
        config.workload.seed = seed;
    }
    let book = config
        .transport
        .peer_book()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if book.addr(id).is_none() {
        return Err(CliError::Config(format!(
            "worker id {id} has no transport.peers entry (peers list {} addresses)",
            book.len()
        )));
    }
    match mode {
        WorkerModeArg::Run => {
            let profile = resolve_profile(&config)?;
            let params = config.run_params(profile).map_err(selector_error)?;
            let mut session = resolve_listener(id, &book, listen, config.transport.options())?;
            let outcome = {
                let mut backend = TcpDispatch {
                    session: &mut session,
                };
                run(&params, &mut backend, |_| Ok(()))
            };
            match outcome {
                Ok(result) => {
                    session.close()?;
                    println!("worker {id} done");
                    finish_run(result)
                }
                Err(e) => {
                    let e = orchestrator_error(e);
                    session.abort(&e.to_string());
                    Err(e)
                }
            }
        }
        WorkerModeArg::Bench => {
            check_bench_peers(&config, &book)?;
            let mut session = resolve_listener(id, &book, listen, config.transport.options())?;
            match bench_over_tcp(&mut session, &config.bench) {
                Ok(_) => {
                    session.close()?;
                    println!("worker {id} done");
                    Ok(())
                }
                Err(e) => {
                    session.abort(&e.to_string());
                    Err(e)
                }
            }
        }
    }
}

/// One payload point of the strategy sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPoint {
    pub payload_mib: u64,
    pub gather_scatter_s: f64,
    pub all_to_all_s: f64,
    pub speedup: f64,
}

fn bench_point(payload_mib: u64, gather_scatter_s: f64, all_to_all_s: f64) -> BenchPoint {
    let speedup = if all_to_all_s > 0.0 {
        gather_scatter_s / all_to_all_s
    } else {
        f64::INFINITY
    };
    BenchPoint {
        payload_mib,
        gather_scatter_s,
        all_to_all_s,
        speedup,
    }
}

fn bench_plans(
    workers: u32,
    payload_mib: u64,
) -> Result<
    (
        ShardLayout,
        crate::dispatch::DispatchPlan,
        crate::dispatch::DispatchPlan,
    ),
    CliError,
> {
    let row_bytes = payload_mib * 1024 * 1024;
    let (src, dst) =
        ShardLayout::rotation_pair(workers).map_err(|e| CliError::Other(e.to_string()))?;
    let gs = plan_gather_scatter(&src, &dst, 0, row_bytes)
        .map_err(|e| CliError::Other(e.to_string()))?;
    let a2a =
        plan_all_to_all(&src, &dst, row_bytes).map_err(|e| CliError::Other(e.to_string()))?;
    Ok((src, gs, a2a))
}

/// Analytic sweep on the bench cluster (`payload_workers` plus a
/// controller).
pub fn bench_over_sim(config: &RunConfig) -> Result<Vec<BenchPoint>, CliError> {
    let bench = &config.bench;
    let cluster = ClusterSpec {
        worker_count: bench.payload_workers + 1,
        ..config.cluster.clone()
    };
    cluster.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let net = NetModel::from_cluster(&cluster);
    let mut points = Vec::new();
    for &mib in &bench.payload_mib {
        let (_, gs, a2a) = bench_plans(bench.payload_workers, mib)?;
        points.push(bench_point(
            mib,
            simulate_latency(&gs, &net),
            simulate_latency(&a2a, &net),
        ));
    }
    Ok(points)
}

/// Measured sweep; every session member runs this in lock step and
/// takes the median of its own wall-clock timings.
pub fn bench_over_tcp(
    session: &mut TcpSession,
    bench: &BenchSection,
) -> Result<Vec<BenchPoint>, CliError> {
    let me = session.my_id();
    let mut step = 0u64;
    let mut points = Vec::new();
    for &mib in &bench.payload_mib {
        let row_bytes = mib * 1024 * 1024;
        let (src, gs, a2a) = bench_plans(bench.payload_workers, mib)?;
        // Payload generation is far slower than a memcpy; build each
        // row once so refills between runs stay off the clock.
        let mut base = RowStore::new();
        for (w, range) in src.assignments() {
            if *w == me {
                for row in range.start..range.end {
                    base.insert(row, row_payload(row, row_bytes));
                }
            }
        }
        // One untimed exchange per strategy warms allocator and socket
        // paths before anything lands on the clock.
        for plan in [&gs, &a2a] {
            let mut store = base.clone();
            session.execute_plan(step, "bench", plan, &mut store)?;
            step += 1;
        }
        let mut gs_times = Vec::with_capacity(bench.runs as usize);
        let mut a2a_times = Vec::with_capacity(bench.runs as usize);
        for _ in 0..bench.runs {
            for (plan, times) in [(&gs, &mut gs_times), (&a2a, &mut a2a_times)] {
                let mut store = base.clone();
                let durations = session.execute_plan(step, "bench", plan, &mut store)?;
                step += 1;
                times.push(durations.iter().map(|d| d.as_secs_f64()).sum());
            }
        }
        points.push(bench_point(mib, median(gs_times), median(a2a_times)));
    }
    Ok(points)
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn check_bench_peers(config: &RunConfig, book: &PeerBook) -> Result<(), CliError> {
    let want = config.bench.payload_workers as usize + 1;
    if book.len() != want {
        return Err(CliError::Config(format!(
            "a TCP bench over {} payload workers needs {want} transport.peers entries (controller included), found {}",
            config.bench.payload_workers,
            book.len()
        )));
    }
    Ok(())
}

fn cmd_dispatch_bench(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    backend: Option<BackendArg>,
) -> Result<(), CliError> {
    let mut config = load(&config)?;
    if let Some(backend) = backend {
        config.run.backend = backend.into();
    }
    let points = match config.run.backend {
        BackendKind::Sim => {
            println!(
                "dispatch bench over {} workers (simulated)",
                config.bench.payload_workers
            );
            bench_over_sim(&config)?
        }
        BackendKind::Tcp => {
            println!(
                "dispatch bench over {} workers (tcp, median of {} runs)",
                config.bench.payload_workers, config.bench.runs
            );
            let book = config
                .transport
                .peer_book()
                .map_err(|e| CliError::Config(e.to_string()))?;
            check_bench_peers(&config, &book)?;
            let my_id = config.cluster.controller_id;
            let mut session =
                TcpSession::establish(my_id, &book, config.transport.options())?;
            match bench_over_tcp(&mut session, &config.bench) {
                Ok(points) => {
                    session.close()?;
                    points
                }
                Err(e) => {
                    session.abort(&e.to_string());
                    return Err(e);
                }
            }
        }
    };
    println!("payload      gather_scatter     all_to_all    speedup");
    for p in &points {
        println!(
            "{:>7} MiB  {:>12.6} s  {:>11.6} s  {:>8.2}x",
            p.payload_mib, p.gather_scatter_s, p.all_to_all_s, p.speedup
        );
    }
    if let Some(out) = out {
        write_bench_csv(&out, &points)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn write_bench_csv(path: &Path, points: &[BenchPoint]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for p in points {
        w.serialize(p)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_report(trace: PathBuf, out: Option<PathBuf>) -> Result<(), CliError> {
    let rows = read_trace(&trace)?;
    let out_dir = match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir)
                .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
            dir
        }
        None => trace
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let steps_csv = out_dir.join("steps.csv");
    let aggregate_csv = out_dir.join("aggregate.csv");
    write_steps_csv(&steps_csv, &rows)?;
    write_aggregate_csv(&aggregate_csv, &rows)?;
    println!("{}", summarize(&rows));
    println!("wrote {}", steps_csv.display());
    println!("wrote {}", aggregate_csv.display());
    Ok(())
}
