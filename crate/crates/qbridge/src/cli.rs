//! `qbridge` command line.
//!
//! Exit codes: 0 success, 2 gateway unreachable, 3 invalid spec or
//! manifest, 4 job not found, 5 any other failure, 64 bad usage.

use std::ffi::OsString;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use qbridge_core::reservation::Window;
use qbridge_core::scheduler::{HybridJobSpec, JobId, UtilizationReport};
use qbridge_core::toolchain::{run_pipeline, ToolPipelineSpec};
use qbridge_core::{parse_circuit, serialize_circuit, HardwareTarget};

use crate::engine::{ClockMode, Engine, EngineConfig};
use crate::gateway::{Client, ClientError, Gateway, DEFAULT_ENDPOINT};
use crate::manifest::{DeviceEntry, Manifest};
use crate::qpi::QpiApi;

pub const ENV_ENDPOINT: &str = "QBRIDGE_ENDPOINT";
pub const ENV_JOB_ID: &str = "QBRIDGE_JOB_ID";
pub const ENV_SESSION_TOKEN: &str = "QBRIDGE_SESSION_TOKEN";

pub const EXIT_OK: i32 = 0;
pub const EXIT_UNREACHABLE: i32 = 2;
pub const EXIT_INVALID_SPEC: i32 = 3;
pub const EXIT_JOB_NOT_FOUND: i32 = 4;
pub const EXIT_OTHER: i32 = 5;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("gateway unreachable: {0}")]
    Unreachable(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    JobNotFound(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Unreachable(_) => EXIT_UNREACHABLE,
            CliError::InvalidSpec(_) => EXIT_INVALID_SPEC,
            CliError::JobNotFound(_) => EXIT_JOB_NOT_FOUND,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Io(e) => CliError::Unreachable(e.to_string()),
            ClientError::Protocol(m) => CliError::Other(m),
            ClientError::Api(a) => match a.code.as_str() {
                "invalid_spec" => CliError::InvalidSpec(a.message),
                "job_not_found" => CliError::JobNotFound(a.message),
                _ => CliError::Other(a.to_string()),
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "qbridge", version, about = "Hybrid quantum/HPC gateway and job tools")]
pub struct Cli {
    /// Gateway address; defaults to $QBRIDGE_ENDPOINT, then 127.0.0.1:7878.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    /// Device manifest (JSON). Without one, two 4-qubit simulators are used.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Milliseconds per scheduler tick.
    #[arg(long, default_value_t = 10)]
    pub tick_ms: u64,
    /// Only advance time on request or while a client waits.
    #[arg(long)]
    pub manual: bool,
    /// JSONL telemetry log path.
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
    /// Override the manifest's classical node count.
    #[arg(long)]
    pub nodes: Option<u32>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Start a gateway in the background and wait until it accepts connections.
    Setup(ServeArgs),
    /// Run a gateway in the foreground.
    Serve(ServeArgs),
    /// Submit a job spec; prints the job id.
    Submit { spec: PathBuf },
    /// Wait for a job to start, open a session and run a command inside it.
    Run {
        job_id: JobId,
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },
    /// Print utilization and task metrics.
    Report {
        job_id: Option<JobId>,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Print gateway state as JSON.
    Status,
    /// Drain in-flight work and stop the gateway.
    Teardown,
    /// Run a tool pipeline over an OpenQASM file locally.
    Transpile {
        circuit: PathBuf,
        #[arg(long)]
        pipeline: PathBuf,
        /// Hardware target JSON, overriding the pipeline's.
        #[arg(long)]
        target: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("qbridge: {e}");
            e.exit_code()
        }
    }
}

fn endpoint(cli: &Option<String>) -> String {
    cli.clone()
        .or_else(|| std::env::var(ENV_ENDPOINT).ok())
        .unwrap_or_else(|| DEFAULT_ENDPOINT.into())
}

fn connect(endpoint: &str) -> Result<Arc<Client>, CliError> {
    Client::connect(endpoint).map(Arc::new).map_err(CliError::from)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<i32, CliError> {
    let ep = endpoint(&cli.endpoint);
    match cli.command {
        Cmd::Serve(args) => serve(&ep, &args).map(|_| EXIT_OK),
        Cmd::Setup(args) => setup(&ep, &args).map(|_| EXIT_OK),
        Cmd::Submit { spec } => {
            let text = read(&spec)?;
            let spec = HybridJobSpec::from_json(&text).map_err(|e| CliError::InvalidSpec(e.to_string()))?;
            let client = connect(&ep)?;
            let id = client.submit_job(&serde_json::to_value(&spec).expect("spec serializes"))?;
            println!("{id}");
            Ok(EXIT_OK)
        }
        Cmd::Run { job_id, command } => run_in_job(&ep, job_id, &command),
        Cmd::Report { job_id, from, to, json } => {
            let client = connect(&ep)?;
            let window = match (from, to) {
                (None, None) => None,
                (f, t) => Some(Window {
                    start: f.unwrap_or(0),
                    end: t.map_or_else(|| client.now(), Ok)?,
                }),
            };
            let r = client.report(job_id, window)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            } else {
                print!("{}", render_report(&r));
            }
            Ok(EXIT_OK)
        }
        Cmd::Status => {
            let s = connect(&ep)?.status()?;
            println!("{}", serde_json::to_string_pretty(&s).expect("status serializes"));
            Ok(EXIT_OK)
        }
        Cmd::Teardown => {
            let client = connect(&ep)?;
            let at = client.shutdown()?;
            drop(client);
            wait_down(&ep, Duration::from_secs(10));
            println!("gateway drained at tick {at}");
            Ok(EXIT_OK)
        }
        Cmd::Transpile {
            circuit,
            pipeline,
            target,
        } => {
            let mut spec = ToolPipelineSpec::from_json(&read(&pipeline)?).map_err(|e| CliError::InvalidSpec(e.to_string()))?;
            if let Some(t) = target {
                let t: HardwareTarget =
                    serde_json::from_str(&read(&t)?).map_err(|e| CliError::InvalidSpec(format!("target: {e}")))?;
                spec = spec.with_final_stage(&t);
            }
            let c = parse_circuit(&read(&circuit)?).map_err(|e| CliError::InvalidSpec(e.to_string()))?;
            let (out, stats) = run_pipeline(&spec, &c).map_err(|e| CliError::Other(e.to_string()))?;
            print!("{}", serialize_circuit(&out));
            eprintln!("{}", serde_json::to_string(&stats).unwrap_or_default());
            Ok(EXIT_OK)
        }
    }
}

pub fn render_report(r: &UtilizationReport) -> String {
    let mut s = format!(
        "window [{}, {})\nquantum utilization {:.4}\n",
        r.window.start, r.window.end, r.quantum_utilization
    );
    for d in &r.devices {
        s += &format!("device {:<12} busy {:>8} ticks  utilization {:.4}\n", d.device_id, d.busy_ticks, d.utilization);
    }
    for j in &r.jobs {
        s += &format!(
            "job {:<4} enqueued {} dispatched {} completed {} expired {} dropped {} mean_wait {:.2} max_wait {} credits_spent {} bound_violations {}\n",
            j.job_id,
            j.tasks_enqueued,
            j.tasks_dispatched,
            j.tasks_completed,
            j.tasks_expired,
            j.tasks_dropped,
            j.mean_wait,
            j.max_wait,
            j.credits_spent,
            j.bound_violations
        );
    }
    s
}

fn default_manifest() -> Manifest {
    use qbridge_core::GateKind;
    let line = |n| HardwareTarget::line([GateKind::Rz, GateKind::Rx, GateKind::Cx], n, 100_000).expect("valid target");
    let sim = |id, seed| DeviceEntry {
        gres: "qc:QC".into(),
        ..DeviceEntry::simulator(id, line(4), seed)
    };
    Manifest::new(vec![sim("sim0", 1), sim("sim1", 2)])
}

fn load_manifest(args: &ServeArgs) -> Result<Manifest, CliError> {
    let mut m = match &args.manifest {
        Some(p) => Manifest::load(p).map_err(|e| CliError::InvalidSpec(e.to_string()))?,
        None => default_manifest(),
    };
    if let Some(n) = args.nodes {
        m.classical_nodes = n;
    }
    Ok(m)
}

fn serve(ep: &str, args: &ServeArgs) -> Result<(), CliError> {
    let manifest = load_manifest(args)?;
    let engine = Engine::new(EngineConfig {
        clock: if args.manual {
            ClockMode::Manual
        } else {
            ClockMode::RealTime(Duration::from_millis(args.tick_ms.max(1)))
        },
        telemetry_path: args.telemetry.clone(),
        ..EngineConfig::new(manifest)
    })
    .map_err(|e| CliError::InvalidSpec(e.to_string()))?;
    let gw = Gateway::bind(engine, ep).map_err(|e| CliError::Other(format!("cannot listen on {ep}: {e}")))?;
    eprintln!("qbridge gateway listening on {}", gw.local_addr());
    gw.serve().map_err(|e| CliError::Other(e.to_string()))
}

fn reachable(ep: &str) -> bool {
    use std::net::ToSocketAddrs;
    ep.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .is_some_and(|a| TcpStream::connect_timeout(&a, Duration::from_millis(200)).is_ok())
}

fn wait_down(ep: &str, limit: Duration) {
    let start = Instant::now();
    while reachable(ep) && start.elapsed() < limit {
        thread::sleep(Duration::from_millis(20));
    }
}

fn setup(ep: &str, args: &ServeArgs) -> Result<(), CliError> {
    // fail fast on a bad manifest instead of through the child
    load_manifest(args)?;
    if reachable(ep) {
        return Err(CliError::Other(format!("something is already listening on {ep}")));
    }
    let exe = std::env::current_exe().map_err(|e| CliError::Other(e.to_string()))?;
    let mut cmd = Command::new(exe);
    cmd.arg("--endpoint").arg(ep).arg("serve").arg("--tick-ms").arg(args.tick_ms.to_string());
    if let Some(m) = &args.manifest {
        cmd.arg("--manifest").arg(m);
    }
    if args.manual {
        cmd.arg("--manual");
    }
    if let Some(t) = &args.telemetry {
        cmd.arg("--telemetry").arg(t);
    }
    if let Some(n) = args.nodes {
        cmd.arg("--nodes").arg(n.to_string());
    }
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| CliError::Other(format!("cannot start gateway: {e}")))?;
    let start = Instant::now();
    while start.elapsed() < Duration::from_secs(10) {
        if reachable(ep) {
            println!("gateway running at {ep} (pid {})", child.id());
            return Ok(());
        }
        if let Ok(Some(status)) = child.try_wait() {
            return Err(CliError::Other(format!("gateway exited during startup ({status})")));
        }
        thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    Err(CliError::Unreachable(format!("gateway did not come up on {ep}")))
}

fn run_in_job(ep: &str, job_id: JobId, command: &[String]) -> Result<i32, CliError> {
    let client = connect(ep)?;
    client.wait_running(job_id, None)?;
    let session = client.qpi_init(job_id)?;
    let info = session.info();
    let status = Command::new(&command[0])
        .args(&command[1..])
        .env(ENV_ENDPOINT, ep)
        .env(ENV_JOB_ID, job_id.to_string())
        .env(ENV_SESSION_TOKEN, &info.token)
        .status()
        .map_err(|e| CliError::Other(format!("cannot run {:?}: {e}", command[0])));
    // the command may have finalized the session itself
    match session.finalize() {
        Ok(sum) => eprintln!("session finalized: {} ops, {} done, {} failed", sum.ops, sum.done, sum.failed),
        Err(e) if e.code == "invalid_handle" || e.code == "unknown_session" || e.code == "already_finalized" => {}
        Err(e) => eprintln!("qbridge: finalize failed: {e}"),
    }
    Ok(status?.code().unwrap_or(EXIT_OTHER))
}
