//! `sds`: control plane daemon, experiment runner and routing inspector.

mod checks;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sds_core::control::{serve, PolicyConfig};
use sds_core::differentiation::compute_token;
use sds_core::stage::{Stage, StageConfig};
use sds_core::{Context, RequestContext, RequestType};
use sds_harness::lsm::{run_lsm_experiment, LsmMode, LsmSimConfig};
use sds_harness::microbench::{manifest_of, run_microbench, trace_of, MicrobenchConfig};
use sds_harness::output::write_run;
use sds_harness::tenants::{run_tenant_experiment, TenantMode, TenantSimConfig};
use sds_harness::{Manifest, Trace, DESK_SCALE};

#[derive(Debug, Parser)]
#[command(name = "sds", version, about = "Software-defined storage stage, control plane and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a control plane until interrupted.
    Control(ControlArgs),
    /// Run an experiment and write `<kind>_<mode>.csv` plus its manifest.
    Experiment(ExperimentArgs),
    /// Apply a rule file to a fresh stage and print the token and channel of
    /// every context in a small classifier space.
    Route(RouteArgs),
}

#[derive(Debug, Args)]
struct ControlArgs {
    config: PathBuf,
    #[arg(long)]
    socket: Option<PathBuf>,
    /// Milliseconds between control iterations.
    #[arg(long)]
    loop_interval: Option<u64>,
    /// Telemetry CSV path.
    #[arg(long)]
    telemetry: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Lsm,
    Tenants,
    Microbench,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    kind: Kind,
    /// `baseline` or `paio` for lsm; `baseline`, `static_limit` or `paio`
    /// for tenants.
    #[arg(long, default_value = "paio")]
    mode: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DESK_SCALE)]
    scale: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also assert the acceptance properties of the run.
    #[arg(long)]
    check: bool,
    /// Accepted for symmetry with `control`; simulated runs use an
    /// in-process link.
    #[arg(long)]
    socket: Option<PathBuf>,
    /// Milliseconds between control iterations.
    #[arg(long)]
    loop_interval: Option<u64>,
    /// Simulated seconds (lsm).
    #[arg(long)]
    duration: Option<f64>,
    /// Channel counts (microbench).
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Request sizes in bytes (microbench).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<u64>>,
    /// Milliseconds per configuration (microbench).
    #[arg(long)]
    point_ms: Option<u64>,
}

#[derive(Debug, Args)]
struct RouteArgs {
    rules: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,9")]
    workflows: Vec<u64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] sds_core::control::ConfigError),
    #[error(transparent)]
    Control(#[from] sds_core::control::ControlError),
    #[error(transparent)]
    Sim(#[from] sds_harness::SimError),
    #[error(transparent)]
    Output(#[from] sds_harness::output::OutputError),
    #[error(transparent)]
    Stage(#[from] sds_core::stage::StageError),
    #[error("interrupt handler: {0}")]
    Signal(#[from] ctrlc::Error),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if matches!(cli.command, Command::Control(_)) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Control(a) => control(a).map(|()| true),
        Command::Experiment(a) => experiment(a),
        Command::Route(a) => route(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn control(a: ControlArgs) -> Result<(), CliError> {
    let mut cfg = PolicyConfig::load(&a.config).map_err(|e| CliError::Usage(format!("{}: {e}", a.config.display())))?;
    if let Some(s) = a.socket {
        cfg.socket = Some(s);
    }
    if let Some(ms) = a.loop_interval {
        cfg.loop_interval = Duration::from_millis(ms);
    }
    if let Some(t) = a.telemetry {
        cfg.telemetry = Some(t);
    }
    cfg.validate()?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::Relaxed))?;
    }
    let (tx, rx) = mpsc::channel();
    let server = {
        let stop = stop.clone();
        thread::spawn(move || serve(&cfg, &stop, Some(tx)))
    };
    if let Ok(path) = rx.recv() {
        println!("ready {}", path.display());
    }
    server.join().map_err(|_| CliError::Usage("control loop panicked".into()))??;
    println!("stopped");
    Ok(())
}

fn interval_secs(ms: Option<u64>) -> Option<f64> {
    ms.map(|ms| ms as f64 / 1000.0)
}

fn save(out: &Path, stem: &str, trace: &Trace, manifest: &Manifest) -> Result<(), CliError> {
    let (csv, man) = write_run(out, stem, trace, manifest)?;
    println!("wrote {} and {}", csv.display(), man.display());
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<bool, CliError> {
    if a.socket.is_some() {
        log::info!("--socket is ignored by simulated experiments");
    }
    let started = Instant::now();
    let outcome = match a.kind {
        Kind::Lsm => {
            let mode: LsmMode = a.mode.parse()?;
            let mut cfg = LsmSimConfig::desk(a.scale);
            cfg.seed = a.seed;
            if let Some(d) = a.duration {
                cfg.duration = d;
            }
            if let Some(l) = interval_secs(a.loop_interval) {
                cfg.loop_interval = l;
            }
            let run = run_lsm_experiment(&cfg, mode)?;
            let m = run.manifest(&cfg);
            println!(
                "lsm {}: {:.0} ops/s, p99 {:.2} ms, stalled {:.1} s",
                mode.as_str(),
                run.mean_throughput(),
                run.p99 as f64 / 1e6,
                run.stall_time
            );
            save(&a.out, &format!("lsm_{}", mode.as_str()), &run.trace, &m)?;
            a.check.then(|| checks::lsm(&cfg, &run))
        }
        Kind::Tenants => {
            let mode: TenantMode = a.mode.parse()?;
            let mut cfg = TenantSimConfig::desk(a.scale);
            cfg.seed = a.seed;
            if let Some(l) = interval_secs(a.loop_interval) {
                cfg.loop_interval = l;
            }
            let run = run_tenant_experiment(&cfg, mode)?;
            let m = run.manifest(&cfg);
            for i in &run.instances {
                println!(
                    "{}: {:.2} MiB/s over {:.1} s",
                    i.name,
                    i.mean_bandwidth() / (1 << 20) as f64,
                    i.active_secs()
                );
            }
            save(&a.out, &format!("tenants_{}", mode.as_str()), &run.trace, &m)?;
            a.check.then(|| checks::tenants(&cfg, &run, started.elapsed()))
        }
        Kind::Microbench => {
            let mut cfg = MicrobenchConfig::default();
            if let Some(c) = a.channels {
                cfg.channels = c;
            }
            if let Some(s) = a.sizes {
                cfg.request_sizes = s;
            }
            if let Some(ms) = a.point_ms {
                cfg.duration = Duration::from_millis(ms);
            }
            let rows = run_microbench(&cfg)?;
            for r in &rows {
                println!(
                    "{} channels, {} B: {:.0} ops/s, p50 {} ns, p99 {} ns",
                    r.channels,
                    r.request_size,
                    r.ops_per_sec(),
                    r.p50.as_nanos(),
                    r.p99.as_nanos()
                );
            }
            let mut m = manifest_of(&cfg);
            m.set("seed", a.seed);
            save(&a.out, "microbench", &trace_of(&rows), &m)?;
            a.check.then(|| checks::microbench(&rows))
        }
    };
    Ok(match outcome {
        None => true,
        Some(failures) => {
            for f in &failures {
                println!("check failed: {f}");
            }
            if failures.is_empty() {
                println!("checks passed");
            }
            failures.is_empty()
        }
    })
}

fn route(a: RouteArgs) -> Result<(), CliError> {
    let stage = Stage::create(StageConfig::new("route"))?;
    stage.load_rules(&a.rules)?;
    let table = stage.routing();
    let mask = table.mask().ok_or_else(|| CliError::Usage(format!("{}: no classifier mask set", a.rules.display())))?;
    println!("mask\t{mask}");
    for &wf in &a.workflows {
        for &ty in RequestType::ALL {
            for rc in RequestContext::known() {
                let ctx = Context::new(wf, ty, 0, rc);
                let token = compute_token(mask, &ctx).map_err(|e| CliError::Usage(e.to_string()))?;
                let channel = table.select_channel(&ctx).map_err(|e| CliError::Usage(e.to_string()))?;
                println!("{wf}\t{ty}\t{rc}\t{:#010x}\t{}", token.0, channel.0);
            }
        }
    }
    stage.shutdown();
    Ok(())
}
