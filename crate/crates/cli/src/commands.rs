use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Subcommand, ValueEnum};
use pcm_client::SchedulerClient;
use pcm_core::config::{Config, ConfigError};
use pcm_core::factory::{generate_trace, read_trace, summarize_trace, validate_trace, Scenario, TraceEvent};
use pcm_core::harness::{self, plot, summarize, ExperimentSpec};
use pcm_core::model::{Awareness, WorkerId};
use pcm_core::scheduler::ExperimentReport;
use pcm_core::sim::Sample;
use pcm_service::factory::{Factory, SpawnMode};
use pcm_service::live::{run_live, LiveOptions, WorkerSpawn};
use pcm_service::scheduler::SchedulerOptions;
use pcm_service::worker::{run_worker, WorkerExit, WorkerOptions};
use pcm_service::{fs, scheduler, EmuClock};
use thiserror::Error;

use crate::{exit, Cli, Command, Global};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("deadlock: {0}")]
    Deadlock(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Runtime(_) => exit::RUNTIME,
            CliError::Deadlock(_) => exit::DEADLOCK,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(g: &Global) -> Result<Config, CliError> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => {
            let mut c = Config::default();
            c.apply_env()?;
            c
        }
    };
    if let Some(ts) = g.time_scale {
        cfg.apply_time_scale_override(Some(&ts.to_string()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn tokio_rt() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)
}

fn local(port: u16) -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], port))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_trace(path: &Path, cfg: &Config) -> Result<Vec<TraceEvent>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let trace = read_trace(BufReader::new(f)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    validate_trace(&trace, &cfg.catalog()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(trace)
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Scheduler(a) => scheduler_cmd(&cli.global, a),
        Command::Worker(a) => worker_cmd(&cli.global, a),
        Command::Factory(a) => factory_cmd(&cli.global, a),
        Command::Trace { action } => trace_cmd(&cli.global, action),
        Command::Run(a) => run_cmd(&cli.global, a),
        Command::Submit(a) => submit_cmd(&cli.global, a),
        Command::Status(a) => status_cmd(&cli.global, a),
        Command::Stop(a) => stop_cmd(&cli.global, a),
        Command::Summarize(a) => summarize_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

#[derive(Debug, Args)]
pub struct SchedulerArgs {
    /// Worker-facing TCP address [default: 127.0.0.1:<ports.scheduler>].
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// HTTP control-plane address [default: 127.0.0.1:<ports.http>].
    #[arg(long)]
    pub http: Option<SocketAddr>,
    /// Structured event log, one JSON object per line.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
}

fn scheduler_cmd(g: &Global, a: SchedulerArgs) -> Result<(), CliError> {
    let cfg = config(g)?;
    let opts = SchedulerOptions {
        worker_listen: a.listen.unwrap_or(local(cfg.ports.scheduler)),
        http_listen: a.http.unwrap_or(local(cfg.ports.http)),
        event_log: a.event_log,
        config: cfg,
    };
    tokio_rt()?.block_on(async move {
        let svc = scheduler::start(opts).await.map_err(runtime)?;
        println!("scheduler workers={} http={}", svc.worker_addr, svc.http_url());
        tokio::select! {
            _ = svc.stopped() => {}
            _ = tokio::signal::ctrl_c() => svc.shutdown().await,
        }
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// Scheduler worker port [default: 127.0.0.1:<ports.scheduler>].
    #[arg(long)]
    pub scheduler: Option<SocketAddr>,
    /// Filesystem emulator base URL [default: http://127.0.0.1:<ports.fs>].
    #[arg(long)]
    pub fs: Option<String>,
    /// GPU model name from the catalog, e.g. "NVIDIA A10".
    #[arg(long)]
    pub gpu: String,
    #[arg(long)]
    pub id: Option<String>,
    /// Peer-transfer listen address [default: 127.0.0.1:<ports.peer_base>].
    #[arg(long)]
    pub peer_listen: Option<SocketAddr>,
    /// Persistent cache directory; its contents are offered on registration.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Connection attempts before giving up.
    #[arg(long, default_value_t = 8)]
    pub retries: u32,
}

fn worker_cmd(g: &Global, a: WorkerArgs) -> Result<(), CliError> {
    let cfg = config(g)?;
    let gpu = cfg
        .catalog()
        .get(&a.gpu)
        .cloned()
        .ok_or_else(|| CliError::Config(format!("unknown GPU model {:?}", a.gpu)))?;
    let id = WorkerId::new(a.id.unwrap_or_else(|| format!("w-{}", std::process::id())));
    let fs_url = a.fs.unwrap_or_else(|| format!("http://127.0.0.1:{}", cfg.ports.fs));
    let mut opts = WorkerOptions::from_config(&cfg, id, gpu, a.scheduler.unwrap_or(local(cfg.ports.scheduler)), fs_url);
    if let Some(p) = a.peer_listen {
        opts.peer_listen = p;
    }
    opts.cache_dir = a.cache_dir;
    opts.connect_attempts = a.retries;
    match tokio_rt()?.block_on(run_worker(opts)) {
        Ok(WorkerExit::Shutdown) => Ok(()),
        Err(e) => Err(runtime(e)),
    }
}

#[derive(Debug, Args)]
pub struct FactoryArgs {
    /// Trace file (JSON lines); otherwise generated from --scenario/--seed.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value = "static20")]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Scheduler worker port [default: 127.0.0.1:<ports.scheduler>].
    #[arg(long)]
    pub scheduler: Option<SocketAddr>,
    /// Scheduler control plane [default: 127.0.0.1:<ports.http>].
    #[arg(long)]
    pub http: Option<String>,
    /// Filesystem emulator listen address [default: 127.0.0.1:<ports.fs>].
    #[arg(long)]
    pub fs_listen: Option<SocketAddr>,
    /// Run workers as tasks in this process instead of child processes.
    #[arg(long)]
    pub in_process: bool,
    /// Root for per-worker cache directories.
    #[arg(long)]
    pub cache_root: Option<PathBuf>,
    /// Factory event log, one JSON object per line.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn factory_cmd(g: &Global, a: FactoryArgs) -> Result<(), CliError> {
    let cfg = config(g)?;
    let trace = match &a.trace {
        Some(p) => load_trace(p, &cfg)?,
        None => generate_trace(a.scenario, a.seed, &cfg.catalog()).map_err(|e| CliError::Config(e.to_string()))?,
    };
    let sched_addr = a.scheduler.unwrap_or(local(cfg.ports.scheduler));
    let http = a
        .http
        .clone()
        .unwrap_or_else(|| format!("127.0.0.1:{}", cfg.ports.http));
    tokio_rt()?.block_on(async move {
        let clock = EmuClock::start(cfg.cost.time_scale);
        let fs_server = fs::start(
            a.fs_listen.unwrap_or(local(cfg.ports.fs)),
            cfg.cost.fs_aggregate_bandwidth,
            cfg.cost.fs_max_concurrent_ops,
            clock,
        )
        .await
        .map_err(runtime)?;
        println!("factory fs={} events={}", fs_server.url(), trace.len());
        let mode = if a.in_process {
            SpawnMode::InProcess {
                config: cfg.clone(),
                scheduler: sched_addr,
                fs_url: fs_server.url(),
                cache_root: a.cache_root.clone(),
            }
        } else {
            let program = std::env::current_exe().map_err(runtime)?;
            let mut args = vec![
                "worker".into(),
                "--scheduler".into(),
                sched_addr.to_string(),
                "--fs".into(),
                fs_server.url(),
            ];
            if let Some(c) = &g.config {
                args.push("--config".into());
                args.push(std::fs::canonicalize(c).unwrap_or(c.clone()).display().to_string());
            }
            if let Some(ts) = g.time_scale {
                args.push("--time-scale".into());
                args.push(ts.to_string());
            }
            SpawnMode::Process {
                program,
                args,
                cache_root: a.cache_root.clone(),
            }
        };
        let client = SchedulerClient::new(&http);
        let mut factory = Factory::new(clock, cfg.catalog(), mode, a.seed).with_scheduler(client.clone());
        tokio::select! {
            _ = factory.run_trace(&trace) => {
                // keep the pool alive until the scheduler goes away
                loop {
                    tokio::select! {
                        _ = tokio::time::sleep(Duration::from_millis(500)) => {}
                        _ = tokio::signal::ctrl_c() => break,
                    }
                    if !client.healthy().await {
                        break;
                    }
                }
            }
            _ = tokio::signal::ctrl_c() => {}
        }
        factory.kill_all().await;
        if let Some(p) = &a.log {
            create(p)?.write_all(factory.log_jsonl().as_bytes()).map_err(runtime)?;
        }
        fs_server.stop();
        Ok(())
    })
}

#[derive(Debug, Subcommand)]
pub enum TraceAction {
    /// Write a seeded scenario trace as JSON lines.
    Generate {
        scenario: Scenario,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a trace file and print its summary.
    Inspect { file: PathBuf },
}

fn trace_cmd(g: &Global, action: TraceAction) -> Result<(), CliError> {
    let cfg = config(g)?;
    match action {
        TraceAction::Generate { scenario, seed, out } => {
            let trace = generate_trace(scenario, seed, &cfg.catalog()).map_err(runtime)?;
            let text = pcm_core::factory::trace_to_string(&trace);
            match out {
                Some(p) => create(&p)?.write_all(text.as_bytes()).map_err(runtime),
                None => std::io::stdout().write_all(text.as_bytes()).map_err(runtime),
            }
        }
        TraceAction::Inspect { file } => {
            let trace = load_trace(&file, &cfg)?;
            let s = summarize_trace(&trace);
            println!("{}", serde_json::to_string_pretty(&s).map_err(runtime)?);
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Discrete-event driver on a virtual clock.
    Sim,
    /// Real sockets and timers scaled by time_scale.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Spawn {
    InProcess,
    Process,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "static20")]
    pub scenario: Scenario,
    #[arg(long, default_value = "full")]
    pub awareness: Awareness,
    #[arg(long, default_value_t = 100)]
    pub batch_size: u64,
    /// Total inference items; the full application is 150000.
    #[arg(long, default_value_t = 15_000)]
    pub items: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Replay this trace instead of generating one for --scenario.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub event_log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Sim)]
    pub mode: Mode,
    /// Worker placement in live mode.
    #[arg(long, value_enum, default_value_t = Spawn::InProcess)]
    pub spawn: Spawn,
    /// Every install reads the shared filesystem.
    #[arg(long)]
    pub no_peer_transfer: bool,
}

fn run_cmd(g: &Global, a: RunArgs) -> Result<(), CliError> {
    let mut cfg = config(g)?;
    if a.no_peer_transfer {
        cfg.scheduler.peer_transfer = false;
    }
    if a.batch_size < 1 {
        return Err(CliError::Config("--batch-size must be at least 1".into()));
    }
    let spec = ExperimentSpec::new(a.scenario, a.awareness, a.batch_size)
        .items(a.items)
        .seed(a.seed);
    let trace = match &a.trace {
        Some(p) => load_trace(p, &cfg)?,
        None => generate_trace(spec.scenario, spec.seed, &cfg.catalog()).map_err(runtime)?,
    };
    let (report, samples, log): (ExperimentReport, Vec<Sample>, Vec<String>) = match a.mode {
        Mode::Sim => {
            let mut settings = pcm_core::sim::SimSettings::from_config(&cfg, spec.seed);
            settings.event_log = a.event_log.is_some();
            let recipe = pcm_core::model::ContextRecipe::default_llm();
            let tasks = harness::build_tasks(
                spec.total_items,
                spec.batch_size,
                spec.awareness,
                &recipe,
                cfg.task_resources,
            )
            .map_err(runtime)?;
            let out = pcm_core::sim::simulate(settings, recipe, tasks, trace).map_err(runtime)?;
            let log = out.log.iter().map(|e| e.to_json_line()).collect();
            (out.report, out.samples, log)
        }
        Mode::Live => {
            let spawn = match a.spawn {
                Spawn::InProcess => WorkerSpawn::InProcess,
                Spawn::Process => WorkerSpawn::Process {
                    program: std::env::current_exe().map_err(runtime)?,
                    config_path: g.config.as_ref().map(|c| std::fs::canonicalize(c).unwrap_or(c.clone())),
                },
            };
            let opts = LiveOptions {
                spawn,
                event_log: a.event_log.clone(),
                ..LiveOptions::default()
            };
            let out = tokio_rt()?
                .block_on(run_live(&spec, &cfg, trace, opts))
                .map_err(runtime)?;
            (out.report, out.samples, Vec::new())
        }
    };

    let mut w = create(&a.out)?;
    harness::write_csv(&samples, &mut w).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    if let Some(p) = &a.report {
        let mut f = create(p)?;
        serde_json::to_writer_pretty(&mut f, &report).map_err(runtime)?;
        f.flush().map_err(runtime)?;
    }
    if let (Some(p), false) = (&a.event_log, log.is_empty()) {
        let mut f = create(p)?;
        for line in &log {
            writeln!(f, "{line}").map_err(runtime)?;
        }
        f.flush().map_err(runtime)?;
    }
    println!(
        "{} {} B={} items={}: end_to_end={:.1}s credited={}/{} installs fs={} peer={} requeues={} peak_workers={}",
        spec.scenario,
        spec.awareness,
        spec.batch_size,
        spec.total_items,
        report.end_to_end,
        report.credited_items,
        report.submitted_items,
        report.fs_installs(),
        report.peer_installs(),
        report.requeues,
        report.peak_connected,
    );
    match report.aborted {
        Some(why) => Err(CliError::Deadlock(why)),
        None => Ok(()),
    }
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    /// Scheduler control plane [default: 127.0.0.1:<ports.http>].
    #[arg(long)]
    pub http: Option<String>,
    #[arg(long, default_value = "full")]
    pub awareness: Awareness,
    #[arg(long, default_value_t = 100)]
    pub batch_size: u64,
    #[arg(long, default_value_t = 15_000)]
    pub items: u64,
    /// Block until the workload drains or deadlocks, then write the metrics CSV here.
    #[arg(long)]
    pub wait: Option<PathBuf>,
}

fn control_plane(cfg: &Config, http: Option<String>) -> SchedulerClient {
    SchedulerClient::new(&http.unwrap_or_else(|| format!("127.0.0.1:{}", cfg.ports.http)))
}

fn submit_cmd(g: &Global, a: SubmitArgs) -> Result<(), CliError> {
    let cfg = config(g)?;
    let recipe = pcm_core::model::ContextRecipe::default_llm();
    let tasks =
        harness::build_tasks(a.items, a.batch_size, a.awareness, &recipe, cfg.task_resources).map_err(runtime)?;
    let client = control_plane(&cfg, a.http);
    tokio_rt()?.block_on(async move {
        client.register_recipe(&recipe).await.map_err(runtime)?;
        let accepted = client.submit(&tasks).await.map_err(runtime)?.accepted;
        println!("submitted {accepted} tasks, {} items", a.items);
        let Some(out) = a.wait else { return Ok(()) };
        let mut deadlock_since: Option<std::time::Instant> = None;
        let status = loop {
            tokio::time::sleep(Duration::from_millis(200)).await;
            let s = client.status().await.map_err(runtime)?;
            if s.drained {
                break s;
            }
            match (&s.deadlock, deadlock_since) {
                (Some(_), None) => deadlock_since = Some(std::time::Instant::now()),
                (Some(_), Some(t)) if t.elapsed() >= Duration::from_secs(1) => break s,
                (None, _) => deadlock_since = None,
                _ => {}
            }
        };
        create(&out)?
            .write_all(client.metrics_csv().await.map_err(runtime)?.as_bytes())
            .map_err(runtime)?;
        println!(
            "credited {}/{} items at t={:.1}s",
            status.credited_items, status.submitted_items, status.now
        );
        match status.deadlock {
            Some(why) if !status.drained => Err(CliError::Deadlock(why)),
            _ => Ok(()),
        }
    })
}

#[derive(Debug, Args)]
pub struct StatusArgs {
    /// Scheduler control plane [default: 127.0.0.1:<ports.http>].
    #[arg(long)]
    pub http: Option<String>,
    /// Also list the connected workers.
    #[arg(long)]
    pub workers: bool,
}

fn status_cmd(g: &Global, a: StatusArgs) -> Result<(), CliError> {
    let cfg = config(g)?;
    let client = control_plane(&cfg, a.http);
    tokio_rt()?.block_on(async move {
        let status = client.status().await.map_err(runtime)?;
        println!("{}", serde_json::to_string_pretty(&status).map_err(runtime)?);
        if a.workers {
            println!(
                "{}",
                serde_json::to_string_pretty(&client.workers().await.map_err(runtime)?).map_err(runtime)?
            );
        }
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct StopArgs {
    /// Scheduler control plane [default: 127.0.0.1:<ports.http>].
    #[arg(long)]
    pub http: Option<String>,
}

fn stop_cmd(g: &Global, a: StopArgs) -> Result<(), CliError> {
    let cfg = config(g)?;
    let client = control_plane(&cfg, a.http);
    tokio_rt()?.block_on(client.shutdown()).map_err(runtime)
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Metrics CSVs; reductions are relative to the first.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Throughput regression bin width, emulated seconds.
    #[arg(long, default_value_t = 60.0)]
    pub bin: f64,
    /// Only bins that end before this fraction of the final count enter the regression.
    #[arg(long, default_value_t = 0.8)]
    pub cutoff: f64,
}

fn read_series(path: &Path) -> Result<(String, Vec<Sample>), CliError> {
    let f = File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let samples = harness::read_csv(BufReader::new(f)).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((name, samples))
}

fn summarize_cmd(a: SummarizeArgs) -> Result<(), CliError> {
    let series = a.files.iter().map(|p| read_series(p)).collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<_> = series
        .iter()
        .map(|(n, s)| summarize::SeriesSummary::from_samples(n, s))
        .collect();
    print!("{}", summarize::comparison_table(&rows));
    println!();
    for (name, samples) in &series {
        match summarize::throughput_regression(samples, a.bin, a.cutoff) {
            Some(r) => println!(
                "{name}: throughput = {:.4} * warm_workers + {:.4} items/s (R^2 {:.3}, {} bins)",
                r.slope, r.intercept, r.r_squared, r.points
            ),
            None => println!("{name}: too few varying bins for a throughput regression"),
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long, default_value = "fig.svg")]
    pub out: PathBuf,
    #[arg(long, default_value = "Completed inferences over time")]
    pub title: String,
}

fn plot_cmd(a: PlotArgs) -> Result<(), CliError> {
    let series = a.files.iter().map(|p| read_series(p)).collect::<Result<Vec<_>, _>>()?;
    let svg = plot::completion_svg(&a.title, &series);
    create(&a.out)?.write_all(svg.as_bytes()).map_err(runtime)?;
    Ok(())
}
