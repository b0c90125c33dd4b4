//! Runs an experiment with real sockets and timers: scheduler service,
//! filesystem emulator and factory in this process, workers as tasks or as
//! child processes.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use pcm_client::{ClientError, SchedulerClient};
use pcm_core::config::Config;
use pcm_core::factory::TraceEvent;
use pcm_core::harness::{build_tasks, read_csv, ExperimentSpec, HarnessError};
use pcm_core::model::ContextRecipe;
use pcm_core::scheduler::ExperimentReport;
use pcm_core::sim::Sample;
use thiserror::Error;

use crate::clock::EmuClock;
use crate::factory::{Factory, FactoryEvent, SpawnMode};
use crate::{fs, scheduler};

/// How long a deadlock must persist before the run is abandoned; covers the
/// gap between a worker being spawned and its registration.
const DEADLOCK_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum LiveError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
}

#[derive(Debug, Clone)]
pub enum WorkerSpawn {
    InProcess,
    /// Runs `program worker …` per arrival.
    Process {
        program: PathBuf,
        config_path: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
pub struct LiveOptions {
    pub spawn: WorkerSpawn,
    pub event_log: Option<PathBuf>,
    pub cache_root: Option<PathBuf>,
    /// Wall-clock limit for the whole run.
    pub timeout: Duration,
    /// Stop once credited items reach this many, instead of draining.
    pub stop_after_items: Option<u64>,
}

impl Default for LiveOptions {
    fn default() -> Self {
        LiveOptions {
            spawn: WorkerSpawn::InProcess,
            event_log: None,
            cache_root: None,
            timeout: Duration::from_secs(600),
            stop_after_items: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiveOutcome {
    pub report: ExperimentReport,
    pub samples: Vec<Sample>,
    pub factory_log: Vec<FactoryEvent>,
}

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

pub async fn run_live(
    spec: &ExperimentSpec,
    cfg: &Config,
    trace: Vec<TraceEvent>,
    opts: LiveOptions,
) -> Result<LiveOutcome, LiveError> {
    let recipe = ContextRecipe::default_llm();
    let tasks = build_tasks(
        spec.total_items,
        spec.batch_size,
        spec.awareness,
        &recipe,
        cfg.task_resources,
    )?;

    let clock = EmuClock::start(cfg.cost.time_scale);
    let fs_server = fs::start(
        loopback(),
        cfg.cost.fs_aggregate_bandwidth,
        cfg.cost.fs_max_concurrent_ops,
        clock,
    )
    .await?;
    let sched = scheduler::start_with_clock(
        scheduler::SchedulerOptions {
            config: cfg.clone(),
            worker_listen: loopback(),
            http_listen: loopback(),
            event_log: opts.event_log.clone(),
        },
        Some(clock),
    )
    .await?;
    let client = SchedulerClient::new(&sched.http_url());
    client.register_recipe(&recipe).await?;
    client.submit(&tasks).await?;

    let mode = match &opts.spawn {
        WorkerSpawn::InProcess => SpawnMode::InProcess {
            config: cfg.clone(),
            scheduler: sched.worker_addr,
            fs_url: fs_server.url(),
            cache_root: opts.cache_root.clone(),
        },
        WorkerSpawn::Process { program, config_path } => {
            let mut args = vec![
                "worker".to_string(),
                "--scheduler".to_string(),
                sched.worker_addr.to_string(),
                "--fs".to_string(),
                fs_server.url(),
            ];
            if let Some(p) = config_path {
                args.push("--config".to_string());
                args.push(p.display().to_string());
            }
            SpawnMode::Process {
                program: program.clone(),
                args,
                cache_root: opts.cache_root.clone(),
            }
        }
    };
    let mut factory = Factory::new(clock, cfg.catalog(), mode, spec.seed).with_scheduler(client.clone());

    let started = tokio::time::Instant::now();
    let outcome = {
        let mut trace_run = Box::pin(factory.run_trace(&trace));
        let mut trace_done = false;
        let mut deadlock_since: Option<tokio::time::Instant> = None;
        let mut poll = tokio::time::interval(Duration::from_millis(20));
        loop {
            tokio::select! {
                _ = &mut trace_run, if !trace_done => { trace_done = true; continue; }
                _ = poll.tick() => {}
            }
            if started.elapsed() > opts.timeout {
                break Err(LiveError::Timeout(opts.timeout));
            }
            let status = client.status().await?;
            if status.drained || opts.stop_after_items.is_some_and(|n| status.credited_items >= n) {
                break Ok(());
            }
            match (&status.deadlock, deadlock_since) {
                (Some(_), None) => deadlock_since = Some(tokio::time::Instant::now()),
                (Some(_), Some(since)) if since.elapsed() >= DEADLOCK_GRACE => break Ok(()),
                (None, _) => deadlock_since = None,
                _ => {}
            }
        }
    };

    let result = match outcome {
        Ok(()) => {
            let report = client.report().await?;
            let samples = read_csv(client.metrics_csv().await?.as_bytes())?;
            Ok(LiveOutcome {
                report,
                samples,
                factory_log: factory.log().to_vec(),
            })
        }
        Err(e) => Err(e),
    };
    sched.shutdown().await;
    factory.kill_all().await;
    fs_server.stop();
    result
}
