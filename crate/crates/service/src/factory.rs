//! Replays a trace against a live scheduler: spawns a worker per ARRIVE and
//! kills the chosen victim outright on PREEMPT.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::Stdio;

use pcm_client::SchedulerClient;
use pcm_core::config::Config;
use pcm_core::factory::{select_victim, LiveWorker, TraceEvent, TraceKind};
use pcm_core::model::{GpuCatalog, WorkerId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tokio::task::JoinHandle;

use crate::clock::EmuClock;
use crate::worker::{run_worker, WorkerOptions};

#[derive(Debug, Clone)]
pub enum SpawnMode {
    /// Workers run as tasks of this process; a kill aborts the task.
    InProcess {
        config: Config,
        scheduler: SocketAddr,
        fs_url: String,
        cache_root: Option<PathBuf>,
    },
    /// Workers are child processes in their own process group; a kill is
    /// SIGKILL to the group. `args` precede `--id <id> --gpu <model>`.
    Process {
        program: PathBuf,
        args: Vec<String>,
        cache_root: Option<PathBuf>,
    },
}

enum Handle {
    Task(JoinHandle<()>),
    Process(tokio::process::Child),
}

impl Handle {
    fn finished(&mut self) -> bool {
        match self {
            Handle::Task(h) => h.is_finished(),
            Handle::Process(c) => !matches!(c.try_wait(), Ok(None)),
        }
    }

    async fn kill(self) {
        match self {
            Handle::Task(h) => {
                h.abort();
                let _ = h.await;
            }
            Handle::Process(mut c) => {
                if let Some(pid) = c.id() {
                    // SAFETY: plain syscall on a process group this factory created.
                    unsafe {
                        libc::killpg(pid as libc::pid_t, libc::SIGKILL);
                    }
                }
                let _ = c.wait().await;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactoryEvent {
    pub t: f64,
    pub event: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpu_model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub struct Factory {
    clock: EmuClock,
    catalog: GpuCatalog,
    mode: SpawnMode,
    rng: ChaCha8Rng,
    scheduler: Option<SchedulerClient>,
    live: Vec<(LiveWorker, Handle)>,
    next_id: u64,
    log: Vec<FactoryEvent>,
}

impl Factory {
    pub fn new(clock: EmuClock, catalog: GpuCatalog, mode: SpawnMode, seed: u64) -> Self {
        Factory {
            clock,
            catalog,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scheduler: None,
            live: Vec::new(),
            next_id: 0,
            log: Vec::new(),
        }
    }

    /// Reports pending arrivals to the scheduler, which needs them to tell a
    /// depleted pool from a pause.
    pub fn with_scheduler(mut self, client: SchedulerClient) -> Self {
        self.scheduler = Some(client);
        self
    }

    pub fn log(&self) -> &[FactoryEvent] {
        &self.log
    }

    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }

    fn record(&mut self, event: &'static str, worker: Option<&WorkerId>, gpu: Option<&str>, detail: Option<String>) {
        tracing::info!(
            event,
            worker = worker.map(|w| w.as_str()),
            gpu,
            detail = detail.as_deref(),
            "factory"
        );
        self.log.push(FactoryEvent {
            t: self.clock.now(),
            event,
            worker_id: worker.map(|w| w.0.clone()),
            gpu_model: gpu.map(str::to_string),
            detail,
        });
    }

    fn reap(&mut self) {
        self.live.retain_mut(|(_, h)| !h.finished());
    }

    /// Workers still running, oldest first.
    pub fn alive(&mut self) -> Vec<LiveWorker> {
        self.reap();
        self.live.iter().map(|(w, _)| w.clone()).collect()
    }

    pub fn spawn(&mut self, gpu_name: &str) -> Result<WorkerId, String> {
        let id = WorkerId::new(format!("w{}", self.next_id));
        let seq = self.next_id;
        self.next_id += 1;
        let Some(gpu) = self.catalog.get(gpu_name).cloned() else {
            let detail = format!("unknown GPU model {gpu_name:?}");
            self.record("spawn_failed", Some(&id), Some(gpu_name), Some(detail.clone()));
            return Err(detail);
        };
        let handle = match &self.mode {
            SpawnMode::InProcess {
                config,
                scheduler,
                fs_url,
                cache_root,
            } => {
                let mut opts = WorkerOptions::from_config(config, id.clone(), gpu, *scheduler, fs_url.clone());
                opts.cache_dir = cache_root.as_ref().map(|r| r.join(&id.0));
                Handle::Task(tokio::spawn(async move {
                    let _ = run_worker(opts).await;
                }))
            }
            SpawnMode::Process {
                program,
                args,
                cache_root,
            } => {
                let mut cmd = tokio::process::Command::new(program);
                cmd.args(args).args(["--id", &id.0, "--gpu", gpu_name]);
                if let Some(root) = cache_root {
                    cmd.arg("--cache-dir").arg(root.join(&id.0));
                }
                cmd.process_group(0)
                    .stdin(Stdio::null())
                    .stdout(Stdio::null())
                    .kill_on_drop(true);
                match cmd.spawn() {
                    Ok(child) => Handle::Process(child),
                    Err(e) => {
                        self.record("spawn_failed", Some(&id), Some(gpu_name), Some(e.to_string()));
                        return Err(e.to_string());
                    }
                }
            }
        };
        self.live.push((
            LiveWorker {
                id: id.clone(),
                gpu: gpu_name.to_string(),
                seq,
            },
            handle,
        ));
        self.record("arrive", Some(&id), Some(gpu_name), None);
        Ok(id)
    }

    /// Kills `id` with no warning. False if it was not running.
    pub async fn kill(&mut self, id: &WorkerId) -> bool {
        self.reap();
        let Some(pos) = self.live.iter().position(|(w, _)| &w.id == id) else {
            return false;
        };
        let (w, handle) = self.live.remove(pos);
        handle.kill().await;
        self.record("preempt", Some(&w.id), Some(&w.gpu), None);
        true
    }

    pub async fn apply(&mut self, ev: &TraceEvent) {
        match ev.kind {
            TraceKind::Arrive => {
                let gpu = ev.gpu_model.clone().unwrap_or_default();
                let _ = self.spawn(&gpu);
            }
            TraceKind::Preempt => {
                let alive = self.alive();
                let policy = ev
                    .victim_policy
                    .clone()
                    .unwrap_or(pcm_core::factory::VictimPolicy::Random);
                match select_victim(&policy, &alive, &mut self.rng) {
                    Some(victim) => {
                        self.kill(&victim).await;
                    }
                    None => self.record("no_victim", None, None, Some(format!("{policy:?}"))),
                }
            }
        }
    }

    /// Applies every event at its emulated time.
    pub async fn run_trace(&mut self, trace: &[TraceEvent]) {
        let mut pending = trace.iter().filter(|e| e.kind == TraceKind::Arrive).count() as u64;
        self.report_pending(pending).await;
        for ev in trace {
            self.clock.sleep_until(ev.at).await;
            self.apply(ev).await;
            if ev.kind == TraceKind::Arrive {
                pending -= 1;
                self.report_pending(pending).await;
            }
        }
    }

    async fn report_pending(&self, pending: u64) {
        if let Some(c) = &self.scheduler {
            let _ = c.set_pending_arrivals(pending).await;
        }
    }

    pub async fn kill_all(&mut self) {
        for (_, h) in self.live.drain(..) {
            h.kill().await;
        }
    }
}

impl Drop for Factory {
    fn drop(&mut self) {
        for (_, h) in &self.live {
            if let Handle::Task(t) = h {
                t.abort();
            }
        }
    }
}
