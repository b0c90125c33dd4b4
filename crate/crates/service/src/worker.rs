//! Live worker runtime: drives a [`WorkerNode`] against real sockets and timers.
//!
//! Three duties run side by side: the scheduler session (directives in,
//! replies and heartbeats out), the peer-serve listener, and the executor of
//! the one job in flight. Every task lives in a `JoinSet` owned by
//! [`run_worker`], so dropping or aborting that future tears the whole worker
//! down at once, sockets included.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use pcm_client::FsClient;
use pcm_core::config::Config;
use pcm_core::cost::{CostModel, Stage};
use pcm_core::model::{GpuModel, ResourceRequest, WorkerId};
use pcm_core::protocol::{InstallFailure, InvokeFailure, Message};
use pcm_core::worker::{Job, Step, WorkerError, WorkerNode};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinSet;
use tokio::time::Instant;

use crate::clock::EmuClock;
use crate::framed::{write_frame, FrameReader};
use crate::scheduler::effective_heartbeat;

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub worker_id: WorkerId,
    pub gpu: GpuModel,
    pub capacity: ResourceRequest,
    pub cost: CostModel,
    pub max_peer_serves: u32,
    pub scheduler: SocketAddr,
    pub fs_url: String,
    pub peer_listen: SocketAddr,
    pub cache_dir: Option<PathBuf>,
    pub connect_attempts: u32,
    /// Emulated seconds between heartbeats.
    pub heartbeat_interval: f64,
    /// Emulated seconds to wait on a silent peer before falling back to the filesystem.
    pub peer_timeout: f64,
}

impl WorkerOptions {
    pub fn from_config(
        cfg: &Config,
        worker_id: WorkerId,
        gpu: GpuModel,
        scheduler: SocketAddr,
        fs_url: String,
    ) -> Self {
        let (interval, timeout) = effective_heartbeat(cfg);
        WorkerOptions {
            worker_id,
            gpu,
            capacity: cfg.worker_capacity,
            cost: cfg.cost.clone(),
            max_peer_serves: cfg.scheduler.max_concurrent_peer_serves,
            scheduler,
            fs_url,
            peer_listen: SocketAddr::from(([127, 0, 0, 1], cfg.ports.peer_base)),
            cache_dir: None,
            connect_attempts: 8,
            heartbeat_interval: interval,
            peer_timeout: timeout,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkerRunError {
    #[error("scheduler at {0} unreachable after {1} attempts")]
    Unreachable(SocketAddr, u32),
    #[error("scheduler closed the connection")]
    SchedulerGone,
    #[error("worker setup: {0}")]
    Setup(#[from] WorkerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the session ended when it ended cleanly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerExit {
    Shutdown,
}

type Node = Arc<Mutex<WorkerNode>>;

async fn connect(addr: SocketAddr, attempts: u32) -> Result<TcpStream, WorkerRunError> {
    let mut delay = Duration::from_millis(50);
    for attempt in 1..=attempts.max(1) {
        match TcpStream::connect(addr).await {
            Ok(s) => return Ok(s),
            Err(_) if attempt < attempts => {
                tokio::time::sleep(delay).await;
                delay = (delay * 2).min(Duration::from_secs(2));
            }
            Err(_) => break,
        }
    }
    Err(WorkerRunError::Unreachable(addr, attempts))
}

pub async fn run_worker(opts: WorkerOptions) -> Result<WorkerExit, WorkerRunError> {
    let clock = EmuClock::start(opts.cost.time_scale);
    let peer_listener = TcpListener::bind(opts.peer_listen).await?;
    let peer_addr = peer_listener.local_addr()?;
    let mut node = WorkerNode::new(
        opts.worker_id.clone(),
        opts.gpu.clone(),
        opts.capacity,
        opts.cost.clone(),
        opts.max_peer_serves,
    )
    .with_peer_address(peer_addr.to_string());
    if let Some(dir) = &opts.cache_dir {
        node = node.with_cache_dir(dir)?;
    }
    let register = node.register_message();
    let node: Node = Arc::new(Mutex::new(node));

    let stream = connect(opts.scheduler, opts.connect_attempts).await?;
    let _ = stream.set_nodelay(true);
    let (read, mut write) = stream.into_split();
    let mut tasks = JoinSet::new();

    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    out_tx.send(register).expect("receiver alive");
    tasks.spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if write_frame(&mut write, &msg).await.is_err() {
                break;
            }
        }
    });

    let hb_tx = out_tx.clone();
    let hb_id = opts.worker_id.clone();
    let hb_every = clock.wall(opts.heartbeat_interval);
    tasks.spawn(async move {
        let mut ticker = tokio::time::interval(hb_every);
        ticker.tick().await;
        loop {
            ticker.tick().await;
            let msg = Message::Heartbeat {
                worker_id: hb_id.clone(),
                emulated_clock: clock.now(),
            };
            if hb_tx.send(msg).is_err() {
                break;
            }
        }
    });

    let serve_node = node.clone();
    tasks.spawn(serve_peers(peer_listener, serve_node));

    let exec = Executor {
        node: node.clone(),
        clock,
        fs: FsClient::new(&opts.fs_url),
        peer_bandwidth: opts.cost.peer_bandwidth,
        peer_timeout: opts.peer_timeout,
    };
    let mut frames = FrameReader::new(read);
    let mut running: Option<tokio::task::AbortHandle> = None;
    let (done_tx, mut done_rx) = mpsc::unbounded_channel::<()>();
    loop {
        let msg = tokio::select! {
            biased;
            Some(()) = done_rx.recv() => {
                running = None;
                continue;
            }
            m = frames.next() => m,
        };
        let msg = match msg {
            Ok(Some(m)) => m,
            Ok(None) => return Err(WorkerRunError::SchedulerGone),
            Err(e) if !e.is_fatal() => continue,
            Err(_) => return Err(WorkerRunError::SchedulerGone),
        };
        let now = clock.now();
        let busy = running.is_some();
        let job = match msg {
            Message::Shutdown {} => return Ok(WorkerExit::Shutdown),
            Message::InstallContext { recipe, source } => {
                let context_id = recipe.context_id.clone();
                let r = if busy {
                    Err(InstallFailure::Busy)
                } else {
                    node.lock().unwrap().begin_install(recipe, source, now)
                };
                r.map_err(|reason| Message::InstallFailed { context_id, reason })
            }
            Message::Invoke {
                task_id,
                attempt,
                context_id,
                awareness,
                items,
                inputs,
            } => {
                let r = if busy {
                    Err(InvokeFailure::Busy)
                } else {
                    node.lock()
                        .unwrap()
                        .begin_invoke(task_id, attempt, awareness, context_id, items, inputs, now)
                };
                r.map_err(|reason| Message::InvokeFailed {
                    task_id,
                    attempt,
                    reason,
                })
            }
            _ => continue,
        };
        match job {
            Ok(job) => {
                let exec = exec.clone();
                let out = out_tx.clone();
                let done = done_tx.clone();
                running = Some(tasks.spawn(async move {
                    let job = exec.run(job).await;
                    let invocation = job.invocation();
                    let reply = exec.node.lock().unwrap().finish(job, exec.clock.now());
                    // free before replying: the next directive can follow the reply closely
                    let _ = done.send(());
                    let _ = out.send(reply);
                    if let Some((task, attempt)) = invocation {
                        exec.node.lock().unwrap().reap(task, attempt);
                    }
                }));
            }
            Err(reply) => {
                let _ = out_tx.send(reply);
            }
        }
    }
}

#[derive(Clone)]
struct Executor {
    node: Node,
    clock: EmuClock,
    fs: FsClient,
    peer_bandwidth: f64,
    peer_timeout: f64,
}

impl Executor {
    /// Runs every step; local work sleeps against a running deadline so timer
    /// granularity does not accumulate across short steps.
    async fn run(&self, mut job: Job) -> Job {
        let mut deadline = Instant::now();
        while let Some(step) = job.next_step() {
            match step {
                Step::Work { stage, seconds } => {
                    deadline += self.clock.wall(seconds);
                    tokio::time::sleep_until(deadline).await;
                    job.record(stage, seconds);
                }
                Step::FsFetch { bytes } => {
                    let t0 = self.clock.now();
                    loop {
                        match self.fs.fetch(bytes).await {
                            Ok(_) => break,
                            Err(_) => tokio::time::sleep(Duration::from_millis(100)).await,
                        }
                    }
                    job.record(Stage::FsFetch, self.clock.now() - t0);
                    deadline = Instant::now();
                }
                Step::PeerFetch {
                    address,
                    context_id,
                    bytes,
                } => {
                    let t0 = self.clock.now();
                    match self.peer_fetch(&address, context_id).await {
                        Ok(()) => job.record(Stage::PeerTransfer, self.clock.now() - t0),
                        Err(()) => job.fall_back_to_fs(bytes, self.clock.now() - t0),
                    }
                    deadline = Instant::now();
                }
            }
        }
        job
    }

    /// Copies the template from `address`; the holder keeps its serve slot
    /// until this connection closes.
    async fn peer_fetch(&self, address: &str, context_id: pcm_core::model::ContextId) -> Result<(), ()> {
        let patience = self.clock.wall(self.peer_timeout);
        let stream = tokio::time::timeout(patience, TcpStream::connect(address))
            .await
            .map_err(|_| ())?
            .map_err(|_| ())?;
        let _ = stream.set_nodelay(true);
        let (read, mut write) = stream.into_split();
        write_frame(&mut write, &Message::TransferGet { context_id })
            .await
            .map_err(|_| ())?;
        let mut frames = FrameReader::new(read);
        let declared = match tokio::time::timeout(patience, frames.next()).await {
            Ok(Ok(Some(Message::TransferData { declared_bytes, .. }))) => declared_bytes,
            _ => return Err(()),
        };
        let transfer = self.clock.wall(declared as f64 / self.peer_bandwidth);
        // the holder dying mid-transfer shows up as the stream closing
        tokio::select! {
            _ = tokio::time::sleep(transfer) => Ok(()),
            _ = frames.next() => Err(()),
        }
    }
}

async fn serve_peers(listener: TcpListener, node: Node) {
    let mut serves = JoinSet::new();
    loop {
        let Ok((stream, _)) = listener.accept().await else {
            continue;
        };
        while serves.try_join_next().is_some() {}
        let node = node.clone();
        serves.spawn(async move {
            let _ = stream.set_nodelay(true);
            let (read, mut write) = stream.into_split();
            let mut frames = FrameReader::new(read);
            let Ok(Some(Message::TransferGet { context_id })) = frames.next().await else {
                return;
            };
            let accepted = node.lock().unwrap().serve_peer(&context_id);
            let reply = match accepted {
                Ok(declared_bytes) => Message::TransferData {
                    context_id: context_id.clone(),
                    declared_bytes,
                },
                Err(reason) => Message::TransferError { context_id, reason },
            };
            let ok = write_frame(&mut write, &reply).await.is_ok();
            if accepted.is_ok() {
                if ok {
                    // the requester hangs up when its copy is complete
                    while let Ok(Some(_)) = frames.next().await {}
                }
                node.lock().unwrap().end_serve();
            }
        });
    }
}
