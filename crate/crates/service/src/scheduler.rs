//! The scheduler as a network service.
//!
//! One actor task owns the [`Scheduler`] state machine; socket readers and
//! HTTP handlers talk to it over a channel, and per-connection writer tasks
//! take its outgoing messages, so the actor never waits on the network.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pcm_client::{Accepted, PendingArrivals, Status, WorkerSummary};
use pcm_core::config::Config;
use pcm_core::harness::metrics::csv_string;
use pcm_core::model::{ContextRecipe, TaskSpec, WorkerId};
use pcm_core::protocol::Message;
use pcm_core::scheduler::{ExperimentReport, LogEvent, Scheduler, SubmitError};
use pcm_core::sim::{Sample, SAMPLE_INTERVAL};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::{AbortHandle, JoinHandle, JoinSet};

use crate::clock::EmuClock;
use crate::framed::{write_frame, FrameReader};

/// Heartbeat timings never go below these wall-clock floors, whatever the
/// time scale; tighter values would be at the mercy of OS scheduling jitter.
pub const MIN_HEARTBEAT_INTERVAL_WALL: f64 = 0.5;
pub const MIN_HEARTBEAT_TIMEOUT_WALL: f64 = 2.0;

/// Heartbeat interval and timeout in emulated seconds, after the wall floors.
pub fn effective_heartbeat(cfg: &Config) -> (f64, f64) {
    let scale = cfg.cost.time_scale;
    let s = &cfg.scheduler;
    (
        s.heartbeat_interval_seconds.max(MIN_HEARTBEAT_INTERVAL_WALL / scale),
        s.heartbeat_timeout_seconds.max(MIN_HEARTBEAT_TIMEOUT_WALL / scale),
    )
}

#[derive(Debug, Clone)]
pub struct SchedulerOptions {
    pub config: Config,
    pub worker_listen: SocketAddr,
    pub http_listen: SocketAddr,
    /// One JSON object per line.
    pub event_log: Option<PathBuf>,
}

type ConnId = u64;

enum Cmd {
    Connected {
        conn: ConnId,
        tx: mpsc::UnboundedSender<Message>,
        flushed: oneshot::Receiver<()>,
        reader: AbortHandle,
    },
    Frame {
        conn: ConnId,
        msg: Message,
    },
    BadFrame {
        conn: ConnId,
        error: String,
    },
    Closed {
        conn: ConnId,
    },
    Recipe {
        recipe: ContextRecipe,
        reply: oneshot::Sender<()>,
    },
    Submit {
        tasks: Vec<TaskSpec>,
        reply: oneshot::Sender<Result<usize, SubmitError>>,
    },
    Status {
        reply: oneshot::Sender<Status>,
    },
    Report {
        reply: oneshot::Sender<ExperimentReport>,
    },
    Metrics {
        reply: oneshot::Sender<String>,
    },
    Workers {
        reply: oneshot::Sender<Vec<WorkerSummary>>,
    },
    Pending {
        pending: u64,
    },
    Shutdown {
        reply: oneshot::Sender<()>,
    },
}

struct Conn {
    tx: mpsc::UnboundedSender<Message>,
    /// Fires once the writer has sent everything queued and the queue closed.
    flushed: oneshot::Receiver<()>,
    reader: AbortHandle,
    worker: Option<WorkerId>,
}

struct Actor {
    sched: Scheduler,
    clock: EmuClock,
    conns: HashMap<ConnId, Conn>,
    by_worker: HashMap<WorkerId, ConnId>,
    samples: Vec<Sample>,
    next_grid: f64,
    pending_arrivals: Option<u64>,
    log: Option<BufWriter<File>>,
}

impl Actor {
    fn sample(&mut self, t: f64) {
        self.samples.push(Sample {
            t_emulated: t,
            completed_items: self.sched.credited_items(),
            connected_workers: self.sched.connected_workers(),
            warm_workers: self.sched.warm_workers(),
        });
    }

    fn log_line(&mut self, ev: &LogEvent) {
        if let Some(w) = &mut self.log {
            let _ = writeln!(w, "{}", ev.to_json_line());
        }
    }

    /// Routes queued messages and records log lines after every event.
    fn flush(&mut self) {
        for out in self.sched.take_outbox() {
            if let Some(conn) = self.by_worker.get(&out.to).and_then(|c| self.conns.get(c)) {
                let _ = conn.tx.send(out.msg);
            }
        }
        for ev in self.sched.take_log() {
            self.log_line(&ev);
        }
    }

    fn drop_conn(&mut self, conn: ConnId, now: f64) {
        let Some(c) = self.conns.remove(&conn) else { return };
        c.reader.abort();
        if let Some(w) = c.worker {
            if self.by_worker.get(&w) == Some(&conn) {
                self.by_worker.remove(&w);
                self.sched.on_worker_lost(&w, now);
            }
        }
    }

    fn status(&self, now: f64) -> Status {
        let ledger = self.sched.ledger();
        let deadlock = match self.pending_arrivals {
            Some(p) if ledger.len() > 0 => self.sched.deadlock_diagnostic(p > 0),
            _ => None,
        };
        Status {
            now,
            tasks: ledger.len(),
            done_tasks: ledger.done_count(),
            submitted_items: self.sched.submitted_items(),
            credited_items: self.sched.credited_items(),
            connected_workers: self.sched.connected_workers(),
            warm_workers: self.sched.warm_workers(),
            drained: self.sched.drained(),
            pending_arrivals: self.pending_arrivals,
            deadlock,
        }
    }

    fn report(&self, now: f64) -> ExperimentReport {
        let status = self.status(now);
        let end = if self.sched.drained() {
            self.sched.last_credit_at().unwrap_or(0.0)
        } else {
            now
        };
        let mut r = self.sched.report(end, status.deadlock);
        r.end_to_end = end;
        r
    }

    /// Returns false once the service should stop.
    fn handle(&mut self, cmd: Cmd) -> bool {
        let now = self.clock.now();
        let before = self.sched.credited_items();
        match cmd {
            Cmd::Connected {
                conn,
                tx,
                flushed,
                reader,
            } => {
                self.conns.insert(
                    conn,
                    Conn {
                        tx,
                        flushed,
                        reader,
                        worker: None,
                    },
                );
            }
            Cmd::Frame { conn, msg } => {
                let Some(c) = self.conns.get_mut(&conn) else {
                    return true;
                };
                let from = match (&msg, &c.worker) {
                    (Message::Register { worker_id, .. }, None) => {
                        c.worker = Some(worker_id.clone());
                        if let Some(old) = self.by_worker.insert(worker_id.clone(), conn) {
                            // same id reconnecting: the old session is gone
                            if let Some(o) = self.conns.remove(&old) {
                                o.reader.abort();
                            }
                            self.sched.on_worker_lost(worker_id, now);
                        }
                        worker_id.clone()
                    }
                    (_, Some(w)) => w.clone(),
                    (_, None) => {
                        self.log_line(&LogEvent::new(now, "message_before_register").detail(msg.type_name()));
                        return true;
                    }
                };
                self.sched.on_message(&from, msg, now);
            }
            Cmd::BadFrame { conn, error } => {
                let mut ev = LogEvent::new(now, "protocol_error").detail(error);
                if let Some(w) = self.conns.get(&conn).and_then(|c| c.worker.clone()) {
                    ev = ev.worker(&w);
                }
                self.log_line(&ev);
            }
            Cmd::Closed { conn } => {
                tracing::debug!(conn, "worker connection closed");
                self.drop_conn(conn, now)
            }
            Cmd::Recipe { recipe, reply } => {
                self.sched.register_recipe(recipe);
                let _ = reply.send(());
            }
            Cmd::Submit { tasks, reply } => {
                let r = self.sched.submit_all(tasks, now);
                if self.samples.is_empty() {
                    self.sample(now);
                }
                let _ = reply.send(r);
            }
            Cmd::Status { reply } => {
                let _ = reply.send(self.status(now));
            }
            Cmd::Report { reply } => {
                let _ = reply.send(self.report(now));
            }
            Cmd::Metrics { reply } => {
                let _ = reply.send(csv_string(&self.samples));
            }
            Cmd::Workers { reply } => {
                let mut list: Vec<WorkerSummary> = self
                    .sched
                    .workers()
                    .into_iter()
                    .map(|w| WorkerSummary {
                        worker_id: w.worker_id.0.clone(),
                        gpu_model: w.gpu.name.clone(),
                        state: serde_json::to_value(w.state)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_string))
                            .unwrap_or_default(),
                        hosted_contexts: w.hosted_contexts.iter().map(|c| c.0.clone()).collect(),
                        current_task: w.current_task.map(|(t, _)| t.0),
                        active_serves: w.active_serves,
                    })
                    .collect();
                list.sort_by(|a, b| a.worker_id.cmp(&b.worker_id));
                let _ = reply.send(list);
            }
            Cmd::Pending { pending } => self.pending_arrivals = Some(pending),
            Cmd::Shutdown { reply } => {
                self.sched.shutdown_all();
                self.flush();
                let _ = reply.send(());
                return false;
            }
        }
        self.flush();
        if self.sched.credited_items() != before {
            self.sample(now);
        }
        true
    }

    fn tick(&mut self) {
        let now = self.clock.now();
        let before = self.sched.credited_items();
        for lost in self.sched.check_heartbeats(now) {
            if let Some(conn) = self.by_worker.remove(&lost) {
                if let Some(c) = self.conns.remove(&conn) {
                    c.reader.abort();
                }
            }
        }
        self.flush();
        if self.sched.credited_items() != before {
            self.sample(now);
        }
        if !self.samples.is_empty() {
            while self.next_grid <= now {
                let t = self.next_grid;
                self.sample(t);
                self.next_grid += SAMPLE_INTERVAL;
            }
        }
        if let Some(w) = &mut self.log {
            let _ = w.flush();
        }
    }
}

pub struct SchedulerService {
    pub worker_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub clock: EmuClock,
    tx: mpsc::UnboundedSender<Cmd>,
    stopped: watch::Receiver<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl SchedulerService {
    pub fn http_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    /// Resolves once the service has stopped, e.g. after `POST /shutdown`.
    pub async fn stopped(&self) {
        let mut rx = self.stopped.clone();
        let _ = rx.wait_for(|s| *s).await;
    }

    /// Sends SHUTDOWN to the workers and stops.
    pub async fn shutdown(&self) {
        let (reply, rx) = oneshot::channel();
        if self.tx.send(Cmd::Shutdown { reply }).is_ok() {
            let _ = rx.await;
        }
        self.stopped().await;
    }
}

impl Drop for SchedulerService {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

pub async fn start(opts: SchedulerOptions) -> std::io::Result<SchedulerService> {
    start_with_clock(opts, None).await
}

/// Like [`start`], sharing `clock` with other in-process components.
pub async fn start_with_clock(opts: SchedulerOptions, clock: Option<EmuClock>) -> std::io::Result<SchedulerService> {
    let cfg = opts.config;
    let clock = clock.unwrap_or_else(|| EmuClock::start(cfg.cost.time_scale));
    let worker_listener = TcpListener::bind(opts.worker_listen).await?;
    let http_listener = TcpListener::bind(opts.http_listen).await?;
    let worker_addr = worker_listener.local_addr()?;
    let http_addr = http_listener.local_addr()?;
    let log = match &opts.event_log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };

    let mut settings = cfg.scheduler.clone();
    let (hb_interval, hb_timeout) = effective_heartbeat(&cfg);
    settings.heartbeat_timeout_seconds = hb_timeout;
    let mut actor = Actor {
        sched: Scheduler::new(settings),
        clock,
        conns: HashMap::new(),
        by_worker: HashMap::new(),
        samples: Vec::new(),
        next_grid: 0.0,
        pending_arrivals: None,
        log,
    };

    tracing::info!(%worker_addr, %http_addr, "scheduler listening");
    let (tx, mut rx) = mpsc::unbounded_channel::<Cmd>();
    let (stop_tx, stopped) = watch::channel(false);

    let tick_every = clock.wall(hb_interval.min(SAMPLE_INTERVAL) / 2.0);
    let actor_task = tokio::spawn(async move {
        let mut ticker = tokio::time::interval(tick_every);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                cmd = rx.recv() => {
                    let Some(cmd) = cmd else { break };
                    if !actor.handle(cmd) {
                        break;
                    }
                }
                _ = ticker.tick() => actor.tick(),
            }
        }
        if let Some(w) = &mut actor.log {
            let _ = w.flush();
        }
        // closing the queues lets each writer finish; give SHUTDOWN a moment to go out
        let writers: Vec<_> = actor.conns.drain().map(|(_, c)| c.flushed).collect();
        let deadline = tokio::time::Instant::now() + std::time::Duration::from_secs(1);
        for w in writers {
            let _ = tokio::time::timeout_at(deadline, w).await;
        }
        let _ = stop_tx.send(true);
    });

    let accept_tx = tx.clone();
    let accept_task = tokio::spawn(async move {
        let mut conns = JoinSet::new();
        let mut next: ConnId = 0;
        loop {
            let Ok((stream, _)) = worker_listener.accept().await else {
                continue;
            };
            while conns.try_join_next().is_some() {}
            let conn = next;
            next += 1;
            spawn_connection(&mut conns, conn, stream, accept_tx.clone());
        }
    });

    let mut stop_http = stopped.clone();
    let app = router(Api { tx: tx.clone() });
    let http_task = tokio::spawn(async move {
        let _ = axum::serve(http_listener, app)
            .with_graceful_shutdown(async move {
                let _ = stop_http.wait_for(|s| *s).await;
            })
            .await;
    });

    Ok(SchedulerService {
        worker_addr,
        http_addr,
        clock,
        tx,
        stopped,
        tasks: vec![actor_task, accept_task, http_task],
    })
}

fn spawn_connection(set: &mut JoinSet<()>, conn: ConnId, stream: TcpStream, tx: mpsc::UnboundedSender<Cmd>) {
    let _ = stream.set_nodelay(true);
    let (read, mut write) = stream.into_split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let (flushed_tx, flushed) = oneshot::channel();
    set.spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if write_frame(&mut write, &msg).await.is_err() {
                break;
            }
        }
        let _ = flushed_tx.send(());
    });
    let reader_tx = tx.clone();
    let reader = set.spawn(async move {
        let mut frames = FrameReader::new(read);
        loop {
            match frames.next().await {
                Ok(Some(msg)) => {
                    if reader_tx.send(Cmd::Frame { conn, msg }).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) if !e.is_fatal() => {
                    let _ = reader_tx.send(Cmd::BadFrame {
                        conn,
                        error: e.to_string(),
                    });
                }
                Err(e) => {
                    let _ = reader_tx.send(Cmd::BadFrame {
                        conn,
                        error: e.to_string(),
                    });
                    break;
                }
            }
        }
        let _ = reader_tx.send(Cmd::Closed { conn });
    });
    let _ = tx.send(Cmd::Connected {
        conn,
        tx: out_tx,
        flushed,
        reader,
    });
}

#[derive(Clone)]
struct Api {
    tx: mpsc::UnboundedSender<Cmd>,
}

impl Api {
    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Cmd) -> Result<T, StatusCode> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).map_err(|_| StatusCode::SERVICE_UNAVAILABLE)?;
        rx.await.map_err(|_| StatusCode::SERVICE_UNAVAILABLE)
    }
}

fn router(api: Api) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/recipes", post(post_recipe))
        .route("/tasks", post(post_tasks))
        .route("/status", get(get_status))
        .route("/report", get(get_report))
        .route("/metrics.csv", get(get_metrics))
        .route("/workers", get(get_workers))
        .route("/factory/pending", post(post_pending))
        .route("/shutdown", post(post_shutdown))
        .layer(axum::extract::DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(api)
}

async fn post_recipe(State(api): State<Api>, Json(recipe): Json<ContextRecipe>) -> Response {
    if !recipe.verify_id() {
        return (StatusCode::UNPROCESSABLE_ENTITY, "context_id does not match the recipe").into_response();
    }
    match api.ask(|reply| Cmd::Recipe { recipe, reply }).await {
        Ok(()) => Json(serde_json::json!({"ok": true})).into_response(),
        Err(s) => s.into_response(),
    }
}

async fn post_tasks(State(api): State<Api>, Json(tasks): Json<Vec<TaskSpec>>) -> Response {
    match api.ask(|reply| Cmd::Submit { tasks, reply }).await {
        Ok(Ok(accepted)) => Json(Accepted { accepted }).into_response(),
        Ok(Err(e @ SubmitError::Duplicate(_))) => (StatusCode::CONFLICT, e.to_string()).into_response(),
        Ok(Err(e)) => (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response(),
        Err(s) => s.into_response(),
    }
}

async fn get_status(State(api): State<Api>) -> Result<Json<Status>, StatusCode> {
    api.ask(|reply| Cmd::Status { reply }).await.map(Json)
}

async fn get_report(State(api): State<Api>) -> Result<Json<ExperimentReport>, StatusCode> {
    api.ask(|reply| Cmd::Report { reply }).await.map(Json)
}

async fn get_metrics(
    State(api): State<Api>,
) -> Result<([(axum::http::HeaderName, &'static str); 1], String), StatusCode> {
    let csv = api.ask(|reply| Cmd::Metrics { reply }).await?;
    Ok(([(axum::http::header::CONTENT_TYPE, "text/csv")], csv))
}

async fn get_workers(State(api): State<Api>) -> Result<Json<Vec<WorkerSummary>>, StatusCode> {
    api.ask(|reply| Cmd::Workers { reply }).await.map(Json)
}

async fn post_pending(
    State(api): State<Api>,
    Json(p): Json<PendingArrivals>,
) -> Result<Json<serde_json::Value>, StatusCode> {
    api.tx
        .send(Cmd::Pending { pending: p.pending })
        .map_err(|_| StatusCode::SERVICE_UNAVAILABLE)?;
    Ok(Json(serde_json::json!({"ok": true})))
}

async fn post_shutdown(State(api): State<Api>) -> Result<Json<serde_json::Value>, StatusCode> {
    api.ask(|reply| Cmd::Shutdown { reply }).await?;
    Ok(Json(serde_json::json!({"ok": true})))
}
