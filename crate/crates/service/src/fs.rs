//! The shared-filesystem emulator as an HTTP endpoint.
//!
//! `POST /fetch {"bytes": n}` holds the request open for the fair-share
//! service time. A client that goes away mid-fetch releases its lease.

use std::collections::HashMap;
use std::net::SocketAddr;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use pcm_client::{FetchReply, FetchRequest, FsStatus};
use pcm_core::factory::fs::{FsEmulator, ReaderId};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::clock::EmuClock;

enum Cmd {
    Admit {
        bytes: u64,
        reply: oneshot::Sender<f64>,
        reader: oneshot::Sender<ReaderId>,
    },
    Cancel {
        reader: ReaderId,
    },
    Status {
        reply: oneshot::Sender<FsStatus>,
    },
}

#[derive(Clone)]
struct Fs {
    tx: mpsc::UnboundedSender<Cmd>,
}

pub struct FsServer {
    pub addr: SocketAddr,
    actor: JoinHandle<()>,
    http: JoinHandle<()>,
}

impl FsServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(self) {
        self.http.abort();
        self.actor.abort();
    }
}

impl Drop for FsServer {
    fn drop(&mut self) {
        self.http.abort();
        self.actor.abort();
    }
}

pub async fn start(listen: SocketAddr, bandwidth: f64, max_ops: u32, clock: EmuClock) -> std::io::Result<FsServer> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = mpsc::unbounded_channel();
    let actor = tokio::spawn(run_actor(rx, FsEmulator::new(bandwidth, max_ops), clock));
    let app = Router::new()
        .route("/fetch", post(fetch))
        .route("/status", get(status))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(Fs { tx });
    let http = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(FsServer { addr, actor, http })
}

async fn run_actor(mut rx: mpsc::UnboundedReceiver<Cmd>, mut fs: FsEmulator, clock: EmuClock) {
    let mut waiting: HashMap<ReaderId, (f64, oneshot::Sender<f64>)> = HashMap::new();
    let mut next_reader: ReaderId = 0;
    let mut completed = 0u64;
    loop {
        let wake = fs.next_completion().map(|(t, _)| clock.instant_at(t));
        let cmd = tokio::select! {
            cmd = rx.recv() => match cmd {
                Some(c) => Some(c),
                None => return,
            },
            _ = async { tokio::time::sleep_until(wake.unwrap()).await }, if wake.is_some() => None,
        };
        let now = clock.now();
        match cmd {
            Some(Cmd::Admit { bytes, reply, reader }) => {
                let id = next_reader;
                next_reader += 1;
                if bytes == 0 {
                    let _ = reply.send(0.0);
                } else {
                    fs.admit(id, bytes, now);
                    waiting.insert(id, (now, reply));
                    let _ = reader.send(id);
                }
            }
            Some(Cmd::Cancel { reader }) => {
                fs.cancel(reader, now);
                waiting.remove(&reader);
            }
            Some(Cmd::Status { reply }) => {
                fs.advance(now);
                let _ = reply.send(FsStatus {
                    now,
                    active: fs.active_count(),
                    queued: fs.queued_count(),
                    delivered_bytes: fs.delivered(),
                    completed,
                });
            }
            None => {}
        }
        for id in fs.complete_due(now) {
            completed += 1;
            if let Some((started, reply)) = waiting.remove(&id) {
                let _ = reply.send(now - started);
            }
        }
    }
}

/// Cancels the lease unless the fetch completed.
struct LeaseGuard {
    tx: mpsc::UnboundedSender<Cmd>,
    reader: Option<ReaderId>,
}

impl Drop for LeaseGuard {
    fn drop(&mut self) {
        if let Some(reader) = self.reader {
            let _ = self.tx.send(Cmd::Cancel { reader });
        }
    }
}

async fn fetch(State(fs): State<Fs>, Json(req): Json<FetchRequest>) -> Json<FetchReply> {
    let (reply, done) = oneshot::channel();
    let (reader_tx, reader_rx) = oneshot::channel();
    let _ = fs.tx.send(Cmd::Admit {
        bytes: req.bytes,
        reply,
        reader: reader_tx,
    });
    let mut guard = LeaseGuard {
        tx: fs.tx.clone(),
        reader: None,
    };
    let mut done = done;
    let seconds = tokio::select! {
        biased;
        r = &mut done => r.unwrap_or(0.0),
        id = reader_rx => {
            guard.reader = id.ok();
            done.await.unwrap_or(0.0)
        }
    };
    guard.reader = None;
    Json(FetchReply { seconds })
}

async fn status(State(fs): State<Fs>) -> Json<FsStatus> {
    let (reply, rx) = oneshot::channel();
    let _ = fs.tx.send(Cmd::Status { reply });
    Json(rx.await.unwrap_or(FsStatus {
        now: 0.0,
        active: 0,
        queued: 0,
        delivered_bytes: 0.0,
        completed: 0,
    }))
}
