//! Typed HTTP client for the scheduler's control plane and the shared
//! filesystem emulator.

use std::time::Duration;

use pcm_core::model::{ContextRecipe, TaskSpec};
use pcm_core::scheduler::ExperimentReport;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tasks per `POST /tasks` request.
pub const SUBMIT_CHUNK: usize = 500;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("{status}: {body}")]
    Status { status: u16, body: String },
}

impl ClientError {
    /// HTTP status of a rejected request, if the server answered.
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub now: f64,
    pub tasks: usize,
    pub done_tasks: usize,
    pub submitted_items: u64,
    pub credited_items: u64,
    pub connected_workers: usize,
    pub warm_workers: usize,
    pub drained: bool,
    pub pending_arrivals: Option<u64>,
    pub deadlock: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub worker_id: String,
    pub gpu_model: String,
    pub state: String,
    pub hosted_contexts: Vec<String>,
    pub current_task: Option<u64>,
    pub active_serves: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingArrivals {
    pub pending: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FetchRequest {
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FetchReply {
    /// Emulated seconds from admission request to completion.
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsStatus {
    pub now: f64,
    pub active: usize,
    pub queued: usize,
    pub delivered_bytes: f64,
    pub completed: u64,
}

async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
    let status = resp.status();
    if status.is_success() {
        Ok(resp)
    } else {
        let body = resp.text().await.unwrap_or_default();
        Err(ClientError::Status {
            status: status.as_u16(),
            body,
        })
    }
}

fn base(url: &str) -> String {
    let url = url.trim_end_matches('/');
    if url.starts_with("http://") || url.starts_with("https://") {
        url.to_string()
    } else {
        format!("http://{url}")
    }
}

#[derive(Debug, Clone)]
pub struct SchedulerClient {
    base: String,
    http: reqwest::Client,
}

impl SchedulerClient {
    /// `url` is `host:port` or a full `http://` base URL.
    pub fn new(url: &str) -> Self {
        SchedulerClient {
            base: base(url),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn healthy(&self) -> bool {
        match self
            .http
            .get(format!("{}/healthz", self.base))
            .timeout(Duration::from_secs(2))
            .send()
            .await
        {
            Ok(r) => r.status() == StatusCode::OK,
            Err(_) => false,
        }
    }

    /// Polls `/healthz` until it answers or `timeout` passes.
    pub async fn wait_healthy(&self, timeout: Duration) -> bool {
        let start = std::time::Instant::now();
        while start.elapsed() < timeout {
            if self.healthy().await {
                return true;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        false
    }

    pub async fn register_recipe(&self, recipe: &ContextRecipe) -> Result<(), ClientError> {
        let _: serde_json::Value = self.post("/recipes", recipe).await?;
        Ok(())
    }

    /// Submits in chunks so a full-scale workload stays under request size limits.
    pub async fn submit(&self, tasks: &[TaskSpec]) -> Result<Accepted, ClientError> {
        let mut accepted = 0;
        for chunk in tasks.chunks(SUBMIT_CHUNK) {
            let a: Accepted = self.post("/tasks", chunk).await?;
            accepted += a.accepted;
        }
        Ok(Accepted { accepted })
    }

    pub async fn status(&self) -> Result<Status, ClientError> {
        self.get("/status").await
    }

    pub async fn report(&self) -> Result<ExperimentReport, ClientError> {
        self.get("/report").await
    }

    pub async fn workers(&self) -> Result<Vec<WorkerSummary>, ClientError> {
        self.get("/workers").await
    }

    pub async fn metrics_csv(&self) -> Result<String, ClientError> {
        let resp = self.http.get(format!("{}/metrics.csv", self.base)).send().await?;
        Ok(check(resp).await?.text().await?)
    }

    pub async fn set_pending_arrivals(&self, pending: u64) -> Result<(), ClientError> {
        let _: serde_json::Value = self.post("/factory/pending", &PendingArrivals { pending }).await?;
        Ok(())
    }

    /// Sends SHUTDOWN to every worker and stops the scheduler.
    pub async fn shutdown(&self) -> Result<(), ClientError> {
        let _: serde_json::Value = self.post("/shutdown", &serde_json::json!({})).await?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FsClient {
    base: String,
    http: reqwest::Client,
}

impl FsClient {
    pub fn new(url: &str) -> Self {
        FsClient {
            base: base(url),
            http: reqwest::Client::new(),
        }
    }

    /// Returns once the emulated read of `bytes` has completed. Dropping the
    /// future releases the lease.
    pub async fn fetch(&self, bytes: u64) -> Result<FetchReply, ClientError> {
        let resp = self
            .http
            .post(format!("{}/fetch", self.base))
            .json(&FetchRequest { bytes })
            .send()
            .await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn status(&self) -> Result<FsStatus, ClientError> {
        let resp = self.http.get(format!("{}/status", self.base)).send().await?;
        Ok(check(resp).await?.json().await?)
    }
}
