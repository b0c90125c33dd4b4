//! What the scheduler records while it runs: the structured event log and the
//! end-of-run report.

use serde::{Deserialize, Serialize};

use crate::model::{ContextId, TaskId, WorkerId};
use crate::protocol::{InstallSource, Timings};

/// One line of the structured event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub t: f64,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<WorkerId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<ContextId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl LogEvent {
    pub fn new(t: f64, event: &str) -> Self {
        LogEvent {
            t,
            event: event.to_string(),
            worker: None,
            task: None,
            attempt: None,
            context: None,
            detail: None,
        }
    }

    pub fn worker(mut self, w: &WorkerId) -> Self {
        self.worker = Some(w.clone());
        self
    }

    pub fn task(mut self, t: TaskId, attempt: u32) -> Self {
        self.task = Some(t);
        self.attempt = Some(attempt);
        self
    }

    pub fn context(mut self, c: &ContextId) -> Self {
        self.context = Some(c.clone());
        self
    }

    pub fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = Some(d.into());
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log event serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkerEventKind {
    Arrived,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerLogEntry {
    pub at: f64,
    pub worker_id: WorkerId,
    pub gpu_model: String,
    pub kind: WorkerEventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallRecord {
    pub worker_id: WorkerId,
    pub context_id: ContextId,
    pub requested: InstallSource,
    pub fetched_from: InstallSource,
    /// From the directive (or the start of a wait for a peer slot) to CONTEXT_READY.
    pub elapsed_seconds: f64,
    /// Time the worker itself reported for the build.
    pub build_seconds: f64,
    /// Seconds spent reading the shared filesystem; zero when every blob came from cache or a peer.
    pub fs_fetch_seconds: f64,
    pub completed_at: f64,
}

impl InstallRecord {
    pub fn hit_fs(&self) -> bool {
        self.fs_fetch_seconds > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub attempt: u32,
    pub worker_id: WorkerId,
    pub items: u64,
    pub dispatched_at: f64,
    pub completed_at: f64,
    pub timings: Timings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub end_to_end: f64,
    pub submitted_items: u64,
    pub credited_items: u64,
    pub tasks: usize,
    pub requeues: u64,
    pub stale_results: u64,
    pub anomalies: u64,
    /// (emulated time, items credited at that instant)
    pub item_completions: Vec<(f64, u64)>,
    pub task_records: Vec<TaskRecord>,
    pub worker_log: Vec<WorkerLogEntry>,
    pub installs: Vec<InstallRecord>,
    pub first_context_ready: Option<f64>,
    pub peak_connected: usize,
    pub aborted: Option<String>,
}

impl ExperimentReport {
    pub fn drained(&self) -> bool {
        self.aborted.is_none() && self.credited_items == self.submitted_items
    }

    pub fn fs_installs(&self) -> usize {
        self.installs.iter().filter(|i| i.hit_fs()).count()
    }

    pub fn peer_installs(&self) -> usize {
        self.installs.iter().filter(|i| i.fetched_from.is_peer()).count()
    }

    pub fn aggregate_install_seconds(&self) -> f64 {
        self.installs.iter().map(|i| i.elapsed_seconds).sum()
    }
}
