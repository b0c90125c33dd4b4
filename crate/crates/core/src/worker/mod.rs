//! The pilot-job worker, written as a state machine without any I/O.
//!
//! Directives from the scheduler turn into a [`Job`]: an ordered list of
//! [`Step`]s that a driver executes against real sockets and timers (the live
//! service) or against a virtual clock (the discrete-event driver). When the
//! steps are done the driver hands the job back to [`WorkerNode::finish`],
//! which updates the cache and context host and produces the reply message.

pub mod cache;
pub mod host;
pub mod sandbox;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::{CostModel, Stage};
use crate::model::{
    Awareness, BlobKey, BlobKind, BlobRef, ContextId, ContextRecipe, GpuModel, InferenceItem, ResourceRequest, TaskId,
    WorkerId,
};
use crate::protocol::{InstallFailure, InstallSource, InvokeFailure, Message, Timings, TransferFailure};

pub use cache::{AcquiredFrom, BlobCache, CacheEntry, CacheError};
pub use host::{verdict_for, ContextHost, HostRequest, HostResponse};
pub use sandbox::{Sandbox, SandboxManager, SandboxState};

/// Timing key recording time lost on a failed peer transfer before falling back.
pub const PEER_FALLBACK_KEY: &str = "peer_fallback";

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// Read through the shared-filesystem emulator, which models contention.
    FsFetch { bytes: u64 },
    /// Copy the context template from a worker that hosts it.
    PeerFetch {
        address: String,
        context_id: ContextId,
        bytes: u64,
    },
    /// Local work of fixed emulated duration.
    Work { stage: Stage, seconds: f64 },
}

impl Step {
    pub fn stage(&self) -> Stage {
        match self {
            Step::FsFetch { .. } => Stage::FsFetch,
            Step::PeerFetch { .. } => Stage::PeerTransfer,
            Step::Work { stage, .. } => *stage,
        }
    }
}

#[derive(Debug, Clone)]
pub enum JobKind {
    Install {
        recipe: ContextRecipe,
        fetched_from: InstallSource,
        fetch: Vec<BlobRef>,
    },
    Invoke {
        task_id: TaskId,
        attempt: u32,
        awareness: Awareness,
        context_id: Option<ContextId>,
        items: Vec<InferenceItem>,
        /// Blobs to keep in the local cache once the invocation finishes.
        cache_after: Vec<BlobRef>,
    },
}

#[derive(Debug, Clone)]
pub struct Job {
    pub kind: JobKind,
    steps: VecDeque<Step>,
    timings: Timings,
    pub started_at: f64,
}

impl Job {
    pub fn next_step(&mut self) -> Option<Step> {
        self.steps.pop_front()
    }

    pub fn remaining_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter()
    }

    /// Adds `seconds` of measured time to `stage`.
    pub fn record(&mut self, stage: Stage, seconds: f64) {
        *self.timings.entry(stage.as_str().to_string()).or_insert(0.0) += seconds;
    }

    /// Replaces a failed peer transfer with a filesystem fetch of the same
    /// bytes, to run next.
    pub fn fall_back_to_fs(&mut self, bytes: u64, wasted_seconds: f64) {
        *self.timings.entry(PEER_FALLBACK_KEY.to_string()).or_insert(0.0) += wasted_seconds;
        if let JobKind::Install { fetched_from, .. } = &mut self.kind {
            *fetched_from = InstallSource::Fs;
        }
        self.steps.push_front(Step::FsFetch { bytes });
    }

    pub fn timings(&self) -> &Timings {
        &self.timings
    }

    pub fn total_seconds(&self) -> f64 {
        self.timings.values().sum()
    }

    pub fn invocation(&self) -> Option<(TaskId, u32)> {
        match &self.kind {
            JobKind::Invoke { task_id, attempt, .. } => Some((*task_id, *attempt)),
            JobKind::Install { .. } => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Sandbox(#[from] sandbox::SandboxError),
    #[error("cache directory: {0}")]
    Io(#[from] std::io::Error),
}

pub struct WorkerNode {
    id: WorkerId,
    gpu: GpuModel,
    capacity: ResourceRequest,
    cost: CostModel,
    cache: BlobCache,
    host: ContextHost,
    sandboxes: SandboxManager,
    active_serves: u32,
    max_serves: u32,
    peer_address: Option<String>,
    cache_dir: Option<PathBuf>,
}

impl WorkerNode {
    pub fn new(id: WorkerId, gpu: GpuModel, capacity: ResourceRequest, cost: CostModel, max_serves: u32) -> Self {
        WorkerNode {
            id,
            gpu,
            capacity,
            cost,
            cache: BlobCache::new(capacity.disk_bytes),
            host: ContextHost::new(),
            sandboxes: SandboxManager::in_memory(),
            active_serves: 0,
            max_serves,
            peer_address: None,
            cache_dir: None,
        }
    }

    /// Backs the cache and sandboxes with `dir`. Blobs recorded in a previous
    /// run's index survive if their placeholder file is still there.
    pub fn with_cache_dir(mut self, dir: &Path) -> Result<Self, WorkerError> {
        std::fs::create_dir_all(dir.join("blobs"))?;
        std::fs::create_dir_all(dir.join("sandboxes"))?;
        let index = dir.join("index.json");
        if index.exists() {
            let blobs = dir.join("blobs");
            self.cache = BlobCache::load(&index, self.capacity.disk_bytes, |e| blobs.join(&e.key.0).exists())?;
        }
        self.sandboxes = SandboxManager::on_disk(dir.join("sandboxes"));
        self.cache_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn with_peer_address(mut self, addr: impl Into<String>) -> Self {
        self.peer_address = Some(addr.into());
        self
    }

    pub fn id(&self) -> &WorkerId {
        &self.id
    }

    pub fn gpu(&self) -> &GpuModel {
        &self.gpu
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn cache(&self) -> &BlobCache {
        &self.cache
    }

    pub fn host(&self) -> &ContextHost {
        &self.host
    }

    pub fn sandboxes(&self) -> &SandboxManager {
        &self.sandboxes
    }

    pub fn active_serves(&self) -> u32 {
        self.active_serves
    }

    pub fn register_message(&self) -> Message {
        Message::Register {
            worker_id: self.id.clone(),
            gpu_model: self.gpu.clone(),
            resources: self.capacity,
            cache_inventory: self.cache.inventory(),
            peer_address: self.peer_address.clone(),
        }
    }

    pub fn begin_install(
        &mut self,
        recipe: ContextRecipe,
        source: InstallSource,
        now: f64,
    ) -> Result<Job, InstallFailure> {
        if !recipe.verify_id() {
            return Err(InstallFailure::BadRecipe);
        }
        let blobs = recipe.blobs();
        let protected: Vec<BlobKey> = blobs.iter().map(|b| b.key.clone()).collect();
        let fetch: Vec<BlobRef> = blobs.into_iter().filter(|b| !self.cache.contains(&b.key)).collect();
        let fetch_bytes: u64 = fetch.iter().map(|b| b.bytes).sum();
        self.cache
            .make_room(fetch_bytes, &protected)
            .map_err(|_| InstallFailure::InsufficientDisk)?;

        let mut steps = VecDeque::new();
        if fetch_bytes > 0 {
            steps.push_back(match &source {
                InstallSource::Fs => Step::FsFetch { bytes: fetch_bytes },
                InstallSource::Peer(address) => Step::PeerFetch {
                    address: address.clone(),
                    context_id: recipe.context_id.clone(),
                    bytes: fetch_bytes,
                },
            });
        }
        let model = recipe.model_bytes as f64;
        if recipe.builder.disk_load {
            steps.push_back(Step::Work {
                stage: Stage::DiskLoad,
                seconds: model / self.cost.disk_bandwidth,
            });
        }
        if recipe.builder.gpu_load {
            steps.push_back(Step::Work {
                stage: Stage::GpuLoad,
                seconds: model / self.gpu.gpu_load_bandwidth,
            });
        }
        Ok(Job {
            kind: JobKind::Install {
                recipe,
                fetched_from: source,
                fetch,
            },
            steps,
            timings: Timings::new(),
            started_at: now,
        })
    }

    pub fn begin_invoke(
        &mut self,
        task_id: TaskId,
        attempt: u32,
        awareness: Awareness,
        context_id: Option<ContextId>,
        items: Vec<InferenceItem>,
        inputs: Vec<BlobRef>,
        now: f64,
    ) -> Result<Job, InvokeFailure> {
        if awareness == Awareness::Full {
            match &context_id {
                Some(id) if self.host.holds(id) => {}
                _ => return Err(InvokeFailure::ContextMissing),
            }
        }
        let input = serde_json::to_vec(&items).expect("items serialize");
        // the invocation input shares the blob namespace with context blobs
        let input_blob = BlobRef {
            key: BlobKey(hex::encode(Sha256::digest(&input))),
            bytes: items.iter().map(|i| i.payload_bytes).sum(),
            kind: BlobKind::InvocationInput,
        };
        let _ = self.cache.insert(&input_blob, AcquiredFrom::Scheduler, now, &[]);
        if self.sandboxes.create((task_id, attempt), &input).is_err() {
            return Err(InvokeFailure::Busy);
        }

        let mut steps = VecDeque::new();
        let mut cache_after = Vec::new();
        if awareness != Awareness::Full {
            let fetch_bytes: u64 = match awareness {
                Awareness::Agnostic => inputs.iter().map(|b| b.bytes).sum(),
                _ => {
                    let missing: Vec<&BlobRef> = inputs.iter().filter(|b| !self.cache.contains(&b.key)).collect();
                    let bytes = missing.iter().map(|b| b.bytes).sum();
                    let protected: Vec<BlobKey> = inputs.iter().map(|b| b.key.clone()).collect();
                    if self.cache.make_room(bytes, &protected).is_ok() {
                        cache_after = missing.into_iter().cloned().collect();
                    }
                    bytes
                }
            };
            if fetch_bytes > 0 {
                steps.push_back(Step::FsFetch { bytes: fetch_bytes });
            }
            let model: u64 = inputs
                .iter()
                .filter(|b| b.kind == BlobKind::ModelBlob)
                .map(|b| b.bytes)
                .sum();
            let model = model as f64;
            steps.push_back(Step::Work {
                stage: Stage::DiskLoad,
                seconds: model / self.cost.disk_bandwidth,
            });
            steps.push_back(Step::Work {
                stage: Stage::GpuLoad,
                seconds: model / self.gpu.gpu_load_bandwidth,
            });
        }
        let units: f64 = items.iter().map(|i| i.cost_units).sum();
        steps.push_back(Step::Work {
            stage: Stage::Dispatch,
            seconds: self.cost.invoke_dispatch_overhead_seconds,
        });
        steps.push_back(Step::Work {
            stage: Stage::Infer,
            seconds: self.cost.infer_seconds(units, &self.gpu),
        });

        Ok(Job {
            kind: JobKind::Invoke {
                task_id,
                attempt,
                awareness,
                context_id,
                items,
                cache_after,
            },
            steps,
            timings: Timings::new(),
            started_at: now,
        })
    }

    /// Completes a job whose steps have all run, returning the reply for the scheduler.
    pub fn finish(&mut self, job: Job, now: f64) -> Message {
        let total = job.total_seconds();
        let timings = job.timings;
        match job.kind {
            JobKind::Install {
                recipe,
                fetched_from,
                fetch,
            } => {
                let from = if fetched_from.is_peer() {
                    AcquiredFrom::Peer
                } else {
                    AcquiredFrom::Fs
                };
                let protected: Vec<BlobKey> = recipe.blobs().into_iter().map(|b| b.key).collect();
                for blob in &fetch {
                    // room was reserved in begin_install
                    let _ = self.cache.insert(blob, from, now, &protected);
                }
                let context_id = recipe.context_id.clone();
                self.host.handle(HostRequest::Materialize { recipe });
                self.persist();
                Message::ContextReady {
                    context_id,
                    build_seconds: total,
                    fetched_from,
                    timings,
                }
            }
            JobKind::Invoke {
                task_id,
                attempt,
                awareness,
                context_id,
                items,
                cache_after,
            } => {
                for blob in &cache_after {
                    let _ = self.cache.insert(blob, AcquiredFrom::Fs, now, &[]);
                }
                let sandbox = self
                    .sandboxes
                    .get((task_id, attempt))
                    .map(|s| s.path.clone())
                    .unwrap_or_default();
                let item_results = match (awareness, context_id) {
                    (Awareness::Full, Some(context_id)) => {
                        match self.host.handle(HostRequest::Invoke {
                            context_id,
                            sandbox,
                            items: items.clone(),
                        }) {
                            HostResponse::Done { item_results } => item_results,
                            _ => host::run_items(&items),
                        }
                    }
                    _ => host::run_items(&items),
                };
                let output = serde_json::to_vec(&item_results).expect("results serialize");
                let _ = self.sandboxes.mark_executed((task_id, attempt), &output);
                if !cache_after.is_empty() {
                    self.persist();
                }
                Message::Result {
                    task_id,
                    attempt,
                    item_results,
                    timings,
                }
            }
        }
    }

    /// Drops the sandbox of an invocation whose RESULT has been sent.
    pub fn reap(&mut self, task_id: TaskId, attempt: u32) {
        let _ = self.sandboxes.reap((task_id, attempt));
    }

    /// Accepts a peer transfer request, returning the declared template size.
    /// Every accepted serve must be paired with [`end_serve`](Self::end_serve).
    pub fn serve_peer(&mut self, context_id: &ContextId) -> Result<u64, TransferFailure> {
        let recipe = match self.host.hosted() {
            Some(r) if &r.context_id == context_id => r,
            _ => return Err(TransferFailure::NotFound),
        };
        let blobs = recipe.blobs();
        if !blobs.iter().all(|b| self.cache.contains(&b.key)) {
            return Err(TransferFailure::NotFound);
        }
        if self.active_serves >= self.max_serves {
            return Err(TransferFailure::Busy);
        }
        self.active_serves += 1;
        Ok(blobs.iter().map(|b| b.bytes).sum())
    }

    pub fn end_serve(&mut self) {
        self.active_serves = self.active_serves.saturating_sub(1);
    }

    fn persist(&self) {
        let Some(dir) = &self.cache_dir else { return };
        let blobs = dir.join("blobs");
        for key in self.cache.inventory() {
            let path = blobs.join(&key.0);
            if !path.exists() {
                let declared = self.cache.get(&key).map(|e| e.declared_bytes).unwrap_or(0);
                let _ = std::fs::write(&path, declared.to_string());
            }
        }
        if let Ok(entries) = std::fs::read_dir(&blobs) {
            for entry in entries.flatten() {
                let name = entry.file_name().to_string_lossy().to_string();
                if !self.cache.contains(&BlobKey(name)) {
                    let _ = std::fs::remove_file(entry.path());
                }
            }
        }
        let _ = self.cache.save(&dir.join("index.json"));
    }
}
