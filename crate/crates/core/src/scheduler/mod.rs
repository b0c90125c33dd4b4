//! The manager: task ledger, worker registry and placement.
//!
//! [`Scheduler`] never touches a socket or a clock. Drivers feed it events
//! stamped with emulated time and drain [`Scheduler::take_outbox`] after each
//! one. Every state change goes through `&mut self`, so the single-owner rule
//! is enforced by the borrow checker.

pub mod ledger;
pub mod report;

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::config::SchedulerSettings;
use crate::model::{
    Awareness, BlobKey, ContextId, ContextRecipe, GpuModel, ModelError, ResourceRequest, TaskId, TaskSpec, WorkerId,
};
use crate::protocol::{InstallSource, InvokeFailure, Message, Timings};

pub use ledger::{Acceptance, TaskEntry, TaskLedger, TaskState};
pub use report::{ExperimentReport, InstallRecord, LogEvent, TaskRecord, WorkerEventKind, WorkerLogEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkerState {
    Connected,
    Installing,
    Busy,
    Idle,
    Lost,
}

#[derive(Debug, Clone, Serialize)]
pub struct PendingInstall {
    pub context_id: ContextId,
    /// None while the worker waits for a peer serve slot.
    pub requested: Option<InstallSource>,
    pub peer_holder: Option<WorkerId>,
    pub started_at: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkerDescriptor {
    pub worker_id: WorkerId,
    /// Where other workers reach this one for peer transfers.
    pub address: Option<String>,
    pub gpu: GpuModel,
    pub resources: ResourceRequest,
    pub hosted_contexts: BTreeSet<ContextId>,
    pub cached_blobs: BTreeSet<BlobKey>,
    pub state: WorkerState,
    pub current_task: Option<(TaskId, u32)>,
    pub installing: Option<PendingInstall>,
    pub active_serves: u32,
    pub connected_at: f64,
    pub last_seen: f64,
    conn_seq: u64,
}

impl WorkerDescriptor {
    fn is_free(&self) -> bool {
        matches!(self.state, WorkerState::Connected | WorkerState::Idle)
    }

    pub fn is_warm(&self) -> bool {
        !self.hosted_contexts.is_empty()
    }

    pub fn hosts(&self, ctx: &ContextId) -> bool {
        self.hosted_contexts.contains(ctx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: WorkerId,
    pub msg: Message,
}

#[derive(Debug, Error, PartialEq)]
pub enum SubmitError {
    #[error("task {0} already submitted")]
    Duplicate(TaskId),
    #[error("no recipe registered for context {0}")]
    UnknownContext(ContextId),
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

enum SourceChoice {
    Use(InstallSource, Option<WorkerId>),
    Wait,
}

pub struct Scheduler {
    settings: SchedulerSettings,
    recipes: HashMap<ContextId, ContextRecipe>,
    ledger: TaskLedger,
    workers: HashMap<WorkerId, WorkerDescriptor>,
    holders: HashMap<ContextId, BTreeSet<WorkerId>>,
    peer_waiters: VecDeque<WorkerId>,
    failed_installs: HashSet<(WorkerId, ContextId)>,
    next_conn_seq: u64,
    outbox: Vec<Outgoing>,
    log: Vec<LogEvent>,
    log_enabled: bool,
    report: ExperimentReport,
    now: f64,
}

impl Scheduler {
    pub fn new(settings: SchedulerSettings) -> Self {
        Scheduler {
            settings,
            recipes: HashMap::new(),
            ledger: TaskLedger::new(),
            workers: HashMap::new(),
            holders: HashMap::new(),
            peer_waiters: VecDeque::new(),
            failed_installs: HashSet::new(),
            next_conn_seq: 0,
            outbox: Vec::new(),
            log: Vec::new(),
            log_enabled: true,
            report: ExperimentReport::default(),
            now: 0.0,
        }
    }

    /// Turns the structured event log on or off (large simulated runs skip it).
    pub fn set_event_log(&mut self, enabled: bool) {
        self.log_enabled = enabled;
    }

    pub fn settings(&self) -> &SchedulerSettings {
        &self.settings
    }

    pub fn ledger(&self) -> &TaskLedger {
        &self.ledger
    }

    pub fn worker(&self, id: &WorkerId) -> Option<&WorkerDescriptor> {
        self.workers.get(id)
    }

    /// Connected workers, oldest connection first.
    pub fn workers(&self) -> Vec<&WorkerDescriptor> {
        let mut v: Vec<_> = self.workers.values().collect();
        v.sort_by_key(|w| w.conn_seq);
        v
    }

    pub fn connected_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn warm_workers(&self) -> usize {
        self.workers.values().filter(|w| w.is_warm()).count()
    }

    pub fn holders_of(&self, ctx: &ContextId) -> usize {
        self.holders.get(ctx).map_or(0, |h| h.len())
    }

    pub fn credited_items(&self) -> u64 {
        self.ledger.credited_items()
    }

    pub fn submitted_items(&self) -> u64 {
        self.ledger.submitted_items()
    }

    pub fn drained(&self) -> bool {
        self.ledger.all_done()
    }

    /// Instant of the most recent credited RESULT.
    pub fn last_credit_at(&self) -> Option<f64> {
        self.report.item_completions.last().map(|c| c.0)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn take_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_log(&mut self) -> Vec<LogEvent> {
        std::mem::take(&mut self.log)
    }

    fn emit(&mut self, e: LogEvent) {
        if self.log_enabled {
            self.log.push(e);
        }
    }

    fn tick(&mut self, now: f64) {
        if now > self.now {
            self.now = now;
        }
    }

    pub fn register_recipe(&mut self, recipe: ContextRecipe) {
        self.recipes.insert(recipe.context_id.clone(), recipe);
    }

    pub fn submit(&mut self, spec: TaskSpec, now: f64) -> Result<TaskId, SubmitError> {
        self.tick(now);
        spec.validate()?;
        if self.ledger.contains(spec.task_id) {
            return Err(SubmitError::Duplicate(spec.task_id));
        }
        if let (Awareness::Full, Some(ctx)) = (spec.awareness, &spec.context_id) {
            if !self.recipes.contains_key(ctx) {
                return Err(SubmitError::UnknownContext(ctx.clone()));
            }
        }
        let id = spec.task_id;
        let attempt = spec.attempt;
        self.ledger.insert(spec, now);
        self.emit(LogEvent::new(now, "submit").task(id, attempt));
        Ok(id)
    }

    /// Submits many tasks, then runs one placement round.
    pub fn submit_all(&mut self, specs: Vec<TaskSpec>, now: f64) -> Result<usize, SubmitError> {
        let n = specs.len();
        for s in specs {
            self.submit(s, now)?;
        }
        self.schedule_round(now);
        Ok(n)
    }

    /// Handles one decoded message from `from`. Placement runs afterwards.
    pub fn on_message(&mut self, from: &WorkerId, msg: Message, now: f64) {
        self.tick(now);
        if let Message::Register {
            worker_id,
            gpu_model,
            resources,
            cache_inventory,
            peer_address,
        } = msg
        {
            self.on_register(worker_id, gpu_model, resources, cache_inventory, peer_address, now);
            self.schedule_round(now);
            return;
        }
        let Some(w) = self.workers.get_mut(from) else {
            self.report.anomalies += 1;
            self.emit(
                LogEvent::new(now, "message_from_unknown_worker")
                    .worker(from)
                    .detail(msg.type_name()),
            );
            return;
        };
        w.last_seen = now;
        match msg {
            Message::ContextReady {
                context_id,
                build_seconds,
                fetched_from,
                timings,
            } => self.on_context_ready(from, context_id, build_seconds, fetched_from, &timings, now),
            Message::InstallFailed { context_id, reason } => {
                self.release_peer_serve(from);
                let w = self.workers.get_mut(from).expect("checked above");
                w.installing = None;
                w.state = WorkerState::Idle;
                self.failed_installs.insert((from.clone(), context_id.clone()));
                self.emit(
                    LogEvent::new(now, "install_failed")
                        .worker(from)
                        .context(&context_id)
                        .detail(format!("{reason:?}")),
                );
            }
            Message::Result {
                task_id,
                attempt,
                item_results,
                timings,
            } => self.on_result(from, task_id, attempt, &item_results, timings, now),
            Message::InvokeFailed {
                task_id,
                attempt,
                reason,
            } => {
                let w = self.workers.get_mut(from).expect("checked above");
                if w.current_task == Some((task_id, attempt)) {
                    w.current_task = None;
                    w.state = WorkerState::Idle;
                    if reason == InvokeFailure::ContextMissing {
                        let dropped: Vec<ContextId> = std::mem::take(&mut w.hosted_contexts).into_iter().collect();
                        for ctx in dropped {
                            if let Some(h) = self.holders.get_mut(&ctx) {
                                h.remove(from);
                            }
                        }
                    }
                    if self.ledger.requeue(task_id) {
                        self.report.requeues += 1;
                    }
                }
                self.emit(
                    LogEvent::new(now, "invoke_failed")
                        .worker(from)
                        .task(task_id, attempt)
                        .detail(format!("{reason:?}")),
                );
            }
            Message::Heartbeat { .. } => return,
            other => {
                self.report.anomalies += 1;
                self.emit(
                    LogEvent::new(now, "unexpected_message")
                        .worker(from)
                        .detail(other.type_name()),
                );
                return;
            }
        }
        self.schedule_round(now);
    }

    fn on_register(
        &mut self,
        worker_id: WorkerId,
        gpu: GpuModel,
        resources: ResourceRequest,
        cache_inventory: Vec<BlobKey>,
        address: Option<String>,
        now: f64,
    ) {
        if self.workers.contains_key(&worker_id) {
            // same id again: the old session is gone
            self.lose(&worker_id, now, "reregistered");
        }
        let conn_seq = self.next_conn_seq;
        self.next_conn_seq += 1;
        self.report.worker_log.push(WorkerLogEntry {
            at: now,
            worker_id: worker_id.clone(),
            gpu_model: gpu.name.clone(),
            kind: WorkerEventKind::Arrived,
        });
        self.emit(
            LogEvent::new(now, "worker_registered")
                .worker(&worker_id)
                .detail(format!("{} cached={}", gpu.name, cache_inventory.len())),
        );
        self.workers.insert(
            worker_id.clone(),
            WorkerDescriptor {
                worker_id,
                address,
                gpu,
                resources,
                hosted_contexts: BTreeSet::new(),
                cached_blobs: cache_inventory.into_iter().collect(),
                state: WorkerState::Connected,
                current_task: None,
                installing: None,
                active_serves: 0,
                connected_at: now,
                last_seen: now,
                conn_seq,
            },
        );
        self.report.peak_connected = self.report.peak_connected.max(self.workers.len());
    }

    fn on_context_ready(
        &mut self,
        from: &WorkerId,
        ctx: ContextId,
        build_seconds: f64,
        fetched_from: InstallSource,
        timings: &Timings,
        now: f64,
    ) {
        let pending = self.workers.get(from).and_then(|w| w.installing.clone());
        self.release_peer_serve(from);
        let blobs = self.recipes.get(&ctx).map(|r| r.blobs()).unwrap_or_default();
        let w = self.workers.get_mut(from).expect("caller checked");
        let expected = pending.as_ref().is_some_and(|p| p.context_id == ctx);
        if !expected {
            self.report.anomalies += 1;
        }
        // one context per worker
        let previous: Vec<ContextId> = std::mem::take(&mut w.hosted_contexts).into_iter().collect();
        w.hosted_contexts.insert(ctx.clone());
        w.cached_blobs.extend(blobs.into_iter().map(|b| b.key));
        w.installing = None;
        if w.state == WorkerState::Installing {
            w.state = WorkerState::Idle;
        }
        for old in previous {
            if let Some(h) = self.holders.get_mut(&old) {
                h.remove(from);
            }
        }
        self.holders.entry(ctx.clone()).or_default().insert(from.clone());
        let record = InstallRecord {
            worker_id: from.clone(),
            context_id: ctx.clone(),
            requested: pending
                .as_ref()
                .and_then(|p| p.requested.clone())
                .unwrap_or(InstallSource::Fs),
            fetched_from,
            elapsed_seconds: pending.as_ref().map_or(build_seconds, |p| now - p.started_at),
            build_seconds,
            fs_fetch_seconds: timings
                .get(crate::cost::Stage::FsFetch.as_str())
                .copied()
                .unwrap_or(0.0),
            completed_at: now,
        };
        self.report.installs.push(record);
        self.report.first_context_ready.get_or_insert(now);
        self.emit(
            LogEvent::new(now, "context_ready")
                .worker(from)
                .context(&ctx)
                .detail(format!("{build_seconds:.3}")),
        );
        self.pump_peer_waiters(now);
    }

    fn on_result(
        &mut self,
        from: &WorkerId,
        task_id: TaskId,
        attempt: u32,
        item_results: &[crate::protocol::ItemResult],
        timings: Timings,
        now: f64,
    ) {
        let w = self.workers.get_mut(from).expect("caller checked");
        if w.current_task == Some((task_id, attempt)) {
            w.current_task = None;
            w.state = WorkerState::Idle;
        }
        match self.ledger.accept(task_id, attempt, from, item_results, now) {
            Acceptance::Credited(n) => {
                let entry = self.ledger.get(task_id).expect("just accepted");
                if entry.spec.awareness == Awareness::Partial {
                    let keys: Vec<BlobKey> = entry.spec.inputs.iter().map(|b| b.key.clone()).collect();
                    if let Some(w) = self.workers.get_mut(from) {
                        w.cached_blobs.extend(keys);
                    }
                }
                self.report.task_records.push(TaskRecord {
                    task_id,
                    attempt,
                    worker_id: from.clone(),
                    items: n,
                    dispatched_at: entry.dispatched_at.unwrap_or(now),
                    completed_at: now,
                    timings,
                });
                match self.report.item_completions.last_mut() {
                    Some((t, c)) if *t == now => *c += n,
                    _ => self.report.item_completions.push((now, n)),
                }
                self.emit(
                    LogEvent::new(now, "result_accepted")
                        .worker(from)
                        .task(task_id, attempt),
                );
            }
            Acceptance::Stale => {
                self.report.stale_results += 1;
                self.emit(LogEvent::new(now, "result_stale").worker(from).task(task_id, attempt));
            }
            Acceptance::Mismatch => {
                self.report.anomalies += 1;
                if self.ledger.requeue(task_id) {
                    self.report.requeues += 1;
                }
                self.emit(
                    LogEvent::new(now, "result_mismatch")
                        .worker(from)
                        .task(task_id, attempt),
                );
            }
            Acceptance::Unknown => {
                self.report.anomalies += 1;
                self.emit(
                    LogEvent::new(now, "result_unknown_task")
                        .worker(from)
                        .task(task_id, attempt),
                );
            }
        }
    }

    /// Connection closed or heartbeat missed.
    pub fn on_worker_lost(&mut self, id: &WorkerId, now: f64) {
        self.tick(now);
        if self.lose(id, now, "connection_closed") {
            self.pump_peer_waiters(now);
            self.schedule_round(now);
        }
    }

    /// Declares lost every worker silent for longer than the heartbeat timeout.
    pub fn check_heartbeats(&mut self, now: f64) -> Vec<WorkerId> {
        self.tick(now);
        let timeout = self.settings.heartbeat_timeout_seconds;
        let mut silent: Vec<WorkerId> = self
            .workers
            .values()
            .filter(|w| now - w.last_seen > timeout)
            .map(|w| w.worker_id.clone())
            .collect();
        silent.sort();
        for id in &silent {
            self.lose(id, now, "heartbeat_timeout");
        }
        if !silent.is_empty() {
            self.pump_peer_waiters(now);
            self.schedule_round(now);
        }
        silent
    }

    fn lose(&mut self, id: &WorkerId, now: f64, why: &str) -> bool {
        self.release_peer_serve(id);
        let Some(mut w) = self.workers.remove(id) else {
            return false;
        };
        w.state = WorkerState::Lost;
        if let Some((task, attempt)) = w.current_task.take() {
            let outstanding = self
                .ledger
                .get(task)
                .is_some_and(|e| e.state == TaskState::Dispatched && e.spec.attempt == attempt);
            if outstanding && self.ledger.requeue(task) {
                self.report.requeues += 1;
                self.emit(LogEvent::new(now, "requeue").worker(id).task(task, attempt + 1));
            }
        }
        for ctx in &w.hosted_contexts {
            if let Some(h) = self.holders.get_mut(ctx) {
                h.remove(id);
            }
        }
        // installs fed by this worker fall back to the filesystem on the worker side
        for other in self.workers.values_mut() {
            if let Some(p) = other.installing.as_mut() {
                if p.peer_holder.as_ref() == Some(id) {
                    p.peer_holder = None;
                }
            }
        }
        self.peer_waiters.retain(|x| x != id);
        self.failed_installs.retain(|(x, _)| x != id);
        self.report.worker_log.push(WorkerLogEntry {
            at: now,
            worker_id: id.clone(),
            gpu_model: w.gpu.name.clone(),
            kind: WorkerEventKind::Lost,
        });
        self.emit(LogEvent::new(now, "worker_lost").worker(id).detail(why));
        true
    }

    fn release_peer_serve(&mut self, installer: &WorkerId) {
        let holder = self
            .workers
            .get_mut(installer)
            .and_then(|w| w.installing.as_mut())
            .and_then(|p| p.peer_holder.take());
        if let Some(h) = holder.and_then(|h| self.workers.get_mut(&h)) {
            h.active_serves = h.active_serves.saturating_sub(1);
        }
    }

    fn choose_source(&self, installer: &WorkerId, ctx: &ContextId) -> SourceChoice {
        if !self.settings.peer_transfer {
            return SourceChoice::Use(InstallSource::Fs, None);
        }
        let recipe = &self.recipes[ctx];
        let w = &self.workers[installer];
        if recipe.blobs().iter().all(|b| w.cached_blobs.contains(&b.key)) {
            // nothing to fetch
            return SourceChoice::Use(InstallSource::Fs, None);
        }
        let holders: Vec<&WorkerDescriptor> = self
            .holders
            .get(ctx)
            .into_iter()
            .flatten()
            .filter(|h| *h != installer)
            .filter_map(|h| self.workers.get(h))
            .filter(|h| h.address.is_some())
            .collect();
        if holders.is_empty() {
            return SourceChoice::Use(InstallSource::Fs, None);
        }
        let cap = self.settings.max_concurrent_peer_serves;
        match holders
            .iter()
            .filter(|h| h.active_serves < cap)
            .min_by_key(|h| (h.active_serves, h.conn_seq))
        {
            Some(h) => SourceChoice::Use(
                InstallSource::Peer(h.address.clone().expect("filtered")),
                Some(h.worker_id.clone()),
            ),
            None => SourceChoice::Wait,
        }
    }

    /// Sends INSTALL_CONTEXT to `worker`, or parks it until a peer slot frees up.
    fn install_context(&mut self, worker: &WorkerId, ctx: &ContextId, now: f64) {
        let choice = self.choose_source(worker, ctx);
        let w = self.workers.get_mut(worker).expect("installing on a connected worker");
        w.state = WorkerState::Installing;
        w.installing = Some(PendingInstall {
            context_id: ctx.clone(),
            requested: None,
            peer_holder: None,
            started_at: now,
        });
        match choice {
            SourceChoice::Use(source, holder) => self.send_install(worker, ctx, source, holder, now),
            SourceChoice::Wait => {
                self.peer_waiters.push_back(worker.clone());
                self.emit(
                    LogEvent::new(now, "install_waiting_for_peer")
                        .worker(worker)
                        .context(ctx),
                );
            }
        }
    }

    fn send_install(
        &mut self,
        worker: &WorkerId,
        ctx: &ContextId,
        source: InstallSource,
        holder: Option<WorkerId>,
        now: f64,
    ) {
        if let Some(h) = holder.as_ref().and_then(|h| self.workers.get_mut(h)) {
            h.active_serves += 1;
        }
        let w = self.workers.get_mut(worker).expect("connected");
        let p = w.installing.as_mut().expect("install pending");
        p.requested = Some(source.clone());
        p.peer_holder = holder;
        let detail = match &source {
            InstallSource::Fs => "fs".to_string(),
            InstallSource::Peer(a) => format!("peer {a}"),
        };
        self.emit(
            LogEvent::new(now, "install_context")
                .worker(worker)
                .context(ctx)
                .detail(detail),
        );
        let recipe = self.recipes[ctx].clone();
        self.outbox.push(Outgoing {
            to: worker.clone(),
            msg: Message::InstallContext { recipe, source },
        });
    }

    fn pump_peer_waiters(&mut self, now: f64) {
        let waiting: Vec<WorkerId> = self.peer_waiters.drain(..).collect();
        for id in waiting {
            let Some(ctx) = self
                .workers
                .get(&id)
                .and_then(|w| w.installing.as_ref())
                .map(|p| p.context_id.clone())
            else {
                continue;
            };
            match self.choose_source(&id, &ctx) {
                SourceChoice::Use(source, holder) => self.send_install(&id, &ctx, source, holder, now),
                SourceChoice::Wait => self.peer_waiters.push_back(id),
            }
        }
    }

    fn pending_installs(&self, ctx: &ContextId) -> usize {
        self.workers
            .values()
            .filter(|w| w.installing.as_ref().is_some_and(|p| &p.context_id == ctx))
            .count()
    }

    fn dispatch(&mut self, worker: &WorkerId, class: &Option<ContextId>, now: f64) -> Option<TaskId> {
        let entry = self.ledger.dispatch_head(class, worker, now)?;
        let spec = &entry.spec;
        let msg = Message::Invoke {
            task_id: spec.task_id,
            attempt: spec.attempt,
            context_id: spec.context_id.clone(),
            awareness: spec.awareness,
            items: spec.items.clone(),
            inputs: spec.inputs.clone(),
        };
        let (id, attempt) = (spec.task_id, spec.attempt);
        let w = self.workers.get_mut(worker).expect("connected");
        w.state = WorkerState::Busy;
        w.current_task = Some((id, attempt));
        self.emit(LogEvent::new(now, "dispatch").worker(worker).task(id, attempt));
        self.outbox.push(Outgoing {
            to: worker.clone(),
            msg,
        });
        Some(id)
    }

    fn head_fits(&self, class: &Option<ContextId>, w: &WorkerDescriptor) -> bool {
        self.ledger
            .peek_head(class)
            .is_some_and(|e| e.spec.resources.fits_within(&w.resources))
    }

    /// One placement pass over the free workers. Returns the dispatches made.
    pub fn schedule_round(&mut self, now: f64) -> Vec<(TaskId, WorkerId)> {
        self.tick(now);
        let mut placements = Vec::new();
        if self.ledger.ready_total() == 0 {
            return placements;
        }
        let mut free: Vec<&WorkerDescriptor> = self.workers.values().filter(|w| w.is_free()).collect();
        if free.is_empty() {
            return placements;
        }
        free.sort_by(|a, b| {
            b.gpu
                .speed_factor
                .total_cmp(&a.gpu.speed_factor)
                .then(a.conn_seq.cmp(&b.conn_seq))
        });
        let free: Vec<WorkerId> = free.into_iter().map(|w| w.worker_id.clone()).collect();

        // (1) warm workers take tasks for the context they already host
        let mut cold = Vec::new();
        for id in free {
            let w = &self.workers[&id];
            let class = w.hosted_contexts.iter().next().cloned().map(Some);
            match class {
                Some(class) if self.ledger.ready_len(&class) > 0 && self.head_fits(&class, w) => {
                    if let Some(t) = self.dispatch(&id, &class, now) {
                        placements.push((t, id));
                    }
                }
                _ => cold.push(id),
            }
        }

        // (2)+(3) FULL demand not already covered by an install in flight
        let mut uncovered: HashMap<ContextId, usize> = HashMap::new();
        for ctx in self.ledger.full_classes() {
            let ready = self.ledger.ready_len(&Some(ctx.clone()));
            let pending = self.pending_installs(&ctx);
            if ready > pending {
                uncovered.insert(ctx, ready - pending);
            }
        }

        // (4) the rest take the oldest placeable work
        for id in cold {
            if self.ledger.ready_total() == 0 {
                break;
            }
            let w = &self.workers[&id];
            let mut best: Option<(u64, Option<ContextId>)> = None;
            if self.head_fits(&None, w) {
                best = self.ledger.head_seq(&None).map(|s| (s, None));
            }
            let serving_other = w.active_serves > 0;
            for (ctx, n) in &uncovered {
                if *n == 0 || w.hosts(ctx) || serving_other || self.failed_installs.contains(&(id.clone(), ctx.clone()))
                {
                    continue;
                }
                let class = Some(ctx.clone());
                if !self.head_fits(&class, w) {
                    continue;
                }
                if let Some(s) = self.ledger.head_seq(&class) {
                    if best.as_ref().is_none_or(|(b, _)| s < *b) {
                        best = Some((s, class));
                    }
                }
            }
            match best {
                Some((_, None)) => {
                    if let Some(t) = self.dispatch(&id, &None, now) {
                        placements.push((t, id));
                    }
                }
                Some((_, Some(ctx))) => {
                    if let Some(n) = uncovered.get_mut(&ctx) {
                        *n -= 1;
                    }
                    self.install_context(&id, &ctx, now);
                }
                None => {}
            }
        }
        placements
    }

    /// Explains why the run cannot finish, if that is the case.
    pub fn deadlock_diagnostic(&self, arrivals_pending: bool) -> Option<String> {
        if self.drained() || !self.workers.is_empty() || arrivals_pending {
            return None;
        }
        Some(format!(
            "no workers connected and no arrivals pending; {} of {} tasks done, {} items outstanding",
            self.ledger.done_count(),
            self.ledger.len(),
            self.submitted_items() - self.credited_items()
        ))
    }

    /// Queues SHUTDOWN for every connected worker.
    pub fn shutdown_all(&mut self) {
        let mut ids: Vec<WorkerId> = self.workers.keys().cloned().collect();
        ids.sort();
        for id in ids {
            self.outbox.push(Outgoing {
                to: id,
                msg: Message::Shutdown {},
            });
        }
    }

    /// Snapshot of the report so far. `end` is the run's emulated end time.
    pub fn report(&self, end: f64, aborted: Option<String>) -> ExperimentReport {
        let mut r = self.report.clone();
        r.end_to_end = end;
        r.submitted_items = self.submitted_items();
        r.credited_items = self.credited_items();
        r.tasks = self.ledger.len();
        r.aborted = aborted;
        r
    }

    /// Like [`report`](Self::report) but without copying the accumulated records.
    pub fn into_report(self, end: f64, aborted: Option<String>) -> ExperimentReport {
        let mut r = self.report;
        r.end_to_end = end;
        r.submitted_items = self.ledger.submitted_items();
        r.credited_items = self.ledger.credited_items();
        r.tasks = self.ledger.len();
        r.aborted = aborted;
        r
    }
}
