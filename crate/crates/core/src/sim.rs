//! Discrete-event driver: the scheduler, the worker nodes, the filesystem
//! emulator and a trace, all on one virtual clock.
//!
//! Messages are delivered in the instant they are sent. Everything that takes
//! time is a [`Step`] of a worker [`Job`], charged through the same cost model
//! the live workers use.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, SchedulerSettings};
use crate::cost::{CostModel, Stage};
use crate::factory::{select_victim, FsEmulator, LiveWorker, TraceEvent, TraceKind};
use crate::model::{ContextRecipe, GpuCatalog, ResourceRequest, TaskSpec, WorkerId};
use crate::protocol::{InstallFailure, InvokeFailure, Message};
use crate::scheduler::{ExperimentReport, LogEvent, Scheduler, SubmitError};
use crate::worker::{Job, Step, WorkerNode};

/// Grid spacing for periodic metric samples, emulated seconds.
pub const SAMPLE_INTERVAL: f64 = 10.0;

/// Prefix of the peer addresses simulated workers advertise.
const SIM_ADDR_PREFIX: &str = "sim://";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub t_emulated: f64,
    pub completed_items: u64,
    pub connected_workers: usize,
    pub warm_workers: usize,
}

#[derive(Debug, Clone)]
pub struct SimSettings {
    pub cost: CostModel,
    pub scheduler: SchedulerSettings,
    pub worker_capacity: ResourceRequest,
    pub catalog: GpuCatalog,
    pub seed: u64,
    pub event_log: bool,
    /// Stop at this emulated time even if work remains.
    pub horizon: Option<f64>,
}

impl SimSettings {
    pub fn from_config(cfg: &Config, seed: u64) -> Self {
        SimSettings {
            cost: cfg.cost.clone(),
            scheduler: cfg.scheduler.clone(),
            worker_capacity: cfg.worker_capacity,
            catalog: cfg.catalog(),
            seed,
            event_log: false,
            horizon: None,
        }
    }
}

impl Default for SimSettings {
    fn default() -> Self {
        Self::from_config(&Config::default(), 0)
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: ExperimentReport,
    pub samples: Vec<Sample>,
    pub log: Vec<LogEvent>,
    /// Bytes the shared filesystem delivered over the run.
    pub fs_bytes: f64,
    pub events_processed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Trace(usize),
    StepDone { worker: usize, token: u64 },
    FsCheck { gen: u64 },
    Sample,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    at: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

struct Running {
    job: Job,
    step: Option<Step>,
    step_started: f64,
    /// Holder serving the current peer fetch.
    peer: Option<usize>,
}

struct SimWorker {
    node: WorkerNode,
    alive: bool,
    arrival_seq: u64,
    token: u64,
    running: Option<Running>,
    /// Workers this one is currently serving a template to.
    serving: Vec<usize>,
}

enum Envelope {
    ToScheduler(WorkerId, Message),
    ToWorker(usize, Message),
}

pub struct Simulation {
    settings: SimSettings,
    sched: Scheduler,
    workers: Vec<SimWorker>,
    index: HashMap<WorkerId, usize>,
    fs: FsEmulator,
    fs_gen: u64,
    heap: BinaryHeap<Event>,
    next_seq: u64,
    now: f64,
    trace: Vec<TraceEvent>,
    trace_pending: usize,
    rng: ChaCha8Rng,
    mail: VecDeque<Envelope>,
    samples: Vec<Sample>,
    log: Vec<LogEvent>,
    events: u64,
}

impl Simulation {
    pub fn new(settings: SimSettings, trace: Vec<TraceEvent>) -> Self {
        let mut sched = Scheduler::new(settings.scheduler.clone());
        sched.set_event_log(settings.event_log);
        let fs = FsEmulator::new(
            settings.cost.fs_aggregate_bandwidth,
            settings.cost.fs_max_concurrent_ops,
        );
        let rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed_f00d);
        let mut sim = Simulation {
            sched,
            workers: Vec::new(),
            index: HashMap::new(),
            fs,
            fs_gen: 0,
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0.0,
            trace_pending: trace.len(),
            trace: Vec::new(),
            rng,
            mail: VecDeque::new(),
            samples: Vec::new(),
            log: Vec::new(),
            events: 0,
            settings,
        };
        for (i, e) in trace.iter().enumerate() {
            sim.push(e.at, Kind::Trace(i));
        }
        sim.trace = trace;
        sim.push(0.0, Kind::Sample);
        sim
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn register_recipe(&mut self, recipe: ContextRecipe) {
        self.sched.register_recipe(recipe);
    }

    pub fn submit(&mut self, tasks: Vec<TaskSpec>) -> Result<(), SubmitError> {
        self.sched.submit_all(tasks, self.now)?;
        self.flush_outbox();
        self.pump_mail();
        Ok(())
    }

    fn push(&mut self, at: f64, kind: Kind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { at, seq, kind });
    }

    fn sample(&mut self) {
        let s = Sample {
            t_emulated: self.now,
            completed_items: self.sched.credited_items(),
            connected_workers: self.sched.connected_workers(),
            warm_workers: self.sched.warm_workers(),
        };
        if let Some(last) = self.samples.last() {
            if last == &s {
                return;
            }
        }
        self.samples.push(s);
    }

    /// Runs until every task is credited, the pool is gone for good, or the horizon passes.
    pub fn run(mut self) -> SimOutcome {
        let (end, aborted) = loop {
            if self.sched.drained() {
                break (self.sched.last_credit_at().unwrap_or(0.0), None);
            }
            if let Some(d) = self.sched.deadlock_diagnostic(self.trace_pending > 0) {
                break (self.now, Some(d));
            }
            let Some(ev) = self.heap.pop() else {
                break (self.now, Some("event queue empty with work outstanding".to_string()));
            };
            if let Some(h) = self.settings.horizon {
                if ev.at > h {
                    self.now = h;
                    break (h, Some(format!("horizon {h} s reached")));
                }
            }
            self.now = self.now.max(ev.at);
            self.events += 1;
            match ev.kind {
                Kind::Trace(i) => {
                    self.trace_pending -= 1;
                    let e = self.trace[i].clone();
                    self.on_trace(&e);
                }
                Kind::StepDone { worker, token } => {
                    let w = &self.workers[worker];
                    if w.alive && w.token == token {
                        self.finish_step(worker);
                    }
                }
                Kind::FsCheck { gen } => {
                    if gen == self.fs_gen {
                        self.on_fs_check();
                    }
                }
                Kind::Sample => {
                    self.sample();
                    let next = self.now + SAMPLE_INTERVAL;
                    self.push(next, Kind::Sample);
                }
            }
            self.pump_mail();
        };
        self.now = self.now.max(end);
        self.sample();
        if self.settings.event_log {
            self.log.extend(self.sched.take_log());
        }
        let fs_bytes = self.fs.delivered();
        let report = self.sched.into_report(end, aborted);
        SimOutcome {
            report,
            samples: self.samples,
            log: self.log,
            fs_bytes,
            events_processed: self.events,
        }
    }

    fn on_trace(&mut self, e: &TraceEvent) {
        match e.kind {
            TraceKind::Arrive => {
                let name = e.gpu_model.as_deref().unwrap_or_default();
                let Some(gpu) = self.settings.catalog.get(name).cloned() else {
                    self.log
                        .push(LogEvent::new(self.now, "spawn_failed").detail(name.to_string()));
                    return;
                };
                let idx = self.workers.len();
                let id = WorkerId::new(format!("w{idx}"));
                let node = WorkerNode::new(
                    id.clone(),
                    gpu,
                    self.settings.worker_capacity,
                    self.settings.cost.clone(),
                    self.settings.scheduler.max_concurrent_peer_serves,
                )
                .with_peer_address(format!("{SIM_ADDR_PREFIX}{idx}"));
                let register = node.register_message();
                self.workers.push(SimWorker {
                    node,
                    alive: true,
                    arrival_seq: idx as u64,
                    token: 0,
                    running: None,
                    serving: Vec::new(),
                });
                self.index.insert(id.clone(), idx);
                self.mail.push_back(Envelope::ToScheduler(id, register));
            }
            TraceKind::Preempt => {
                let alive: Vec<LiveWorker> = self
                    .workers
                    .iter()
                    .filter(|w| w.alive)
                    .map(|w| LiveWorker {
                        id: w.node.id().clone(),
                        gpu: w.node.gpu().name.clone(),
                        seq: w.arrival_seq,
                    })
                    .collect();
                let policy = e.victim_policy.clone().unwrap_or(crate::factory::VictimPolicy::Random);
                match select_victim(&policy, &alive, &mut self.rng) {
                    Some(victim) => {
                        let idx = self.index[&victim];
                        self.kill(idx);
                    }
                    None => self.log.push(LogEvent::new(self.now, "preempt_no_victim")),
                }
            }
        }
    }

    /// Abrupt preemption: the worker stops mid-step and says nothing.
    pub fn kill_worker(&mut self, id: &WorkerId) -> bool {
        match self.index.get(id).copied() {
            Some(idx) if self.workers[idx].alive => {
                self.kill(idx);
                self.pump_mail();
                true
            }
            _ => false,
        }
    }

    fn kill(&mut self, idx: usize) {
        let now = self.now;
        let w = &mut self.workers[idx];
        w.alive = false;
        w.token += 1;
        let running = w.running.take();
        let served = std::mem::take(&mut w.serving);
        let id = w.node.id().clone();
        if let Some(r) = running {
            match r.step {
                Some(Step::FsFetch { .. }) => {
                    self.fs.cancel(idx as u64, now);
                    self.reschedule_fs();
                }
                Some(Step::PeerFetch { .. }) => {
                    if let Some(h) = r.peer {
                        self.release_serve(h, idx);
                    }
                }
                _ => {}
            }
        }
        // transfers this worker was serving die with it
        for requester in served {
            self.peer_failed(requester);
        }
        self.sched.on_worker_lost(&id, now);
        self.flush_outbox();
    }

    fn release_serve(&mut self, holder: usize, requester: usize) {
        let h = &mut self.workers[holder];
        if let Some(pos) = h.serving.iter().position(|r| *r == requester) {
            h.serving.remove(pos);
            h.node.end_serve();
        }
    }

    fn peer_failed(&mut self, requester: usize) {
        let now = self.now;
        let w = &mut self.workers[requester];
        if !w.alive {
            return;
        }
        let Some(r) = w.running.as_mut() else { return };
        let Some(Step::PeerFetch { bytes, .. }) = r.step.clone() else {
            return;
        };
        let wasted = now - r.step_started;
        r.job.fall_back_to_fs(bytes, wasted);
        r.step = None;
        r.peer = None;
        w.token += 1;
        self.advance(requester);
    }

    fn flush_outbox(&mut self) {
        for out in self.sched.take_outbox() {
            if let Some(&idx) = self.index.get(&out.to) {
                self.mail.push_back(Envelope::ToWorker(idx, out.msg));
            }
        }
    }

    fn pump_mail(&mut self) {
        while let Some(env) = self.mail.pop_front() {
            match env {
                Envelope::ToScheduler(from, msg) => {
                    let is_result = matches!(msg, Message::Result { .. });
                    self.sched.on_message(&from, msg, self.now);
                    if is_result {
                        self.sample();
                    }
                    self.flush_outbox();
                }
                Envelope::ToWorker(idx, msg) => self.deliver(idx, msg),
            }
            if self.settings.event_log {
                self.log.extend(self.sched.take_log());
            }
        }
    }

    fn deliver(&mut self, idx: usize, msg: Message) {
        let now = self.now;
        let w = &mut self.workers[idx];
        if !w.alive {
            return;
        }
        let id = w.node.id().clone();
        let started = match msg {
            Message::InstallContext { recipe, source } => {
                let ctx = recipe.context_id.clone();
                if w.running.is_some() {
                    Err(Message::InstallFailed {
                        context_id: ctx,
                        reason: InstallFailure::Busy,
                    })
                } else {
                    w.node
                        .begin_install(recipe, source, now)
                        .map_err(|reason| Message::InstallFailed {
                            context_id: ctx,
                            reason,
                        })
                }
            }
            Message::Invoke {
                task_id,
                attempt,
                context_id,
                awareness,
                items,
                inputs,
            } => {
                if w.running.is_some() {
                    Err(Message::InvokeFailed {
                        task_id,
                        attempt,
                        reason: InvokeFailure::Busy,
                    })
                } else {
                    w.node
                        .begin_invoke(task_id, attempt, awareness, context_id, items, inputs, now)
                        .map_err(|reason| Message::InvokeFailed {
                            task_id,
                            attempt,
                            reason,
                        })
                }
            }
            _ => return,
        };
        match started {
            Ok(job) => {
                w.running = Some(Running {
                    job,
                    step: None,
                    step_started: now,
                    peer: None,
                });
                self.advance(idx);
            }
            Err(reply) => self.mail.push_back(Envelope::ToScheduler(id, reply)),
        }
    }

    /// Starts the next step of `idx`'s job, or finishes the job.
    fn advance(&mut self, idx: usize) {
        let now = self.now;
        let next = self.workers[idx]
            .running
            .as_mut()
            .expect("advance with a job")
            .job
            .next_step();
        let Some(step) = next else {
            let w = &mut self.workers[idx];
            let running = w.running.take().expect("checked");
            let reply = w.node.finish(running.job, now);
            if let Message::Result { task_id, attempt, .. } = &reply {
                w.node.reap(*task_id, *attempt);
            }
            let id = w.node.id().clone();
            self.mail.push_back(Envelope::ToScheduler(id, reply));
            return;
        };
        let w = &mut self.workers[idx];
        let r = w.running.as_mut().expect("checked");
        r.step = Some(step.clone());
        r.step_started = now;
        w.token += 1;
        let token = w.token;
        match step {
            Step::Work { seconds, .. } => self.push(now + seconds.max(0.0), Kind::StepDone { worker: idx, token }),
            Step::FsFetch { bytes } => {
                self.fs.admit(idx as u64, bytes, now);
                self.reschedule_fs();
            }
            Step::PeerFetch {
                address,
                context_id,
                bytes,
            } => {
                let holder = address
                    .strip_prefix(SIM_ADDR_PREFIX)
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|h| *h != idx && *h < self.workers.len() && self.workers[*h].alive);
                let accepted = holder.filter(|h| self.workers[*h].node.serve_peer(&context_id).is_ok());
                match accepted {
                    Some(h) => {
                        self.workers[h].serving.push(idx);
                        self.workers[idx].running.as_mut().expect("running").peer = Some(h);
                        let secs = bytes as f64 / self.settings.cost.peer_bandwidth;
                        self.push(now + secs, Kind::StepDone { worker: idx, token });
                    }
                    None => {
                        // NOT_FOUND or BUSY: straight to the filesystem
                        let r = self.workers[idx].running.as_mut().expect("running");
                        r.job.fall_back_to_fs(bytes, 0.0);
                        r.step = None;
                        self.advance(idx);
                    }
                }
            }
        }
    }

    fn finish_step(&mut self, idx: usize) {
        let now = self.now;
        let r = self.workers[idx].running.as_mut().expect("step done without a job");
        let step = r.step.take().expect("step in flight");
        let elapsed = now - r.step_started;
        r.job.record(step.stage(), elapsed);
        if let Some(h) = r.peer.take() {
            self.release_serve(h, idx);
        }
        self.advance(idx);
    }

    fn reschedule_fs(&mut self) {
        self.fs_gen += 1;
        if let Some((t, _)) = self.fs.next_completion() {
            let gen = self.fs_gen;
            self.push(t.max(self.now), Kind::FsCheck { gen });
        }
    }

    fn on_fs_check(&mut self) {
        let done = self.fs.complete_due(self.now);
        for reader in &done {
            let idx = *reader as usize;
            let w = &mut self.workers[idx];
            if !w.alive {
                continue;
            }
            if let Some(r) = w.running.as_mut() {
                if matches!(r.step, Some(Step::FsFetch { .. })) {
                    r.step = None;
                    let elapsed = self.now - r.step_started;
                    r.job.record(Stage::FsFetch, elapsed);
                    self.advance(idx);
                }
            }
        }
        self.reschedule_fs();
    }
}

/// Convenience wrapper: one recipe, one task list, one trace.
pub fn simulate(
    settings: SimSettings,
    recipe: ContextRecipe,
    tasks: Vec<TaskSpec>,
    trace: Vec<TraceEvent>,
) -> Result<SimOutcome, SubmitError> {
    let mut sim = Simulation::new(settings, trace);
    sim.register_recipe(recipe);
    sim.submit(tasks)?;
    Ok(sim.run())
}
