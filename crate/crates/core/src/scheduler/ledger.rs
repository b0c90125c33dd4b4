//! Per-task state and the ready queues.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::model::{Awareness, ContextId, ItemId, TaskId, TaskSpec, WorkerId};
use crate::protocol::ItemResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Ready,
    Dispatched,
    Done,
}

#[derive(Debug, Clone)]
pub struct TaskEntry {
    pub spec: TaskSpec,
    pub state: TaskState,
    /// Submission order; requeued tasks keep it, so they go back to the front.
    pub seq: u64,
    pub accepted_attempt: Option<u32>,
    pub submitted_at: f64,
    pub dispatched_at: Option<f64>,
    pub completed_at: Option<f64>,
    pub worker: Option<WorkerId>,
}

impl TaskEntry {
    pub fn class(&self) -> Option<ContextId> {
        task_class(&self.spec)
    }
}

/// FULL tasks queue per context; everything else shares one queue.
pub fn task_class(spec: &TaskSpec) -> Option<ContextId> {
    match spec.awareness {
        Awareness::Full => spec.context_id.clone(),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Acceptance {
    /// First valid result for the task; carries the number of items credited.
    Credited(u64),
    /// Task already done, or the attempt/worker is no longer the outstanding one.
    Stale,
    /// Items in the result do not match the dispatched batch.
    Mismatch,
    Unknown,
}

#[derive(Debug, Default)]
pub struct TaskLedger {
    entries: HashMap<TaskId, TaskEntry>,
    queues: HashMap<Option<ContextId>, BTreeSet<(u64, TaskId)>>,
    next_seq: u64,
    submitted_items: u64,
    credited_items: u64,
    done: usize,
}

impl TaskLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: TaskId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn get(&self, id: TaskId) -> Option<&TaskEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &TaskEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn done_count(&self) -> usize {
        self.done
    }

    pub fn all_done(&self) -> bool {
        self.done == self.entries.len()
    }

    pub fn submitted_items(&self) -> u64 {
        self.submitted_items
    }

    pub fn credited_items(&self) -> u64 {
        self.credited_items
    }

    /// Caller has validated the spec and checked for duplicates.
    pub(crate) fn insert(&mut self, spec: TaskSpec, now: f64) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let id = spec.task_id;
        self.submitted_items += spec.items.len() as u64;
        self.queues.entry(task_class(&spec)).or_default().insert((seq, id));
        self.entries.insert(
            id,
            TaskEntry {
                spec,
                state: TaskState::Ready,
                seq,
                accepted_attempt: None,
                submitted_at: now,
                dispatched_at: None,
                completed_at: None,
                worker: None,
            },
        );
    }

    pub fn ready_len(&self, class: &Option<ContextId>) -> usize {
        self.queues.get(class).map_or(0, |q| q.len())
    }

    pub fn ready_total(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }

    /// Submission seq of the oldest ready task in `class`.
    pub fn head_seq(&self, class: &Option<ContextId>) -> Option<u64> {
        self.queues.get(class).and_then(|q| q.first()).map(|(s, _)| *s)
    }

    pub fn peek_head(&self, class: &Option<ContextId>) -> Option<&TaskEntry> {
        let (_, id) = self.queues.get(class)?.first()?;
        self.entries.get(id)
    }

    /// Context classes with ready FULL tasks, in a stable order.
    pub fn full_classes(&self) -> Vec<ContextId> {
        let mut v: Vec<ContextId> = self
            .queues
            .iter()
            .filter(|(k, q)| k.is_some() && !q.is_empty())
            .filter_map(|(k, _)| k.clone())
            .collect();
        v.sort();
        v
    }

    /// Removes the oldest ready task of `class` and marks it dispatched.
    pub(crate) fn dispatch_head(
        &mut self,
        class: &Option<ContextId>,
        worker: &WorkerId,
        now: f64,
    ) -> Option<&TaskEntry> {
        let (_, id) = self.queues.get_mut(class)?.pop_first()?;
        let entry = self.entries.get_mut(&id).expect("queued task has an entry");
        entry.state = TaskState::Dispatched;
        entry.dispatched_at = Some(now);
        entry.worker = Some(worker.clone());
        Some(entry)
    }

    /// Returns a dispatched task to its queue with the next attempt number.
    pub(crate) fn requeue(&mut self, id: TaskId) -> bool {
        let Some(entry) = self.entries.get_mut(&id) else {
            return false;
        };
        if entry.state != TaskState::Dispatched {
            return false;
        }
        entry.state = TaskState::Ready;
        entry.spec.attempt += 1;
        entry.worker = None;
        entry.dispatched_at = None;
        let class = task_class(&entry.spec);
        self.queues.entry(class).or_default().insert((entry.seq, id));
        true
    }

    pub(crate) fn accept(
        &mut self,
        id: TaskId,
        attempt: u32,
        from: &WorkerId,
        results: &[ItemResult],
        now: f64,
    ) -> Acceptance {
        let Some(entry) = self.entries.get_mut(&id) else {
            return Acceptance::Unknown;
        };
        if entry.state != TaskState::Dispatched || entry.spec.attempt != attempt || entry.worker.as_ref() != Some(from)
        {
            return Acceptance::Stale;
        }
        let mut want: BTreeMap<ItemId, usize> = BTreeMap::new();
        for i in &entry.spec.items {
            *want.entry(i.item_id).or_default() += 1;
        }
        let mut got: BTreeMap<ItemId, usize> = BTreeMap::new();
        for r in results {
            *got.entry(r.item_id).or_default() += 1;
        }
        if want != got {
            return Acceptance::Mismatch;
        }
        entry.state = TaskState::Done;
        entry.accepted_attempt = Some(attempt);
        entry.completed_at = Some(now);
        let n = entry.spec.items.len() as u64;
        self.credited_items += n;
        self.done += 1;
        Acceptance::Credited(n)
    }
}
