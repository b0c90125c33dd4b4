//! Shared-filesystem contention: aggregate bandwidth split evenly between the
//! active readers, with at most `max_active` streams at once and FIFO queueing
//! beyond that.
//!
//! Rates are piecewise constant. They only change when a lease is admitted,
//! completes or is cancelled, so integrating between those instants is exact.

use std::collections::VecDeque;

pub type ReaderId = u64;

/// Bytes below which a lease counts as complete; absorbs float drift.
const DONE_EPSILON: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FsLease {
    pub reader: ReaderId,
    pub bytes_remaining: f64,
    pub admitted_at: f64,
}

#[derive(Debug, Clone)]
struct Pending {
    reader: ReaderId,
    bytes: f64,
}

#[derive(Debug, Clone)]
pub struct FsEmulator {
    bandwidth: f64,
    max_active: usize,
    active: Vec<FsLease>,
    queue: VecDeque<Pending>,
    clock: f64,
    delivered: f64,
}

impl FsEmulator {
    pub fn new(bandwidth: f64, max_active: u32) -> Self {
        assert!(bandwidth > 0.0 && max_active > 0);
        FsEmulator {
            bandwidth,
            max_active: max_active as usize,
            active: Vec::new(),
            queue: VecDeque::new(),
            clock: 0.0,
            delivered: 0.0,
        }
    }

    /// Current per-reader rate in bytes/s.
    pub fn rate_per_reader(&self) -> f64 {
        if self.active.is_empty() {
            0.0
        } else {
            self.bandwidth / self.active.len() as f64
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn queued_count(&self) -> usize {
        self.queue.len()
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty() && self.queue.is_empty()
    }

    /// Total bytes handed out so far.
    pub fn delivered(&self) -> f64 {
        self.delivered
    }

    pub fn leases(&self) -> &[FsLease] {
        &self.active
    }

    /// Moves the clock to `now`, draining active leases at the current rate.
    pub fn advance(&mut self, now: f64) {
        let dt = now - self.clock;
        if dt > 0.0 && !self.active.is_empty() {
            let per = self.rate_per_reader() * dt;
            for lease in &mut self.active {
                let take = per.min(lease.bytes_remaining);
                lease.bytes_remaining -= take;
                self.delivered += take;
            }
        }
        if now > self.clock {
            self.clock = now;
        }
    }

    /// Starts (or queues) a fetch of `bytes` for `reader`.
    pub fn admit(&mut self, reader: ReaderId, bytes: u64, now: f64) {
        self.advance(now);
        self.queue.push_back(Pending {
            reader,
            bytes: bytes as f64,
        });
        self.promote();
    }

    /// Drops `reader`'s lease or queue slot, e.g. because it disconnected.
    pub fn cancel(&mut self, reader: ReaderId, now: f64) -> bool {
        self.advance(now);
        let before = self.active.len() + self.queue.len();
        self.active.retain(|l| l.reader != reader);
        self.queue.retain(|p| p.reader != reader);
        let removed = before != self.active.len() + self.queue.len();
        self.promote();
        removed
    }

    /// Instant and reader of the next completion under current rates.
    pub fn next_completion(&self) -> Option<(f64, ReaderId)> {
        let rate = self.rate_per_reader();
        self.active
            .iter()
            .min_by(|a, b| a.bytes_remaining.total_cmp(&b.bytes_remaining))
            .map(|l| (self.clock + l.bytes_remaining.max(0.0) / rate, l.reader))
    }

    /// Advances to `now` and retires every lease that has finished.
    pub fn complete_due(&mut self, now: f64) -> Vec<ReaderId> {
        self.advance(now);
        let mut done = Vec::new();
        self.active.retain(|l| {
            if l.bytes_remaining <= DONE_EPSILON {
                done.push(l.reader);
                false
            } else {
                true
            }
        });
        if !done.is_empty() {
            self.promote();
        }
        done
    }

    fn promote(&mut self) {
        while self.active.len() < self.max_active {
            let Some(p) = self.queue.pop_front() else { break };
            self.active.push(FsLease {
                reader: p.reader,
                bytes_remaining: p.bytes,
                admitted_at: self.clock,
            });
        }
    }
}

/// Runs the emulator to completion for readers that all start at given times,
/// returning each reader's finish time. Handy for planning and tests.
pub fn simulate_fetches(bandwidth: f64, max_active: u32, requests: &[(ReaderId, u64, f64)]) -> Vec<(ReaderId, f64)> {
    let mut fs = FsEmulator::new(bandwidth, max_active);
    let mut pending: Vec<_> = requests.to_vec();
    pending.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut pending: VecDeque<_> = pending.into();
    let mut finished = Vec::new();
    loop {
        let next_arrival = pending.front().map(|r| r.2);
        let next_done = fs.next_completion().map(|c| c.0);
        match (next_arrival, next_done) {
            (None, None) => break,
            (Some(a), d) if d.is_none_or(|d| a <= d) => {
                let (reader, bytes, at) = pending.pop_front().unwrap();
                fs.admit(reader, bytes, at);
            }
            (_, Some(d)) => {
                for r in fs.complete_due(d) {
                    finished.push((r, d));
                }
            }
            _ => unreachable!(),
        }
    }
    finished
}
