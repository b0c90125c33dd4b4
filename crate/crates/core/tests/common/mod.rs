#![allow(dead_code)]

pub mod oracles;
pub mod strategies;

use pcm_core::config::Config;
use pcm_core::factory::{TraceEvent, VictimPolicy};
use pcm_core::model::{A10, TITAN_X_PASCAL};

pub fn cfg() -> Config {
    Config::default()
}

/// `n` workers of one model arriving together.
pub fn arrivals(at: f64, n: usize, gpu: &str) -> Vec<TraceEvent> {
    (0..n).map(|_| TraceEvent::arrive(at, gpu)).collect()
}

pub fn static_pool() -> Vec<TraceEvent> {
    let mut t = arrivals(0.0, 10, A10);
    t.extend(arrivals(0.0, 10, TITAN_X_PASCAL));
    t
}

pub fn kill_at(at: f64) -> TraceEvent {
    TraceEvent::preempt(at, VictimPolicy::Random)
}

pub fn rel_close(actual: f64, expected: f64, tol: f64) -> bool {
    ((actual - expected) / expected).abs() <= tol
}
