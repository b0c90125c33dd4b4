//! Worker arrival and preemption traces, and the seeded generators for the
//! four reference scenarios.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GpuCatalog, WorkerId, A10, TITAN_X_PASCAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceKind {
    Arrive,
    Preempt,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VictimPolicy {
    /// Longest-connected A10 first; once none remain, longest-connected of any model.
    OldestA10First,
    Random,
    Specific(WorkerId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub at: f64,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victim_policy: Option<VictimPolicy>,
}

impl TraceEvent {
    pub fn arrive(at: f64, gpu: &str) -> Self {
        TraceEvent {
            at,
            kind: TraceKind::Arrive,
            gpu_model: Some(gpu.to_string()),
            victim_policy: None,
        }
    }

    pub fn preempt(at: f64, policy: VictimPolicy) -> Self {
        TraceEvent {
            at,
            kind: TraceKind::Preempt,
            gpu_model: None,
            victim_policy: Some(policy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    Static20,
    Preempt1pm,
    LowCapacity,
    HighCapacity,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Static20,
        Scenario::Preempt1pm,
        Scenario::LowCapacity,
        Scenario::HighCapacity,
    ];

    pub fn cli_name(&self) -> &'static str {
        match self {
            Scenario::Static20 => "static20",
            Scenario::Preempt1pm => "preempt-1pm",
            Scenario::LowCapacity => "low-capacity",
            Scenario::HighCapacity => "high-capacity",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Scenario {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match norm.as_str() {
            "static20" => Ok(Scenario::Static20),
            "preempt1pm" => Ok(Scenario::Preempt1pm),
            "lowcapacity" | "low" => Ok(Scenario::LowCapacity),
            "highcapacity" | "high" => Ok(Scenario::HighCapacity),
            _ => Err(TraceError::UnknownScenario(s.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("trace line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("trace events out of order at index {0}")]
    Unsorted(usize),
    #[error("event {0}: ARRIVE needs a gpu_model, PREEMPT needs a victim_policy")]
    Incomplete(usize),
    #[error("unknown gpu model {0:?}")]
    UnknownGpu(String),
    #[error("{count} arrivals of {model} exceed the {limit} the cluster owns")]
    OverCatalog { model: String, count: u32, limit: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const STATIC_POOL: usize = 20;
pub const PREEMPT_START: f64 = 900.0;
pub const PREEMPT_INTERVAL: f64 = 60.0;
pub const LOW_CAPACITY_START: usize = 4;
pub const LOW_CAPACITY_STEP: f64 = 250.0;
pub const HIGH_CAPACITY_PEAK: usize = 186;

fn static_pool() -> Vec<TraceEvent> {
    let mut events: Vec<_> = (0..STATIC_POOL / 2).map(|_| TraceEvent::arrive(0.0, A10)).collect();
    events.extend((0..STATIC_POOL / 2).map(|_| TraceEvent::arrive(0.0, TITAN_X_PASCAL)));
    events
}

/// Draws `n` GPU models without replacement from the cluster's population.
fn draw_models(catalog: &GpuCatalog, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool: Vec<&str> = catalog
        .entries
        .iter()
        .flat_map(|e| std::iter::repeat_n(e.model.name.as_str(), e.count as usize))
        .collect();
    pool.shuffle(rng);
    pool.into_iter().take(n).map(str::to_string).collect()
}

pub fn generate_trace(scenario: Scenario, seed: u64, catalog: &GpuCatalog) -> Result<Vec<TraceEvent>, TraceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = match scenario {
        Scenario::Static20 => static_pool(),
        Scenario::Preempt1pm => {
            let mut events = static_pool();
            events.extend((0..STATIC_POOL).map(|k| {
                TraceEvent::preempt(
                    PREEMPT_START + PREEMPT_INTERVAL * k as f64,
                    VictimPolicy::OldestA10First,
                )
            }));
            events
        }
        Scenario::LowCapacity => {
            let models = draw_models(catalog, STATIC_POOL, &mut rng);
            let mut events: Vec<_> = models[..LOW_CAPACITY_START]
                .iter()
                .map(|m| TraceEvent::arrive(0.0, m))
                .collect();
            for (k, m) in models[LOW_CAPACITY_START..].iter().enumerate() {
                let jitter: f64 = rng.gen_range(-0.2..0.2) * LOW_CAPACITY_STEP;
                let at = LOW_CAPACITY_STEP * (k + 1) as f64 + jitter;
                events.push(TraceEvent::arrive(at.round(), m));
            }
            events.sort_by(|a, b| a.at.total_cmp(&b.at));
            events
        }
        Scenario::HighCapacity => {
            let models = draw_models(catalog, HIGH_CAPACITY_PEAK, &mut rng);
            let mut events = Vec::with_capacity(HIGH_CAPACITY_PEAK);
            let mut t = 0.0;
            let mut next = 0;
            while next < models.len() {
                let burst = rng.gen_range(5..=30).min(models.len() - next);
                for m in &models[next..next + burst] {
                    events.push(TraceEvent::arrive(t, m));
                }
                next += burst;
                // geometric gap, mean 30 s, whole seconds
                let mut gap = 1.0;
                while rng.gen_bool(1.0 - 1.0 / 30.0) {
                    gap += 1.0;
                }
                t += gap;
            }
            events
        }
    };
    validate_trace(&events, catalog)?;
    Ok(events)
}

pub fn validate_trace(events: &[TraceEvent], catalog: &GpuCatalog) -> Result<(), TraceError> {
    let mut counts: HashMap<&str, u32> = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        if i > 0 && e.at < events[i - 1].at {
            return Err(TraceError::Unsorted(i));
        }
        match e.kind {
            TraceKind::Arrive => {
                let name = e.gpu_model.as_deref().ok_or(TraceError::Incomplete(i))?;
                let model = catalog
                    .get(name)
                    .ok_or_else(|| TraceError::UnknownGpu(name.to_string()))?;
                *counts.entry(model.name.as_str()).or_default() += 1;
            }
            TraceKind::Preempt => {
                if e.victim_policy.is_none() {
                    return Err(TraceError::Incomplete(i));
                }
            }
        }
    }
    for (model, count) in counts {
        let limit = catalog.count_of(model).unwrap_or(0);
        if count > limit {
            return Err(TraceError::OverCatalog {
                model: model.to_string(),
                count,
                limit,
            });
        }
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_trace<W: Write>(events: &[TraceEvent], mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_to_string(events: &[TraceEvent]) -> String {
    let mut out = Vec::new();
    write_trace(events, &mut out).expect("writing to a Vec");
    String::from_utf8(out).expect("json is utf-8")
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TraceEvent = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        events.push(e);
    }
    Ok(events)
}

/// A worker the factory could preempt.
#[derive(Debug, Clone)]
pub struct LiveWorker {
    pub id: WorkerId,
    pub gpu: String,
    /// Arrival order; lower is older.
    pub seq: u64,
}

pub fn select_victim<R: Rng>(policy: &VictimPolicy, alive: &[LiveWorker], rng: &mut R) -> Option<WorkerId> {
    match policy {
        VictimPolicy::OldestA10First => alive
            .iter()
            .filter(|w| w.gpu == A10)
            .min_by_key(|w| w.seq)
            .or_else(|| alive.iter().min_by_key(|w| w.seq))
            .map(|w| w.id.clone()),
        VictimPolicy::Random => alive.choose(rng).map(|w| w.id.clone()),
        VictimPolicy::Specific(id) => alive.iter().find(|w| &w.id == id).map(|w| w.id.clone()),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceSummary {
    pub arrivals: usize,
    pub preemptions: usize,
    pub peak_pool: usize,
    pub last_event_at: f64,
    pub arrivals_by_model: Vec<(String, usize)>,
}

/// Counts and the largest pool size a trace can reach (assuming every
/// preemption finds a victim).
pub fn summarize_trace(events: &[TraceEvent]) -> TraceSummary {
    let mut s = TraceSummary::default();
    let mut pool: i64 = 0;
    let mut by_model: HashMap<String, usize> = HashMap::new();
    for e in events {
        match e.kind {
            TraceKind::Arrive => {
                s.arrivals += 1;
                pool += 1;
                *by_model.entry(e.gpu_model.clone().unwrap_or_default()).or_default() += 1;
            }
            TraceKind::Preempt => {
                s.preemptions += 1;
                pool = (pool - 1).max(0);
            }
        }
        s.peak_pool = s.peak_pool.max(pool as usize);
        s.last_event_at = e.at;
    }
    let mut models: Vec<_> = by_model.into_iter().collect();
    models.sort();
    s.arrivals_by_model = models;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat() -> GpuCatalog {
        GpuCatalog::standard()
    }

    #[test]
    fn static20_is_ten_of_each() {
        let t = generate_trace(Scenario::Static20, 1, &cat()).unwrap();
        assert_eq!(t.len(), 20);
        assert!(t.iter().all(|e| e.at == 0.0 && e.kind == TraceKind::Arrive));
        assert_eq!(t.iter().filter(|e| e.gpu_model.as_deref() == Some(A10)).count(), 10);
        assert_eq!(
            t.iter()
                .filter(|e| e.gpu_model.as_deref() == Some(TITAN_X_PASCAL))
                .count(),
            10
        );
    }

    #[test]
    fn preempt_1pm_drains_the_pool() {
        let t = generate_trace(Scenario::Preempt1pm, 1, &cat()).unwrap();
        let pre: Vec<f64> = t
            .iter()
            .filter(|e| e.kind == TraceKind::Preempt)
            .map(|e| e.at)
            .collect();
        assert_eq!(pre.len(), 20);
        assert_eq!(pre[0], 900.0);
        assert_eq!(pre[1], 960.0);
        assert_eq!(pre[19], 900.0 + 19.0 * 60.0);
        let s = summarize_trace(&t);
        assert_eq!(s.peak_pool, 20);
        assert_eq!(s.arrivals - s.preemptions, 0);
    }

    #[test]
    fn low_capacity_ramps_4_to_20() {
        let t = generate_trace(Scenario::LowCapacity, 3, &cat()).unwrap();
        assert_eq!(t.iter().filter(|e| e.at == 0.0).count(), 4);
        assert_eq!(summarize_trace(&t).peak_pool, 20);
    }

    #[test]
    fn high_capacity_reaches_186_in_bursts() {
        let t = generate_trace(Scenario::HighCapacity, 11, &cat()).unwrap();
        let s = summarize_trace(&t);
        assert_eq!(s.peak_pool, 186);
        assert_eq!(s.preemptions, 0);
        let mut times: Vec<f64> = t.iter().map(|e| e.at).collect();
        times.dedup();
        assert!(times.len() >= 186 / 30);
        assert!(s.arrivals_by_model.len() > 2);
    }

    #[test]
    fn same_seed_same_trace() {
        for sc in Scenario::ALL {
            let a = trace_to_string(&generate_trace(sc, 7, &cat()).unwrap());
            let b = trace_to_string(&generate_trace(sc, 7, &cat()).unwrap());
            assert_eq!(a, b);
        }
        let a = generate_trace(Scenario::HighCapacity, 7, &cat()).unwrap();
        let b = generate_trace(Scenario::HighCapacity, 8, &cat()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn jsonl_round_trip_and_shape() {
        let t = generate_trace(Scenario::Preempt1pm, 1, &cat()).unwrap();
        let text = trace_to_string(&t);
        assert!(text.lines().next().unwrap().contains(r#""kind":"ARRIVE""#));
        assert!(text.contains(r#""victim_policy":"OLDEST_A10_FIRST""#));
        assert_eq!(read_trace(text.as_bytes()).unwrap(), t);
        let specific = trace_to_string(&[TraceEvent::preempt(1.0, VictimPolicy::Specific(WorkerId::new("w3")))]);
        assert_eq!(
            specific.trim(),
            r#"{"at":1.0,"kind":"PREEMPT","victim_policy":{"SPECIFIC":"w3"}}"#
        );
    }

    #[test]
    fn validation_errors() {
        let c = cat();
        let unsorted = vec![TraceEvent::arrive(5.0, A10), TraceEvent::arrive(1.0, A10)];
        assert!(matches!(validate_trace(&unsorted, &c), Err(TraceError::Unsorted(1))));
        let too_many: Vec<_> = (0..16)
            .map(|_| TraceEvent::arrive(0.0, "NVIDIA H100 80GB HBM3"))
            .collect();
        assert!(matches!(
            validate_trace(&too_many, &c),
            Err(TraceError::OverCatalog { limit: 15, .. })
        ));
        let unknown = vec![TraceEvent::arrive(0.0, "Voodoo")];
        assert!(matches!(validate_trace(&unknown, &c), Err(TraceError::UnknownGpu(_))));
        assert!(matches!(
            "nope".parse::<Scenario>(),
            Err(TraceError::UnknownScenario(_))
        ));
    }

    #[test]
    fn oldest_a10_goes_first() {
        let alive = vec![
            LiveWorker {
                id: WorkerId::new("tx0"),
                gpu: TITAN_X_PASCAL.into(),
                seq: 0,
            },
            LiveWorker {
                id: WorkerId::new("a1"),
                gpu: A10.into(),
                seq: 2,
            },
            LiveWorker {
                id: WorkerId::new("a0"),
                gpu: A10.into(),
                seq: 1,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = select_victim(&VictimPolicy::OldestA10First, &alive, &mut rng);
        assert_eq!(v, Some(WorkerId::new("a0")));
        let only_tx = &alive[..1];
        assert_eq!(
            select_victim(&VictimPolicy::OldestA10First, only_tx, &mut rng),
            Some(WorkerId::new("tx0"))
        );
        assert_eq!(select_victim(&VictimPolicy::OldestA10First, &[], &mut rng), None);
        let s = select_victim(&VictimPolicy::Specific(WorkerId::new("a1")), &alive, &mut rng);
        assert_eq!(s, Some(WorkerId::new("a1")));
    }
}
