//! The experiment driver: builds the workload, runs a scenario, and reduces
//! the metrics.

pub mod metrics;
pub mod plot;
pub mod summarize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::Config;
use crate::factory::{generate_trace, Scenario, TraceError, TraceEvent, VictimPolicy};
use crate::model::{Awareness, ContextRecipe, GpuCatalog, InferenceItem, ResourceRequest, TaskId, TaskSpec};
use crate::scheduler::SubmitError;
use crate::sim::{simulate, SimOutcome, SimSettings};

pub use metrics::{read_csv, write_csv, CSV_HEADER};
pub use summarize::{batch_range, reduction_pct, throughput_regression, Regression, SeriesSummary};

/// Items in one full application run.
pub const FULL_SCALE_ITEMS: u64 = 150_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Submit(#[from] SubmitError),
    #[error("metrics csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub total_items: u64,
    pub batch_size: u64,
    pub awareness: Awareness,
    pub scenario: Scenario,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario, awareness: Awareness, batch_size: u64) -> Self {
        ExperimentSpec {
            total_items: FULL_SCALE_ITEMS,
            batch_size,
            awareness,
            scenario,
            seed: 1,
        }
    }

    pub fn items(mut self, n: u64) -> Self {
        self.total_items = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// ceil(total / B) tasks; the last one carries the remainder.
pub fn build_tasks(
    total_items: u64,
    batch_size: u64,
    awareness: Awareness,
    recipe: &ContextRecipe,
    resources: ResourceRequest,
) -> Result<Vec<TaskSpec>, HarnessError> {
    if batch_size < 1 {
        return Err(HarnessError::BatchSize);
    }
    let n = total_items.div_ceil(batch_size);
    let inputs = match awareness {
        Awareness::Full => Vec::new(),
        _ => recipe.blobs(),
    };
    let context_id = (awareness == Awareness::Full).then(|| recipe.context_id.clone());
    Ok((0..n)
        .map(|t| {
            let start = t * batch_size;
            let end = (start + batch_size).min(total_items);
            TaskSpec {
                task_id: TaskId(t),
                awareness,
                context_id: context_id.clone(),
                inputs: inputs.clone(),
                items: (start..end).map(InferenceItem::new).collect(),
                resources,
                attempt: 0,
            }
        })
        .collect())
}

/// Runs `spec` on the discrete-event driver.
pub fn run_experiment(spec: &ExperimentSpec, cfg: &Config) -> Result<SimOutcome, HarnessError> {
    let trace = generate_trace(spec.scenario, spec.seed, &cfg.catalog())?;
    run_with_trace(spec, cfg, trace)
}

pub fn run_with_trace(spec: &ExperimentSpec, cfg: &Config, trace: Vec<TraceEvent>) -> Result<SimOutcome, HarnessError> {
    let recipe = ContextRecipe::default_llm();
    let tasks = build_tasks(
        spec.total_items,
        spec.batch_size,
        spec.awareness,
        &recipe,
        cfg.task_resources,
    )?;
    let settings = SimSettings::from_config(cfg, spec.seed);
    Ok(simulate(settings, recipe, tasks, trace)?)
}

/// A randomized arrival/kill schedule that always leaves a worker standing
/// at the end, so every task can eventually finish.
pub fn chaos_trace(seed: u64, catalog: &GpuCatalog) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models: Vec<&str> = catalog.entries.iter().map(|e| e.model.name.as_str()).collect();
    let mut events = Vec::new();
    let initial = rng.gen_range(1..=6);
    for _ in 0..initial {
        events.push(TraceEvent::arrive(0.0, models[rng.gen_range(0..models.len())]));
    }
    let mut t = 0.0;
    let mut last_kill: f64 = 0.0;
    for _ in 0..rng.gen_range(3..=15) {
        t += rng.gen_range(1.0..120.0);
        if rng.gen_bool(0.55) {
            events.push(TraceEvent::preempt(t, VictimPolicy::Random));
            last_kill = t;
        } else {
            events.push(TraceEvent::arrive(t, models[rng.gen_range(0..models.len())]));
        }
    }
    events.push(TraceEvent::arrive(
        last_kill.max(t) + 1.0,
        models[rng.gen_range(0..models.len())],
    ));
    events
}
