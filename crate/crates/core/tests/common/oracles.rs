//! Independent recomputations of the derived reference values. Each oracle
//! works the number out from first principles, then checks the
//! implementation against it.

use sha2::{Digest, Sha256};

use pcm_core::config::Config;
use pcm_core::cost::{CostModel, Stage, FS_PEAK_BANDWIDTH};
use pcm_core::factory::{simulate_fetches, FsEmulator, TraceEvent};
use pcm_core::harness::build_tasks;
use pcm_core::model::{recipe_hash, Awareness, ContextRecipe, GpuCatalog, GpuModel, A10, TITAN_X_PASCAL};
use pcm_core::sim::{simulate, SimOutcome, SimSettings};

use super::{arrivals, rel_close};

pub type Oracle = fn() -> Result<String, String>;

/// Digest of the default recipe, frozen the first time it was computed.
pub const GOLDEN_DEFAULT_RECIPE_ID: &str = "7ffdd2b0bcc8802421d28209fd80f495a2bd0fae25329e91dbeae98bba392e26";

const TEMPLATE_BYTES: f64 = 14.2e9;
const MODEL_BYTES: f64 = 3.7e9;

pub fn all() -> Vec<(&'static str, Oracle)> {
    vec![
        ("golden recipe digest", golden_recipe_digest as Oracle),
        ("fs fetch, 20 readers at peak", fs_twenty_readers),
        ("fs fetch, lone reader at peak", fs_lone_reader),
        ("fs reader death frees bandwidth", fs_reader_death),
        ("model load gap ~32 s", model_load_gap),
        ("cold fs install = fetch + load", cold_install),
        ("full invoke of 100 items on A10", full_invoke_a10),
        ("20 cold workers, 20 installs", twenty_cold_installs),
        ("peer wave generations 1-5-25", peer_wave_generations),
    ]
}

fn check(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn a10() -> GpuModel {
    GpuCatalog::standard().get(A10).unwrap().clone()
}

fn peak_cost() -> CostModel {
    CostModel {
        fs_aggregate_bandwidth: FS_PEAK_BANDWIDTH,
        ..CostModel::default()
    }
}

fn run(trace: Vec<TraceEvent>, items: u64, batch: u64, awareness: Awareness, horizon: Option<f64>) -> SimOutcome {
    let cfg = Config::default();
    let recipe = ContextRecipe::default_llm();
    let tasks = build_tasks(items, batch, awareness, &recipe, cfg.task_resources).unwrap();
    let mut settings = SimSettings::from_config(&cfg, 1);
    settings.event_log = true;
    settings.horizon = horizon;
    simulate(settings, recipe, tasks, trace).unwrap()
}

pub fn golden_recipe_digest() -> Result<String, String> {
    let mut fields = [
        ("builder.disk_load", "true"),
        ("builder.gpu_load", "true"),
        ("code_ref", "pff.infer_model"),
        ("dependency_bytes", "10500000000"),
        ("host_memory_bytes", "7400000000"),
        ("model_bytes", "3700000000"),
    ];
    fields.sort();
    let canonical: String = fields.iter().map(|(k, v)| format!("{k}={}:{v}\n", v.len())).collect();
    let oracle = hex::encode(Sha256::digest(canonical.as_bytes()));
    let recipe = ContextRecipe::default_llm();
    let got = recipe_hash(&recipe.draft()).0;
    check(
        oracle == GOLDEN_DEFAULT_RECIPE_ID && got == oracle && recipe.context_id.0 == oracle,
        format!("oracle {oracle}, implementation {got}"),
    )
}

pub fn fs_twenty_readers() -> Result<String, String> {
    // gigabits over per-reader gigabits per second
    let oracle = TEMPLATE_BYTES * 8.0 / 1e9 / (84.0 / 20.0);
    let cost = peak_cost();
    let formula = cost.stage_duration(Stage::FsFetch, TEMPLATE_BYTES, &a10(), 20).unwrap();
    let reqs: Vec<_> = (0..20).map(|r| (r, TEMPLATE_BYTES as u64, 0.0)).collect();
    let emulated = simulate_fetches(FS_PEAK_BANDWIDTH, cost.fs_max_concurrent_ops, &reqs);
    let all_close = emulated.len() == 20 && emulated.iter().all(|(_, t)| rel_close(*t, oracle, 1e-9));
    check(
        (oracle - 27.0).abs() < 0.5 && rel_close(formula, oracle, 1e-12) && all_close,
        format!(
            "oracle {oracle:.3} s, cost model {formula:.3} s, emulator {:.3} s",
            emulated[0].1
        ),
    )
}

pub fn fs_lone_reader() -> Result<String, String> {
    let oracle = TEMPLATE_BYTES * 8.0 / 1e9 / 84.0;
    let formula = peak_cost()
        .stage_duration(Stage::FsFetch, TEMPLATE_BYTES, &a10(), 1)
        .unwrap();
    let emulated = simulate_fetches(FS_PEAK_BANDWIDTH, 94, &[(0, TEMPLATE_BYTES as u64, 0.0)])[0].1;
    check(
        (oracle - 1.35).abs() < 0.01 && rel_close(formula, oracle, 1e-12) && rel_close(emulated, oracle, 1e-9),
        format!("oracle {oracle:.4} s, cost model {formula:.4} s, emulator {emulated:.4} s"),
    )
}

pub fn fs_reader_death() -> Result<String, String> {
    // Two equal readers share W; one dies at t_kill. The survivor has
    // S - W/2 * t_kill left at the full rate.
    let (w, s, t_kill) = (FS_PEAK_BANDWIDTH, TEMPLATE_BYTES, 1.0);
    let oracle = t_kill + (s - w / 2.0 * t_kill) / w;
    let undisturbed = s / (w / 2.0);
    let mut fs = FsEmulator::new(w, 94);
    fs.admit(1, s as u64, 0.0);
    fs.admit(2, s as u64, 0.0);
    let before = fs.next_completion().map(|c| c.0).unwrap_or(f64::NAN);
    fs.cancel(2, t_kill);
    let (after, who) = fs.next_completion().unwrap_or((f64::NAN, 0));
    check(
        who == 1 && rel_close(before, undisturbed, 1e-9) && rel_close(after, oracle, 1e-9) && after < before,
        format!("survivor done at {after:.4} s (oracle {oracle:.4} s), {before:.4} s had both stayed"),
    )
}

pub fn model_load_gap() -> Result<String, String> {
    // (PARTIAL - FULL) end-to-end over tasks per worker at 1500 tasks / 20 workers
    let tasks_per_worker: f64 = 1500.0 / 20.0;
    let oracle = (5.3e3 - 2.9e3) / tasks_per_worker;
    let cost = CostModel::default();
    let catalog = GpuCatalog::standard();
    let loads: Vec<f64> = [A10, TITAN_X_PASCAL]
        .iter()
        .map(|g| cost.model_load_seconds(MODEL_BYTES as u64, catalog.get(g).unwrap()))
        .collect();
    check(
        (oracle - 32.0).abs() < 1e-9 && loads.iter().all(|l| rel_close(*l, oracle, 0.02)),
        format!("oracle {oracle:.2} s, A10 {:.2} s, TITAN X {:.2} s", loads[0], loads[1]),
    )
}

pub fn cold_install() -> Result<String, String> {
    let cost = CostModel::default();
    let fetch = TEMPLATE_BYTES / cost.fs_aggregate_bandwidth;
    let load = MODEL_BYTES / cost.disk_bandwidth + MODEL_BYTES / a10().gpu_load_bandwidth;
    let oracle = fetch + load;
    let out = run(arrivals(0.0, 1, A10), 1, 1, Awareness::Full, None);
    let Some(rec) = out.report.installs.first() else {
        return Err("no install recorded".into());
    };
    check(
        rel_close(rec.fs_fetch_seconds, fetch, 1e-6)
            && rel_close(rec.build_seconds, oracle, 1e-6)
            && (load - 32.0).abs() < 0.5,
        format!(
            "build {:.3} s = fetch {:.3} s + load {load:.3} s (oracle {oracle:.3} s)",
            rec.build_seconds, rec.fs_fetch_seconds
        ),
    )
}

pub fn full_invoke_a10() -> Result<String, String> {
    let cost = CostModel::default();
    let oracle = cost.invoke_dispatch_overhead_seconds + 100.0 * cost.per_inference_seconds_reference / 1.0;
    let out = run(arrivals(0.0, 1, A10), 100, 100, Awareness::Full, None);
    let Some(rec) = out.report.task_records.first() else {
        return Err("no task completed".into());
    };
    let charged: f64 = rec.timings.values().sum();
    let span = rec.completed_at - rec.dispatched_at;
    // per-item seconds averaged by throughput over an equal A10 / TITAN X pool
    let titan = cost.per_inference_seconds_reference / 0.5;
    let pool_avg = 2.0 / (1.0 / cost.per_inference_seconds_reference + 1.0 / titan);
    let reference = 2.9e3 * 20.0 / 150_000.0;
    check(
        rel_close(charged, oracle, 1e-9) && rel_close(span, oracle, 1e-9) && rel_close(pool_avg, reference, 0.10),
        format!(
            "invoke {span:.3} s (oracle {oracle:.3} s); pool per-item {pool_avg:.3} s vs {reference:.3} s observed per worker"
        ),
    )
}

pub fn twenty_cold_installs() -> Result<String, String> {
    let out = run(super::static_pool(), 150_000, 100, Awareness::Full, Some(600.0));
    let directives: Vec<_> = out.log.iter().filter(|e| e.event == "install_context").collect();
    let workers: std::collections::HashSet<_> = directives.iter().filter_map(|e| e.worker.clone()).collect();
    // nobody is invoked before its own context is ready
    let mut ready = std::collections::HashMap::new();
    let mut early = 0;
    for e in &out.log {
        match e.event.as_str() {
            "context_ready" => {
                ready.insert(e.worker.clone(), e.t);
            }
            "dispatch" if !ready.contains_key(&e.worker) => early += 1,
            _ => {}
        }
    }
    let dispatched = out.log.iter().filter(|e| e.event == "dispatch").count();
    check(
        directives.len() == 20 && workers.len() == 20 && early == 0 && dispatched > 20,
        format!(
            "{} install directives to {} workers, {dispatched} dispatches, {early} before ready",
            directives.len(),
            workers.len()
        ),
    )
}

/// Holder counts after each generation when every holder serves `cap`
/// newcomers at a time.
pub fn generations(newcomers: usize, cap: usize) -> Vec<usize> {
    let mut holders = 1;
    let mut out = vec![holders];
    while holders < newcomers + 1 {
        holders = (holders * (cap + 1)).min(newcomers + 1);
        out.push(holders);
    }
    out
}

pub fn peer_wave_generations() -> Result<String, String> {
    let cap = Config::default().scheduler.max_concurrent_peer_serves as usize;
    let oracle = generations(50, cap);
    let mut trace = arrivals(0.0, 1, A10);
    trace.extend(arrivals(100.0, 50, A10));
    let out = run(trace, 150_000, 100, Awareness::Full, Some(600.0));
    let mut peer: Vec<f64> = out
        .report
        .installs
        .iter()
        .filter(|i| i.fetched_from.is_peer())
        .map(|i| i.completed_at)
        .collect();
    peer.sort_by(f64::total_cmp);
    let mut observed = vec![1];
    let mut last = f64::NEG_INFINITY;
    for t in peer {
        if t - last > 1e-6 {
            observed.push(*observed.last().unwrap());
        }
        *observed.last_mut().unwrap() += 1;
        last = t;
    }
    check(
        observed == oracle,
        format!("holders per generation {observed:?}, oracle {oracle:?}"),
    )
}
