//! The opportunistic cluster: traces of worker arrivals and preemptions, and
//! the shared-filesystem contention model.

pub mod fs;
pub mod trace;

pub use fs::{simulate_fetches, FsEmulator, FsLease, ReaderId};
pub use trace::{
    generate_trace, read_trace, select_victim, summarize_trace, trace_to_string, validate_trace, write_trace,
    LiveWorker, Scenario, TraceError, TraceEvent, TraceKind, TraceSummary, VictimPolicy,
};
