//! The live, networked side of the system: the scheduler service with its
//! HTTP control plane, the worker runtime, the filesystem emulator endpoint,
//! the trace-driven factory, and a one-call live experiment runner.

pub mod clock;
pub mod factory;
pub mod framed;
pub mod fs;
pub mod live;
pub mod scheduler;
pub mod worker;

pub use clock::EmuClock;
