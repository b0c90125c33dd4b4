//! Sans-IO core of a task engine that keeps model contexts warm on workers: domain model, cost
//! model, wire protocol, scheduler and worker state machines, the cluster
//! emulator, and a discrete-event driver that runs them all on a virtual clock.

pub mod config;
pub mod cost;
pub mod factory;
pub mod harness;
pub mod model;
pub mod protocol;
pub mod scheduler;
pub mod sim;
pub mod worker;
