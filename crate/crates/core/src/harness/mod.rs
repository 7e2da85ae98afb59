//! Test and measurement harness: workloads, simulated clients, history
//! recording and checking, fault injection and scenario runs.

pub mod checker;
pub mod history;
pub mod reference;
pub mod driver;
pub mod workload;
pub mod graphs;
pub mod scenario;
pub mod analysis;
pub mod config;
pub mod live;
