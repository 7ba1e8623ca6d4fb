//! Workload emulation and resource monitoring.
//!
//! The crate is split along the data flow of a monitored test node:
//!
//! * [`loadgen`] runs emulated jobs as a state machine over network,
//!   memory and CPU phases.
//! * [`paramgen`] produces parameter files for large job sets from bounded
//!   probability laws.
//! * [`monitor`] samples per-process and host metrics at up to 10 Hz.
//! * [`rrdb`] keeps fixed-size layered round-robin archives and sweeps raw
//!   data to CSV before it is overwritten.
//! * [`wire`] moves samples between nodes as XML datagrams over UDP.
//! * [`harness`] drives experiments and composes the services into a node.

pub mod harness;
pub mod loadgen;
pub mod monitor;
pub mod paramgen;
pub mod rng;
pub mod rrdb;
pub mod wire;

pub use loadgen::{JobReport, JobSpec, State, TransitionTable};
