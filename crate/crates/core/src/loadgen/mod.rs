//! Emulated jobs.
//!
//! A job walks a small state machine, `NetLoad -> MemAlloc -> CpuLoad ->
//! Done` by default, where each state stresses one subsystem according to
//! the job's [`JobSpec`]. Probabilistic transition tables let the primary
//! states be entered repeatedly, bounded by a per-state visit cap.

mod job;
mod phases;
mod spec;
mod table;

pub use job::{epoch_ms, write_reports_csv, JobReport, JobRunner, RunOptions, REPORT_CSV_HEADER};
pub use phases::{
    run_cpu_phase, run_memory_phase, run_network_phase, CpuPhase, MemoryBlock, NetworkPhase, PhaseDetail, PhaseEntry,
    PlannedParams,
};
pub use spec::{JobSpec, SpecError, DEFAULT_PACKET_SIZE, PARAM_KEYS};
pub use table::{next_state, State, TableKind, TransitionError, TransitionTable, VisitCounts};

/// Fallback memory safety cap, in MiB, applied before a job starts.
pub const DEFAULT_MEM_CAP_MIB: f64 = 4096.0;
