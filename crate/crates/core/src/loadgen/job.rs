use std::io::Write;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::phases::{
    run_cpu_phase, run_memory_phase, run_network_phase, MemoryBlock, PhaseDetail, PhaseEntry, PlannedParams,
};
use super::spec::{JobSpec, SpecError};
use super::table::{next_state, State, VisitCounts};
use super::DEFAULT_MEM_CAP_MIB;
use crate::rng::{derive_seed, seeded};

pub const REPORT_CSV_HEADER: &str = "job_id,expected_s,observed_s,pct_diff,states";

pub fn epoch_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub cpu_quantum: Duration,
    pub mem_cap_mib: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { cpu_quantum: Duration::from_millis(100), mem_cap_mib: DEFAULT_MEM_CAP_MIB }
    }
}

#[derive(Debug, Clone)]
pub struct JobReport {
    pub job_id: String,
    /// Sum of planned phase durations along the realized state sequence.
    pub expected: f64,
    /// Wall clock seconds from start to Done.
    pub observed: f64,
    pub started_ms: u64,
    pub phases: Vec<PhaseEntry>,
    pub state_sequence: Vec<State>,
    /// Set when an allocation failure ended the job early.
    pub aborted: Option<String>,
}

impl JobReport {
    /// `(observed - expected) / expected * 100`, undefined for empty jobs.
    pub fn pct_diff(&self) -> Option<f64> {
        pct_diff(self.expected, self.observed)
    }

    pub fn planned(&self) -> Vec<&PlannedParams> {
        self.phases.iter().map(|p| &p.planned).collect()
    }

    pub fn states_label(&self) -> String {
        self.state_sequence.iter().map(|s| s.name()).collect::<Vec<_>>().join(">")
    }

    pub fn errors(&self) -> impl Iterator<Item = &str> {
        self.phases.iter().filter_map(|p| p.error.as_deref()).chain(self.aborted.as_deref())
    }
}

pub fn pct_diff(expected: f64, observed: f64) -> Option<f64> {
    (expected > 0.0).then(|| (observed - expected) / expected * 100.0)
}

pub(crate) fn fmt_pct(pct: Option<f64>) -> String {
    pct.map_or_else(|| "n/a".to_string(), |p| p.to_string())
}

/// Writes reports as CSV under [`REPORT_CSV_HEADER`].
pub fn write_reports_csv<W: Write>(out: W, reports: &[JobReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_CSV_HEADER.split(','))?;
    for r in reports {
        w.write_record([
            r.job_id.clone(),
            r.expected.to_string(),
            r.observed.to_string(),
            fmt_pct(r.pct_diff()),
            r.states_label(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Executes jobs.
#[derive(Debug, Clone, Default)]
pub struct JobRunner {
    pub options: RunOptions,
}

impl JobRunner {
    pub fn new(options: RunOptions) -> Self {
        JobRunner { options }
    }

    pub fn run(&self, spec: &JobSpec) -> Result<JobReport, SpecError> {
        self.run_observed(spec, |_, _| {})
    }

    /// Runs `spec` to completion, calling `on_phase(state, epoch_ms)` as
    /// each phase starts.
    ///
    /// State transitions draw from a stream seeded with `spec.seed`; CPU
    /// duty cycles draw from a second stream seeded with
    /// `derive_seed(spec.seed, 1)`, so the state sequence does not depend on
    /// quantum length. Only invalid specs are errors; phase failures are
    /// recorded in the report.
    pub fn run_observed<F>(&self, spec: &JobSpec, mut on_phase: F) -> Result<JobReport, SpecError>
    where
        F: FnMut(State, u64),
    {
        spec.validate()?;
        if spec.mem_footprint_mib > self.options.mem_cap_mib {
            return Err(SpecError::Validation {
                field: "mem_footprint_mib",
                msg: format!("{} MiB exceeds the {} MiB cap", spec.mem_footprint_mib, self.options.mem_cap_mib),
            });
        }
        let mut transition_rng = seeded(spec.seed);
        let mut duty_rng = seeded(derive_seed(spec.seed, 1));
        let table = &spec.transitions;

        let started_ms = epoch_ms();
        let start = Instant::now();
        let mut memory: Option<MemoryBlock> = None;
        let mut visits = VisitCounts::default();
        let mut phases = Vec::new();
        let mut sequence = vec![State::INITIAL];
        let mut aborted = None;
        let mut state = State::INITIAL;
        visits.record(state);

        while state != State::Done {
            let phase_start_ms = epoch_ms();
            on_phase(state, phase_start_ms);
            let phase_start = Instant::now();
            let (planned, detail, error) = match state {
                State::NetLoad => {
                    let (net, err) = run_network_phase(
                        Duration::from_secs_f64(spec.net_duration),
                        Duration::from_secs_f64(spec.inter_packet_delay_ms / 1000.0),
                        &spec.packet_sink,
                        spec.packet_size,
                    );
                    let planned = PlannedParams::Net {
                        duration_s: spec.net_duration,
                        inter_packet_delay_ms: spec.inter_packet_delay_ms,
                        packet_size: spec.packet_size,
                        sink: spec.packet_sink.clone(),
                    };
                    (planned, Some(PhaseDetail::Net(net)), err)
                }
                State::MemAlloc => {
                    let planned = PlannedParams::Mem { footprint_mib: spec.mem_footprint_mib };
                    // A repeated visit re-touches the block it already holds.
                    let result = match memory.as_mut() {
                        Some(block) => {
                            block.touch();
                            Ok(block.len())
                        }
                        None => run_memory_phase(spec.mem_footprint_mib).map(|block| {
                            let len = block.len();
                            memory = Some(block);
                            len
                        }),
                    };
                    match result {
                        Ok(len) => (planned, Some(PhaseDetail::Mem { resident_bytes: len }), None),
                        Err(msg) => {
                            aborted = Some(msg.clone());
                            (planned, None, Some(msg))
                        }
                    }
                }
                State::CpuLoad => {
                    let cpu = run_cpu_phase(
                        Duration::from_secs_f64(spec.cpu_duration),
                        spec.cpu_util_factor,
                        self.options.cpu_quantum,
                        &mut duty_rng,
                    );
                    let planned =
                        PlannedParams::Cpu { duration_s: spec.cpu_duration, util_factor: spec.cpu_util_factor };
                    (planned, Some(PhaseDetail::Cpu(cpu)), None)
                }
                State::Done => unreachable!(),
            };
            if let Some(err) = &error {
                log::warn!("job {}: {} phase failed: {err}", spec.job_id, state);
            }
            phases.push(PhaseEntry {
                state,
                planned,
                started_ms: phase_start_ms,
                wall: phase_start.elapsed(),
                detail,
                error,
            });
            state = if aborted.is_some() {
                State::Done
            } else {
                next_state(table, state, &visits, &mut transition_rng)
                    .expect("validated table has a row for every reachable state")
            };
            visits.record(state);
            sequence.push(state);
        }
        drop(memory);
        let observed = start.elapsed().as_secs_f64();
        let expected = phases.iter().map(|p| p.planned.planned_seconds()).sum();
        Ok(JobReport {
            job_id: spec.job_id.clone(),
            expected,
            observed,
            started_ms,
            phases,
            state_sequence: sequence,
            aborted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_spec(text: &str) -> JobSpec {
        JobSpec::parse(text, &[]).unwrap()
    }

    #[test]
    fn empty_job_is_fast() {
        let report = JobRunner::default().run(&quick_spec("job_id = empty\n")).unwrap();
        assert!(report.observed < 0.1);
        assert_eq!(report.expected, 0.0);
        assert_eq!(report.pct_diff(), None);
        assert_eq!(report.state_sequence, vec![State::NetLoad, State::MemAlloc, State::CpuLoad, State::Done]);
    }

    #[test]
    fn same_seed_same_sequence() {
        let text = "job_id = p\nseed = 42\nmax_phase_entries = 5\ncpu_duration_s = 0.01\n\
                    transitions = NetLoad: CpuLoad=0.5, MemAlloc=0.5; MemAlloc: CpuLoad=1; \
                    CpuLoad: NetLoad=0.3, CpuLoad=0.4, Done=0.3\n";
        let spec = quick_spec(text);
        let runner = JobRunner::default();
        let a = runner.run(&spec).unwrap();
        let b = runner.run(&spec).unwrap();
        assert_eq!(a.state_sequence, b.state_sequence);
        assert_eq!(a.planned(), b.planned());
        assert_eq!(a.states_label(), b.states_label());
    }

    #[test]
    fn probabilistic_jobs_respect_caps() {
        let text = "max_phase_entries = 3\ntransitions = NetLoad: CpuLoad=1; CpuLoad: CpuLoad=1\n";
        let report = JobRunner::default().run(&quick_spec(text)).unwrap();
        let cpu_visits = report.state_sequence.iter().filter(|s| **s == State::CpuLoad).count();
        assert_eq!(cpu_visits, 3);
        assert_eq!(report.state_sequence.last(), Some(&State::Done));
    }

    #[test]
    fn over_cap_footprint_rejected_before_running() {
        let runner = JobRunner::new(RunOptions { mem_cap_mib: 8.0, ..RunOptions::default() });
        let err = runner.run(&quick_spec("mem_footprint_mib = 16\n")).unwrap_err();
        assert!(matches!(err, SpecError::Validation { field: "mem_footprint_mib", .. }));
    }

    #[test]
    fn unreachable_sink_does_not_stop_the_job() {
        let spec = quick_spec("net_duration_s = 0.05\npacket_sink = no.such.host.invalid:9\ncpu_duration_s = 0.05\n");
        let report = JobRunner::default().run(&spec).unwrap();
        assert!(report.phases[0].error.is_some());
        assert_eq!(report.state_sequence.last(), Some(&State::Done));
        assert_eq!(report.phases.len(), 3);
    }

    #[test]
    fn observed_covers_phase_walls() {
        let spec = quick_spec("cpu_duration_s = 0.2\ncpu_util_factor = 0.5\nmem_footprint_mib = 1\n");
        let report = JobRunner::default().run(&spec).unwrap();
        let walls: f64 = report.phases.iter().map(|p| p.wall.as_secs_f64()).sum();
        assert!(report.observed >= walls);
        assert!(report.observed >= report.expected);
    }

    #[test]
    fn csv_row_format() {
        let report = JobRunner::default().run(&quick_spec("job_id = z\n")).unwrap();
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &[report]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(REPORT_CSV_HEADER));
        let row = lines.next().unwrap();
        assert!(row.starts_with("z,0,"));
        assert!(row.ends_with(",n/a,NetLoad>MemAlloc>CpuLoad>Done"), "{row}");
    }
}
