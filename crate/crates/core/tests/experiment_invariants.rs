use loadforge::harness::{run_experiment, ExperimentOptions, ExperimentPlan};
use loadforge::loadgen::JobSpec;
use loadforge::monitor::{CPU_FRAC, CPU_TOTAL};
use loadforge::rrdb::SeriesKey;

fn plan() -> ExperimentPlan {
    let text =
        "job_id = inv\nnet_duration_s = 0.2\nmem_footprint_mib = 4\ncpu_duration_s = 2.5\ncpu_util_factor = 0.6\n\
                transitions = NetLoad: MemAlloc=0.5, CpuLoad=0.5; MemAlloc: CpuLoad=1; CpuLoad: Done=1\nseed = 3\n";
    ExperimentPlan::new(vec![JobSpec::parse(text, &[]).unwrap()])
}

#[test]
fn host_total_covers_job_cpu_and_runs_repeat() {
    let options = ExperimentOptions::default();
    let a = run_experiment(&plan(), &options).unwrap();
    let b = run_experiment(&plan(), &options).unwrap();
    assert_eq!(a.rows[0].expected, b.rows[0].expected);
    assert_eq!(a.rows[0].states, b.rows[0].states);

    let row = &a.rows[0];
    let cpu = row.cpu.as_ref().unwrap();
    let archive = a.archive();
    let archive = archive.read().unwrap();
    let host_key = SeriesKey::new(CPU_TOTAL, &cpu.key.host, None);
    let proc_key = SeriesKey::new(CPU_FRAC, &cpu.key.host, cpu.key.pid);
    let host = archive.query(&host_key, cpu.t0_ms, cpu.t1_ms, 1000).unwrap();
    let proc = archive.query(&proc_key, cpu.t0_ms, cpu.t1_ms, 1000).unwrap();
    let mut aligned = 0;
    for ((t, h), (_, p)) in host.iter().zip(&proc) {
        if let (Some(h), Some(p)) = (h, p) {
            aligned += 1;
            assert!(*h >= *p - 0.05, "slot {t}: host {h} < process {p}");
        }
    }
    assert!(aligned >= 1);
    assert!(!a.cpu_series(row, 100).unwrap().iter().all(|p| p.1.is_none()));
}
