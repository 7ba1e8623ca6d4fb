use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::{archived_metrics, HarnessError};
use crate::loadgen::{JobRunner, JobSpec, RunOptions, State};
use crate::monitor::{
    node_name, run_sampler, MetricRegistry, MetricSample, MetricValue, Monitor, ProcSource, SamplerConfig, SinkError,
    WatchSelector, CPU_FRAC,
};
use crate::paramgen::read_param_dir;
use crate::rrdb::{shared, Point, RoundRobinArchive, SeriesKey, SharedArchive, WheelLayout};

pub const EXPERIMENT_CSV_HEADER: &str = "job_id,expected_s,observed_s,pct_diff,status";
const NA: &str = "n/a";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub jobs: Vec<JobSpec>,
    pub repetitions: usize,
    pub report_path: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new(jobs: Vec<JobSpec>) -> Self {
        ExperimentPlan { jobs, repetitions: 1, report_path: None }
    }

    /// Parses every `.param` file in `dir`; any failure rejects the plan.
    pub fn from_dir(dir: &Path, repetitions: usize) -> Result<Self, HarnessError> {
        let mut jobs = Vec::new();
        for file in read_param_dir(dir)? {
            let spec = JobSpec::parse(&file.contents, &[])
                .map_err(|source| HarnessError::Spec { job: file.name.clone(), source })?;
            jobs.push(spec);
        }
        let plan = ExperimentPlan { jobs, repetitions, report_path: None };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repetitions == 0 {
            return Err(HarnessError::Config("repetitions must be at least 1".to_string()));
        }
        for spec in &self.jobs {
            spec.validate().map_err(|source| HarnessError::Spec { job: spec.job_id.clone(), source })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub runner: RunOptions,
    pub sample_interval: Duration,
    pub layout: WheelLayout,
    pub host: String,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            runner: RunOptions::default(),
            sample_interval: Duration::from_millis(100),
            layout: WheelLayout::default(),
            host: node_name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobStatus {
    Ok,
    Aborted(String),
    Failed(String),
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobStatus::Ok => f.write_str("ok"),
            JobStatus::Aborted(m) => write!(f, "aborted: {m}"),
            JobStatus::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

/// Where a job's CPU usage lives in the experiment archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpuSeriesRef {
    pub key: SeriesKey,
    pub t0_ms: u64,
    pub t1_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub job_id: String,
    pub expected: Option<f64>,
    pub observed: Option<f64>,
    pub pct_diff: Option<f64>,
    pub status: JobStatus,
    pub states: Vec<State>,
    pub cpu: Option<CpuSeriesRef>,
}

pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    archive: SharedArchive,
}

fn mean_max(values: impl Iterator<Item = f64>) -> (Option<f64>, Option<f64>) {
    let (mut sum, mut n, mut max) = (0.0, 0usize, None::<f64>);
    for v in values {
        sum += v;
        n += 1;
        max = Some(max.map_or(v, |m| m.max(v)));
    }
    ((n > 0).then(|| sum / n as f64), max)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| v.to_string())
}

impl ExperimentReport {
    pub fn archive(&self) -> SharedArchive {
        self.archive.clone()
    }

    /// Mean and maximum percent difference over rows that have one.
    pub fn aggregates(&self) -> (Option<f64>, Option<f64>) {
        mean_max(self.rows.iter().filter_map(|r| r.pct_diff))
    }

    pub fn cpu_series(&self, row: &ExperimentRow, resolution_ms: u64) -> Result<Vec<Point>, HarnessError> {
        let Some(r) = &row.cpu else { return Ok(Vec::new()) };
        let archive = self.archive.read().expect("archive lock");
        Ok(archive.query(&r.key, r.t0_ms, r.t1_ms, resolution_ms)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let report_err = |e: csv::Error| HarnessError::Report(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(EXPERIMENT_CSV_HEADER.split(',')).map_err(report_err)?;
        for r in &self.rows {
            w.write_record([r.job_id.clone(), opt(r.expected), opt(r.observed), opt(r.pct_diff), r.status.to_string()])
                .map_err(report_err)?;
        }
        let mut out = w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))?;
        let (mean, max) = self.aggregates();
        let failed = self.rows.iter().filter(|r| r.status != JobStatus::Ok).count();
        writeln!(out, "# jobs={} failed={failed}", self.rows.len())?;
        writeln!(out, "# mean_pct_diff={}", opt(mean))?;
        writeln!(out, "# max_pct_diff={}", opt(max))?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 report")
    }
}

/// One report row: job id, expected, observed, percent difference, status.
pub type ReportRow = (String, Option<f64>, Option<f64>, Option<f64>, String);

/// Rows and emitted aggregates read back from a report file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub rows: Vec<ReportRow>,
    pub mean_pct_diff: Option<f64>,
    pub max_pct_diff: Option<f64>,
}

impl ParsedReport {
    /// Aggregates recomputed from the rows.
    pub fn recompute(&self) -> (Option<f64>, Option<f64>) {
        mean_max(self.rows.iter().filter_map(|r| r.3))
    }
}

pub fn parse_report_csv(text: &str) -> Result<ParsedReport, HarnessError> {
    let bad = |m: String| HarnessError::Report(m);
    let num = |s: &str| -> Result<Option<f64>, HarnessError> {
        if s == NA {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(format!("bad number '{s}'")))
        }
    };
    let mut lines = text.lines();
    if lines.next() != Some(EXPERIMENT_CSV_HEADER) {
        return Err(bad("missing header".to_string()));
    }
    let (mut mean, mut max) = (None, None);
    for line in text.lines().filter_map(|l| l.strip_prefix("# ")) {
        if let Some(v) = line.strip_prefix("mean_pct_diff=") {
            mean = num(v)?;
        } else if let Some(v) = line.strip_prefix("max_pct_diff=") {
            max = num(v)?;
        }
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 5 {
            return Err(bad(format!("row has {} fields", rec.len())));
        }
        rows.push((rec[0].to_string(), num(&rec[1])?, num(&rec[2])?, num(&rec[3])?, rec[4].to_string()));
    }
    Ok(ParsedReport { rows, mean_pct_diff: mean, max_pct_diff: max })
}

/// Runs every job of the plan in turn while sampling this process into
/// a local archive. A failing job is recorded and the run continues.
pub fn run_experiment(plan: &ExperimentPlan, options: &ExperimentOptions) -> Result<ExperimentReport, HarnessError> {
    plan.validate()?;
    let registry = MetricRegistry::standard();
    let metrics = archived_metrics(&registry);
    let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let archive = shared(RoundRobinArchive::with_series(options.layout.clone(), &names, 4));
    let pid = std::process::id();
    let config = SamplerConfig {
        interval: options.sample_interval,
        watch: vec![WatchSelector::Pid(pid)],
        registry,
        ..SamplerConfig::default()
    };
    let sink_archive = archive.clone();
    let sink = move |batch: &[MetricSample]| -> Result<(), SinkError> {
        let mut a = sink_archive.write().map_err(|_| SinkError("archive lock poisoned".to_string()))?;
        for s in batch.iter().filter(|s| matches!(s.value, MetricValue::Num(_))) {
            if let Err(e) = a.insert(s) {
                log::debug!("archive insert: {e}");
            }
        }
        Ok(())
    };
    let sampler = run_sampler(config, Monitor::new(ProcSource::new(), options.host.clone()), sink)?;

    let runner = JobRunner::new(options.runner.clone());
    let mut rows = Vec::new();
    for rep in 0..plan.repetitions {
        for spec in &plan.jobs {
            let job_id = if plan.repetitions > 1 { format!("{}/r{rep}", spec.job_id) } else { spec.job_id.clone() };
            log::info!("experiment: starting {job_id}");
            let row = match runner.run(spec) {
                Ok(report) => {
                    let status = match &report.aborted {
                        Some(m) => JobStatus::Aborted(m.clone()),
                        None => JobStatus::Ok,
                    };
                    let t1 = report.started_ms + (report.observed * 1000.0).ceil() as u64;
                    ExperimentRow {
                        job_id,
                        expected: Some(report.expected),
                        observed: Some(report.observed),
                        pct_diff: report.pct_diff(),
                        status,
                        states: report.state_sequence.clone(),
                        cpu: Some(CpuSeriesRef {
                            key: SeriesKey::new(CPU_FRAC, &options.host, Some(pid)),
                            t0_ms: report.started_ms,
                            t1_ms: t1,
                        }),
                    }
                }
                Err(e) => ExperimentRow {
                    job_id,
                    expected: None,
                    observed: None,
                    pct_diff: None,
                    status: JobStatus::Failed(e.to_string()),
                    states: Vec::new(),
                    cpu: None,
                },
            };
            rows.push(row);
        }
    }
    // One more tick so the last job's tail is sampled.
    std::thread::sleep(options.sample_interval * 2);
    sampler.stop();
    let report = ExperimentReport { rows, archive };
    if let Some(path) = &plan.report_path {
        let tmp = path.with_extension("csv.tmp");
        std::fs::write(&tmp, report.to_csv())?;
        std::fs::rename(&tmp, path)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, cpu_s: f64) -> JobSpec {
        let text = format!("job_id = {id}\nnet_duration_s = 0\nmem_footprint_mib = 1\ncpu_duration_s = {cpu_s}\n");
        JobSpec::parse(&text, &[]).unwrap()
    }

    #[test]
    fn empty_plan_gives_empty_report() {
        let report = run_experiment(&ExperimentPlan::new(Vec::new()), &ExperimentOptions::default()).unwrap();
        assert!(report.rows.is_empty());
        let parsed = parse_report_csv(&report.to_csv()).unwrap();
        assert!(parsed.rows.is_empty());
        assert_eq!(parsed.mean_pct_diff, None);
    }

    #[test]
    fn zero_expected_is_not_applicable() {
        let report =
            run_experiment(&ExperimentPlan::new(vec![spec("zero", 0.0)]), &ExperimentOptions::default()).unwrap();
        assert_eq!(report.rows[0].expected, Some(0.0));
        assert_eq!(report.rows[0].pct_diff, None);
        assert!(report.to_csv().lines().nth(1).unwrap().contains(",n/a,ok"));
    }

    #[test]
    fn failing_job_is_recorded_and_run_continues() {
        let options = ExperimentOptions {
            runner: RunOptions { mem_cap_mib: 0.5, ..RunOptions::default() },
            ..ExperimentOptions::default()
        };
        let plan = ExperimentPlan::new(vec![spec("big", 0.2), spec("small", 0.2)]);
        let report = run_experiment(&plan, &options).unwrap();
        assert!(matches!(report.rows[0].status, JobStatus::Failed(_)));
        assert!(matches!(report.rows[1].status, JobStatus::Failed(_)));
        let parsed = parse_report_csv(&report.to_csv()).unwrap();
        assert!(parsed.rows[0].4.starts_with("failed:"));
    }

    #[test]
    fn aggregates_recompute_exactly() {
        let plan = ExperimentPlan::new(vec![spec("a", 0.3), spec("b", 0.4), spec("c", 0.0)]);
        let report = run_experiment(&plan, &ExperimentOptions::default()).unwrap();
        let parsed = parse_report_csv(&report.to_csv()).unwrap();
        assert_eq!(parsed.rows.len(), 3);
        let (mean, max) = parsed.recompute();
        assert_eq!(mean.map(f64::to_bits), parsed.mean_pct_diff.map(f64::to_bits));
        assert_eq!(max.map(f64::to_bits), parsed.max_pct_diff.map(f64::to_bits));
        assert!(mean.is_some());
    }

    #[test]
    fn plan_from_dir_rejects_bad_file_before_running() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.param"), "job_id = a\ncpu_duration_s = 1\n").unwrap();
        std::fs::write(dir.path().join("b.param"), "job_id = b\nbogus = 1\n").unwrap();
        assert!(matches!(ExperimentPlan::from_dir(dir.path(), 1), Err(HarnessError::Spec { .. })));
        std::fs::remove_file(dir.path().join("b.param")).unwrap();
        assert_eq!(ExperimentPlan::from_dir(dir.path(), 2).unwrap().jobs.len(), 1);
        assert!(ExperimentPlan::from_dir(dir.path(), 0).is_err());
    }
}
