//! Export of raw-resolution data before the raw wheel overwrites it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::{RoundRobinArchive, RrdError, SeriesKey, WheelLayout};

pub const SWEEP_CSV_HEADER: &str = "timestamp_ms,host,pid,metric,value,units";
const MARKS_FILE: &str = ".sweep-marks";

/// One persisted raw slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    /// Start of the raw slot.
    pub timestamp_ms: u64,
    pub host: String,
    pub pid: Option<u32>,
    pub metric: String,
    pub value: f64,
    pub units: String,
}

/// Which raw slots a sweep may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepBound {
    /// Only slots whose period has ended, i.e. that no in-order sample
    /// can still change.
    Closed,
    /// Every written slot, including the one currently filling. Used for
    /// the final sweep at shutdown.
    All,
}

/// Last swept raw period of each series.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepMarks(BTreeMap<SeriesKey, i64>);

impl SweepMarks {
    pub fn get(&self, key: &SeriesKey) -> Option<i64> {
        self.0.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("metric,host,pid,period\n");
        for (k, p) in &self.0 {
            let pid = k.pid.map(|p| p.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", k.metric, k.host, pid, p));
        }
        out
    }

    fn from_csv(text: &str) -> Result<Self, RrdError> {
        let mut marks = BTreeMap::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || RrdError::SweepConfig(format!("corrupt mark line '{line}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            let pid = if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) };
            marks.insert(SeriesKey::new(f[0], f[1], pid), f[3].parse().map_err(|_| bad())?);
        }
        Ok(SweepMarks(marks))
    }
}

/// Persistent destination of swept records.
pub trait SweepSink {
    /// Stores one sweep's records. On error nothing may be considered
    /// written.
    fn write(&mut self, metric_set: &str, records: &[SweepRecord]) -> Result<(), RrdError>;
}

fn metric_set_label(metrics: &[String]) -> String {
    if metrics.is_empty() {
        return "all".to_string();
    }
    metrics
        .iter()
        .map(|m| {
            m.chars()
                .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-') { c } else { '_' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Raw slots newer than `marks` for the selected metrics (all when
/// `metrics` is empty), in time order, with the marks they advance to.
pub fn collect_sweep(
    archive: &RoundRobinArchive,
    metrics: &[String],
    marks: &SweepMarks,
    bound: SweepBound,
) -> (Vec<SweepRecord>, SweepMarks) {
    let raw = archive.layout().raw();
    let mut records = Vec::new();
    let mut next = marks.clone();
    for key in archive.series_keys() {
        if !metrics.is_empty() && !metrics.contains(&key.metric) {
            continue;
        }
        let Some((slots, units, Some(hw))) = archive.raw_slots(&key) else { continue };
        let open = (hw / raw.step_ms) as i64;
        let mark = marks.get(&key);
        let mut taken: Vec<(i64, f64)> = slots
            .iter()
            .filter_map(|s| s.raw_value(raw.consolidation))
            .filter(|(p, _)| mark.is_none_or(|m| *p > m))
            .filter(|(p, _)| bound == SweepBound::All || *p < open)
            .collect();
        taken.sort_by_key(|(p, _)| *p);
        if let Some((last, _)) = taken.last() {
            next.0.insert(key.clone(), *last);
        }
        records.extend(taken.into_iter().map(|(p, value)| SweepRecord {
            timestamp_ms: p as u64 * raw.step_ms,
            host: key.host.clone(),
            pid: key.pid,
            metric: key.metric.clone(),
            value,
            units: units.to_string(),
        }));
    }
    records
        .sort_by(|a, b| (a.timestamp_ms, &a.metric, &a.host, a.pid).cmp(&(b.timestamp_ms, &b.metric, &b.host, b.pid)));
    (records, next)
}

/// Writes raw slots newer than `marks` to `sink` and advances `marks`
/// only if the write succeeded. Returns the number of records written.
pub fn sweep<S: SweepSink + ?Sized>(
    archive: &RoundRobinArchive,
    metrics: &[String],
    marks: &mut SweepMarks,
    bound: SweepBound,
    sink: &mut S,
) -> Result<usize, RrdError> {
    let (records, next) = collect_sweep(archive, metrics, marks, bound);
    if records.is_empty() {
        return Ok(0);
    }
    sink.write(&metric_set_label(metrics), &records)?;
    *marks = next;
    Ok(records.len())
}

fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Writes each sweep to `sweep-<metric-set>-<t0>-<t1>.csv` in a directory.
#[derive(Debug, Clone)]
pub struct CsvSweepSink {
    dir: PathBuf,
}

impl CsvSweepSink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CsvSweepSink { dir: dir.into() }
    }

    pub fn render(records: &[SweepRecord]) -> String {
        let mut out = String::with_capacity(records.len() * 48 + 40);
        out.push_str(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in records {
            let pid = r.pid.map(|p| p.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", r.timestamp_ms, r.host, pid, r.metric, r.value, r.units));
        }
        out
    }

    /// Parses a sweep file back into records.
    pub fn parse(text: &str) -> Result<Vec<SweepRecord>, RrdError> {
        let mut lines = text.lines();
        if lines.next() != Some(SWEEP_CSV_HEADER) {
            return Err(RrdError::Format("missing sweep header".to_string()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let bad = || RrdError::Format(format!("bad sweep row '{line}'"));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(bad());
                }
                Ok(SweepRecord {
                    timestamp_ms: f[0].parse().map_err(|_| bad())?,
                    host: f[1].to_string(),
                    pid: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) },
                    metric: f[3].to_string(),
                    value: f[4].parse().map_err(|_| bad())?,
                    units: f[5].to_string(),
                })
            })
            .collect()
    }
}

impl SweepSink for CsvSweepSink {
    fn write(&mut self, metric_set: &str, records: &[SweepRecord]) -> Result<(), RrdError> {
        let t0 = records.iter().map(|r| r.timestamp_ms).min().unwrap_or(0);
        let t1 = records.iter().map(|r| r.timestamp_ms).max().unwrap_or(0);
        let path = self.dir.join(format!("sweep-{metric_set}-{t0}-{t1}.csv"));
        write_atomic(&path, Self::render(records).as_bytes())
            .map_err(|e| RrdError::Sink(format!("{}: {e}", path.display())))
    }
}

/// Periodic sweeper with its marks persisted next to its output, so a
/// restart neither repeats nor skips slots.
#[derive(Debug)]
pub struct Sweeper {
    sink: CsvSweepSink,
    marks_path: PathBuf,
    metrics: Vec<String>,
    interval: Duration,
    marks: SweepMarks,
}

impl Sweeper {
    /// Fails when `interval` is not shorter than the raw wheel's horizon,
    /// since raw data would be overwritten between sweeps.
    pub fn open(dir: &Path, metrics: Vec<String>, interval: Duration, layout: &WheelLayout) -> Result<Self, RrdError> {
        let horizon = Duration::from_millis(layout.raw().horizon_ms());
        if interval.is_zero() || interval >= horizon {
            return Err(RrdError::SweepConfig(format!(
                "sweep interval {interval:?} must be positive and shorter than the raw horizon {horizon:?}"
            )));
        }
        fs::create_dir_all(dir).map_err(|e| RrdError::Sink(format!("{}: {e}", dir.display())))?;
        let marks_path = dir.join(MARKS_FILE);
        let marks = match fs::read_to_string(&marks_path) {
            Ok(text) => SweepMarks::from_csv(&text)?,
            Err(_) => SweepMarks::default(),
        };
        Ok(Sweeper { sink: CsvSweepSink::new(dir), marks_path, metrics, interval, marks })
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    pub fn marks(&self) -> &SweepMarks {
        &self.marks
    }

    /// Sweeps new raw slots to a CSV file, then replaces the marks file.
    /// The in-memory marks advance only after both writes succeed; a retry
    /// rewrites the same file name with the same rows.
    pub fn sweep(&mut self, archive: &RoundRobinArchive, bound: SweepBound) -> Result<usize, RrdError> {
        let (records, next) = collect_sweep(archive, &self.metrics, &self.marks, bound);
        self.write(records, next)
    }

    /// Second half of [`sweep`](Self::sweep), for callers that collect
    /// under a lock and write outside it.
    pub fn write(&mut self, records: Vec<SweepRecord>, next: SweepMarks) -> Result<usize, RrdError> {
        if records.is_empty() {
            return Ok(0);
        }
        self.sink.write(&metric_set_label(&self.metrics), &records)?;
        write_atomic(&self.marks_path, next.to_csv().as_bytes())
            .map_err(|e| RrdError::Sink(format!("{}: {e}", self.marks_path.display())))?;
        self.marks = next;
        Ok(records.len())
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::MetricSample;
    use crate::rrdb::{Consolidation, WheelSpec};

    fn layout() -> WheelLayout {
        WheelLayout::new(vec![
            WheelSpec { step_ms: 100, capacity: 100, consolidation: Consolidation::Average },
            WheelSpec { step_ms: 1000, capacity: 10, consolidation: Consolidation::Average },
        ])
        .unwrap()
    }

    fn fill(a: &mut RoundRobinArchive, from: u64, to: u64) {
        for i in from..to {
            a.insert(&MetricSample::num("h", Some(4), "m", i as f64, "u", i * 100)).unwrap();
        }
    }

    struct FailingSink;
    impl SweepSink for FailingSink {
        fn write(&mut self, _: &str, _: &[SweepRecord]) -> Result<(), RrdError> {
            Err(RrdError::Sink("disk full".to_string()))
        }
    }

    #[derive(Default)]
    struct MemSink(Vec<SweepRecord>);
    impl SweepSink for MemSink {
        fn write(&mut self, _: &str, r: &[SweepRecord]) -> Result<(), RrdError> {
            self.0.extend_from_slice(r);
            Ok(())
        }
    }

    #[test]
    fn second_sweep_without_inserts_is_empty() {
        let mut a = RoundRobinArchive::create(layout(), &["m"]);
        fill(&mut a, 0, 30);
        let mut marks = SweepMarks::default();
        let mut sink = MemSink::default();
        assert_eq!(sweep(&a, &[], &mut marks, SweepBound::Closed, &mut sink).unwrap(), 29);
        assert_eq!(sweep(&a, &[], &mut marks, SweepBound::Closed, &mut sink).unwrap(), 0);
        assert_eq!(sweep(&a, &[], &mut marks, SweepBound::All, &mut sink).unwrap(), 1);
        let values: Vec<f64> = sink.0.iter().map(|r| r.value).collect();
        assert_eq!(values, (0..30).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn failed_write_keeps_marks() {
        let mut a = RoundRobinArchive::create(layout(), &["m"]);
        fill(&mut a, 0, 10);
        let mut marks = SweepMarks::default();
        assert!(sweep(&a, &[], &mut marks, SweepBound::All, &mut FailingSink).is_err());
        assert!(marks.is_empty());
        let mut sink = MemSink::default();
        assert_eq!(sweep(&a, &[], &mut marks, SweepBound::All, &mut sink).unwrap(), 10);
    }

    #[test]
    fn interval_must_beat_raw_horizon() {
        let dir = tempfile::tempdir().unwrap();
        let err = Sweeper::open(dir.path(), vec![], Duration::from_secs(10), &layout());
        assert!(matches!(err, Err(RrdError::SweepConfig(_))));
        assert!(Sweeper::open(dir.path(), vec![], Duration::from_secs(5), &layout()).is_ok());
    }

    #[test]
    fn marks_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = RoundRobinArchive::create(layout(), &["m"]);
        fill(&mut a, 0, 20);
        let mut s = Sweeper::open(dir.path(), vec!["m".to_string()], Duration::from_secs(3), &layout()).unwrap();
        assert_eq!(s.sweep(&a, SweepBound::Closed).unwrap(), 19);
        let mut again = Sweeper::open(dir.path(), vec!["m".to_string()], Duration::from_secs(3), &layout()).unwrap();
        assert_eq!(again.marks(), s.marks());
        assert_eq!(again.sweep(&a, SweepBound::Closed).unwrap(), 0);
        let file = dir.path().join("sweep-m-0-1800.csv");
        let rows = CsvSweepSink::parse(&fs::read_to_string(file).unwrap()).unwrap();
        assert_eq!(rows.len(), 19);
        assert_eq!(
            rows[3],
            SweepRecord {
                timestamp_ms: 300,
                host: "h".into(),
                pid: Some(4),
                metric: "m".into(),
                value: 3.0,
                units: "u".into()
            }
        );
    }
}
