//! Fixed-size layered round-robin archives.
//!
//! An archive keeps one set of wheels per series. Wheel 0 holds raw
//! samples at the finest step; each coarser wheel summarizes whole periods
//! of the wheel before it. Every slot is allocated when the archive is
//! created and overwritten in place afterwards, so the archive never grows.
//!
//! Slots carry the running sum, count, maximum and latest value of the
//! raw samples that fall in their period, updated as samples arrive. A
//! coarse slot is published once its period has completed, at which point
//! it equals the consolidation of every raw sample it covers under any of
//! the supported functions. Periods without samples stay unknown.

mod persist;
mod sweep;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::monitor::{MetricSample, MetricValue};

pub use persist::{decode_archive, encode_archive, load_archive, save_archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use sweep::{
    collect_sweep, sweep, CsvSweepSink, SweepBound, SweepMarks, SweepRecord, SweepSink, Sweeper, SWEEP_CSV_HEADER,
};

#[derive(Debug, Error, PartialEq)]
pub enum RrdError {
    #[error("layout: {0}")]
    Layout(String),
    #[error("metric '{0}' is not registered")]
    UnregisteredMetric(String),
    #[error("metric '{0}' has a non-numeric value")]
    NonNumeric(String),
    #[error("all {0} series slots for metric '{1}' are taken")]
    SeriesCapacity(usize, String),
    #[error("no wheel with a {resolution_ms} ms step; available: {available:?}")]
    NoWheel { resolution_ms: u64, available: Vec<u64> },
    #[error("sweep configuration: {0}")]
    SweepConfig(String),
    #[error("sweep sink: {0}")]
    Sink(String),
    #[error("archive file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Consolidation {
    #[default]
    Average,
    Max,
    Last,
}

impl Consolidation {
    fn code(self) -> u8 {
        match self {
            Consolidation::Average => 0,
            Consolidation::Max => 1,
            Consolidation::Last => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Consolidation::Average),
            1 => Some(Consolidation::Max),
            2 => Some(Consolidation::Last),
            _ => None,
        }
    }
}

impl fmt::Display for Consolidation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Consolidation::Average => "average",
            Consolidation::Max => "max",
            Consolidation::Last => "last",
        })
    }
}

impl FromStr for Consolidation {
    type Err = RrdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "average" | "avg" => Ok(Consolidation::Average),
            "max" => Ok(Consolidation::Max),
            "last" => Ok(Consolidation::Last),
            other => Err(RrdError::Layout(format!("unknown consolidation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WheelSpec {
    pub step_ms: u64,
    pub capacity: usize,
    pub consolidation: Consolidation,
}

impl WheelSpec {
    pub fn horizon_ms(&self) -> u64 {
        self.step_ms * self.capacity as u64
    }
}

/// Wheel steps and capacities, finest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WheelLayout {
    wheels: Vec<WheelSpec>,
}

impl WheelLayout {
    /// Each step must be a whole multiple of the previous one, and each
    /// wheel must span at least one step of the next coarser wheel.
    pub fn new(wheels: Vec<WheelSpec>) -> Result<Self, RrdError> {
        if wheels.is_empty() {
            return Err(RrdError::Layout("at least one wheel is required".to_string()));
        }
        for (i, w) in wheels.iter().enumerate() {
            if w.step_ms == 0 || w.capacity == 0 {
                return Err(RrdError::Layout(format!("wheel {i} needs a positive step and capacity")));
            }
            if i > 0 {
                let prev = wheels[i - 1];
                if w.step_ms % prev.step_ms != 0 || w.step_ms == prev.step_ms {
                    return Err(RrdError::Layout(format!(
                        "wheel {i} step {} ms is not a multiple of {} ms",
                        w.step_ms, prev.step_ms
                    )));
                }
                if prev.horizon_ms() < w.step_ms {
                    return Err(RrdError::Layout(format!(
                        "wheel {} spans {} ms, less than one {} ms step of wheel {i}",
                        i - 1,
                        prev.horizon_ms(),
                        w.step_ms
                    )));
                }
            }
        }
        Ok(WheelLayout { wheels })
    }

    /// Builds a layout from `(step seconds, capacity, function)` triples.
    /// Steps must be whole milliseconds.
    pub fn from_seconds(wheels: &[(f64, usize, Consolidation)]) -> Result<Self, RrdError> {
        let specs = wheels
            .iter()
            .map(|&(step_s, capacity, consolidation)| {
                let ms = step_s * 1000.0;
                if !ms.is_finite() || ms < 1.0 || (ms - ms.round()).abs() > 1e-6 {
                    return Err(RrdError::Layout(format!("step {step_s} s is not a whole number of milliseconds")));
                }
                Ok(WheelSpec { step_ms: ms.round() as u64, capacity, consolidation })
            })
            .collect::<Result<Vec<_>, _>>()?;
        WheelLayout::new(specs)
    }

    pub fn wheels(&self) -> &[WheelSpec] {
        &self.wheels
    }

    pub fn raw(&self) -> WheelSpec {
        self.wheels[0]
    }

    pub fn steps_ms(&self) -> Vec<u64> {
        self.wheels.iter().map(|w| w.step_ms).collect()
    }

    pub fn slots_per_series(&self) -> usize {
        self.wheels.iter().map(|w| w.capacity).sum()
    }

    /// Slot storage of one series, in bytes.
    pub fn bytes_per_series(&self) -> usize {
        self.slots_per_series() * SLOT_BYTES
    }
}

impl Default for WheelLayout {
    /// 0.1 s x 600 (one minute raw), 1 s x 3600 (one hour), 60 s x 1440
    /// (one day), all averaged.
    fn default() -> Self {
        WheelLayout::new(vec![
            WheelSpec { step_ms: 100, capacity: 600, consolidation: Consolidation::Average },
            WheelSpec { step_ms: 1_000, capacity: 3_600, consolidation: Consolidation::Average },
            WheelSpec { step_ms: 60_000, capacity: 1_440, consolidation: Consolidation::Average },
        ])
        .expect("default layout is valid")
    }
}

const EMPTY_PERIOD: i64 = i64::MIN;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Slot {
    period: i64,
    count: u32,
    sum: f64,
    max: f64,
    last: f64,
    last_ts: u64,
}

pub const SLOT_BYTES: usize = std::mem::size_of::<Slot>();

impl Slot {
    const EMPTY: Slot =
        Slot { period: EMPTY_PERIOD, count: 0, sum: 0.0, max: f64::NEG_INFINITY, last: 0.0, last_ts: 0 };

    fn reset(&mut self, period: i64) {
        *self = Slot { period, ..Slot::EMPTY };
    }

    fn add(&mut self, value: f64, ts: u64) {
        self.count += 1;
        self.sum += value;
        self.max = self.max.max(value);
        if self.count == 1 || ts >= self.last_ts {
            self.last = value;
            self.last_ts = ts;
        }
    }

    fn value(&self, cf: Consolidation) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        Some(match cf {
            Consolidation::Average => self.sum / self.count as f64,
            Consolidation::Max => self.max,
            Consolidation::Last => self.last,
        })
    }
}

/// Identity of one stored time series.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeriesKey {
    pub metric: String,
    pub host: String,
    pub pid: Option<u32>,
}

impl SeriesKey {
    pub fn new(metric: &str, host: &str, pid: Option<u32>) -> Self {
        SeriesKey { metric: metric.to_string(), host: host.to_string(), pid }
    }

    pub fn of(sample: &MetricSample) -> Self {
        SeriesKey::new(&sample.metric, &sample.host, sample.pid)
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pid {
            Some(pid) => write!(f, "{}@{}/{}", self.metric, self.host, pid),
            None => write!(f, "{}@{}", self.metric, self.host),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Series {
    metric: String,
    key: Option<SeriesKey>,
    units: String,
    high_water_ms: Option<u64>,
    wheels: Vec<Vec<Slot>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Stored,
    /// Older than the raw wheel's horizon; counted and discarded.
    TooOld,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ArchiveStats {
    pub stored: u64,
    pub too_old: u64,
}

/// Layered round-robin archive over a fixed set of series slots.
#[derive(Debug, Clone)]
pub struct RoundRobinArchive {
    layout: WheelLayout,
    metrics: Vec<String>,
    series_per_metric: usize,
    series: Vec<Series>,
    index: HashMap<SeriesKey, usize>,
    stats: ArchiveStats,
}

/// Archive shared between one writer and any number of readers.
pub type SharedArchive = Arc<RwLock<RoundRobinArchive>>;

pub fn shared(archive: RoundRobinArchive) -> SharedArchive {
    Arc::new(RwLock::new(archive))
}

/// One point of a query result.
pub type Point = (u64, Option<f64>);

impl RoundRobinArchive {
    /// One series per metric.
    pub fn create(layout: WheelLayout, metrics: &[&str]) -> Self {
        RoundRobinArchive::with_series(layout, metrics, 1)
    }

    /// Reserves `series_per_metric` series for each metric; each is bound
    /// to the first `(host, pid)` that writes it.
    pub fn with_series(layout: WheelLayout, metrics: &[&str], series_per_metric: usize) -> Self {
        let series_per_metric = series_per_metric.max(1);
        let mut names: Vec<String> = Vec::with_capacity(metrics.len());
        for m in metrics {
            if !names.iter().any(|n| n == m) {
                names.push(m.to_string());
            }
        }
        let series = names
            .iter()
            .flat_map(|m| std::iter::repeat_n(m, series_per_metric))
            .map(|m| Series {
                metric: m.clone(),
                key: None,
                units: String::new(),
                high_water_ms: None,
                wheels: layout.wheels().iter().map(|w| vec![Slot::EMPTY; w.capacity]).collect(),
            })
            .collect::<Vec<_>>();
        let index = HashMap::with_capacity(series.len());
        RoundRobinArchive { layout, metrics: names, series_per_metric, series, index, stats: ArchiveStats::default() }
    }

    pub fn layout(&self) -> &WheelLayout {
        &self.layout
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn series_per_metric(&self) -> usize {
        self.series_per_metric
    }

    pub fn stats(&self) -> ArchiveStats {
        self.stats
    }

    /// Bytes of slot storage actually allocated.
    pub fn byte_size(&self) -> usize {
        self.series.iter().flat_map(|s| s.wheels.iter()).map(|w| w.capacity() * SLOT_BYTES).sum()
    }

    /// What [`byte_size`](Self::byte_size) must equal for this layout.
    pub fn expected_byte_size(&self) -> usize {
        self.series.len() * self.layout.bytes_per_series()
    }

    /// Keys of series that have received data, sorted.
    pub fn series_keys(&self) -> Vec<SeriesKey> {
        let mut keys: Vec<SeriesKey> = self.index.keys().cloned().collect();
        keys.sort();
        keys
    }

    pub fn units(&self, key: &SeriesKey) -> Option<&str> {
        self.index.get(key).map(|&i| self.series[i].units.as_str())
    }

    pub fn high_water_ms(&self, key: &SeriesKey) -> Option<u64> {
        self.index.get(key).and_then(|&i| self.series[i].high_water_ms)
    }

    fn bind(&mut self, key: &SeriesKey, units: &str) -> Result<usize, RrdError> {
        if let Some(&i) = self.index.get(key) {
            return Ok(i);
        }
        if !self.metrics.contains(&key.metric) {
            return Err(RrdError::UnregisteredMetric(key.metric.clone()));
        }
        let free = self
            .series
            .iter()
            .position(|s| s.metric == key.metric && s.key.is_none())
            .ok_or_else(|| RrdError::SeriesCapacity(self.series_per_metric, key.metric.clone()))?;
        self.series[free].key = Some(key.clone());
        self.series[free].units = units.to_string();
        self.index.insert(key.clone(), free);
        Ok(free)
    }

    pub fn insert(&mut self, sample: &MetricSample) -> Result<InsertOutcome, RrdError> {
        let value = match &sample.value {
            MetricValue::Num(v) if v.is_finite() => *v,
            _ => {
                if !self.metrics.contains(&sample.metric) {
                    return Err(RrdError::UnregisteredMetric(sample.metric.clone()));
                }
                return Err(RrdError::NonNumeric(sample.metric.clone()));
            }
        };
        let idx = self.bind(&SeriesKey::of(sample), &sample.units)?;
        let ts = sample.timestamp_ms;
        let raw = self.layout.raw();
        let series = &mut self.series[idx];
        if let Some(hw) = series.high_water_ms {
            let raw_period = (ts / raw.step_ms) as i64;
            if raw_period <= (hw / raw.step_ms) as i64 - raw.capacity as i64 {
                self.stats.too_old += 1;
                return Ok(InsertOutcome::TooOld);
            }
        }
        for (wheel, spec) in series.wheels.iter_mut().zip(self.layout.wheels()) {
            let period = (ts / spec.step_ms) as i64;
            let slot = &mut wheel[(period as u64 % spec.capacity as u64) as usize];
            if slot.period == period {
                slot.add(value, ts);
            } else if slot.period < period {
                slot.reset(period);
                slot.add(value, ts);
            }
            // A newer period already owns the slot: this wheel has moved on.
        }
        series.high_water_ms = Some(series.high_water_ms.map_or(ts, |hw| hw.max(ts)));
        self.stats.stored += 1;
        Ok(InsertOutcome::Stored)
    }

    fn wheel_for(&self, resolution_ms: u64) -> Result<usize, RrdError> {
        self.layout
            .wheels()
            .iter()
            .position(|w| w.step_ms == resolution_ms)
            .ok_or_else(|| RrdError::NoWheel { resolution_ms, available: self.layout.steps_ms() })
    }

    /// Slots of the wheel whose step equals `resolution_ms` whose start
    /// lies in `[t0, t1]`.
    ///
    /// Coarse slots are reported once their period is complete. Slots that
    /// were never written, have been overwritten, or belong to an unknown
    /// series are `None`.
    pub fn query(&self, key: &SeriesKey, t0_ms: u64, t1_ms: u64, resolution_ms: u64) -> Result<Vec<Point>, RrdError> {
        let k = self.wheel_for(resolution_ms)?;
        let spec = self.layout.wheels()[k];
        let step = spec.step_ms;
        let first = t0_ms.div_ceil(step);
        let last = t1_ms / step;
        let series = self.index.get(key).map(|&i| &self.series[i]);
        let open_period = series.and_then(|s| s.high_water_ms).map(|hw| (hw / step) as i64);
        Ok((first..=last)
            .map(|p| {
                let value = series.and_then(|s| {
                    let slot = &s.wheels[k][(p % spec.capacity as u64) as usize];
                    let complete = k == 0 || open_period.is_some_and(|open| (p as i64) < open);
                    (slot.period == p as i64 && complete).then(|| slot.value(spec.consolidation)).flatten()
                });
                (p * step, value)
            })
            .collect())
    }

    /// [`query`](Self::query) on the only series bound to `metric`.
    pub fn query_metric(
        &self,
        metric: &str,
        t0_ms: u64,
        t1_ms: u64,
        resolution_ms: u64,
    ) -> Result<Vec<Point>, RrdError> {
        let key = self
            .series_keys()
            .into_iter()
            .find(|k| k.metric == metric)
            .unwrap_or_else(|| SeriesKey::new(metric, "", None));
        self.query(&key, t0_ms, t1_ms, resolution_ms)
    }

    pub(crate) fn raw_slots(&self, key: &SeriesKey) -> Option<(&[Slot], &str, Option<u64>)> {
        let s = &self.series[*self.index.get(key)?];
        Some((&s.wheels[0], &s.units, s.high_water_ms))
    }

    pub(crate) fn series_internal(&self) -> &[Series] {
        &self.series
    }

    pub(crate) fn from_parts(
        layout: WheelLayout,
        metrics: Vec<String>,
        series_per_metric: usize,
        series: Vec<Series>,
    ) -> Self {
        let index = series.iter().enumerate().filter_map(|(i, s)| s.key.clone().map(|k| (k, i))).collect();
        RoundRobinArchive { layout, metrics, series_per_metric, series, index, stats: ArchiveStats::default() }
    }
}

impl Slot {
    pub(crate) fn raw_value(&self, cf: Consolidation) -> Option<(i64, f64)> {
        self.value(cf).map(|v| (self.period, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(metric: &str, value: f64, ts: u64) -> MetricSample {
        MetricSample::num("h", None, metric, value, "u", ts)
    }

    fn small_layout() -> WheelLayout {
        WheelLayout::new(vec![
            WheelSpec { step_ms: 100, capacity: 50, consolidation: Consolidation::Average },
            WheelSpec { step_ms: 1000, capacity: 20, consolidation: Consolidation::Average },
        ])
        .unwrap()
    }

    #[test]
    fn default_layout_size() {
        let a = RoundRobinArchive::create(WheelLayout::default(), &["cpu"]);
        assert_eq!(a.byte_size(), (600 + 3600 + 1440) * SLOT_BYTES);
        assert_eq!(a.byte_size(), a.expected_byte_size());
    }

    #[test]
    fn steps_must_be_multiples() {
        let err = WheelLayout::from_seconds(&[(0.1, 600, Consolidation::Average), (0.25, 10, Consolidation::Average)]);
        assert!(matches!(err, Err(RrdError::Layout(_))));
        assert!(WheelLayout::from_seconds(&[(0.1, 10, Consolidation::Max)]).is_ok());
        assert!(WheelLayout::from_seconds(&[(0.0001, 10, Consolidation::Max)]).is_err());
    }

    #[test]
    fn constant_series_averages_to_constant() {
        let mut a = RoundRobinArchive::create(small_layout(), &["m"]);
        for i in 0..100 {
            a.insert(&sample("m", 3.5, i * 100)).unwrap();
        }
        a.insert(&sample("m", 3.5, 10_000)).unwrap();
        let q = a.query_metric("m", 0, 9_000, 1000).unwrap();
        assert_eq!(q.len(), 10);
        assert!(q.iter().all(|(_, v)| *v == Some(3.5)));
    }

    #[test]
    fn one_to_ten_average() {
        let mut a = RoundRobinArchive::create(small_layout(), &["m"]);
        for i in 0..10u64 {
            a.insert(&sample("m", (i + 1) as f64, i * 100)).unwrap();
        }
        // The 1 s slot is open until a later sample arrives.
        assert_eq!(a.query_metric("m", 0, 0, 1000).unwrap(), vec![(0, None)]);
        a.insert(&sample("m", 0.0, 1000)).unwrap();
        assert_eq!(a.query_metric("m", 0, 0, 1000).unwrap(), vec![(0, Some(5.5))]);
    }

    #[test]
    fn raw_round_trip_and_unknowns() {
        let mut a = RoundRobinArchive::create(small_layout(), &["m"]);
        a.insert(&sample("m", 1.25, 200)).unwrap();
        a.insert(&sample("m", 2.5, 400)).unwrap();
        let q = a.query_metric("m", 100, 500, 100).unwrap();
        assert_eq!(q, vec![(100, None), (200, Some(1.25)), (300, None), (400, Some(2.5)), (500, None)]);
    }

    #[test]
    fn empty_archive_is_unknown() {
        let a = RoundRobinArchive::create(small_layout(), &["m"]);
        let q = a.query_metric("m", 0, 4000, 1000).unwrap();
        assert_eq!(q.len(), 5);
        assert!(q.iter().all(|(_, v)| v.is_none()));
    }

    #[test]
    fn unknown_resolution_lists_steps() {
        let a = RoundRobinArchive::create(small_layout(), &["m"]);
        let err = a.query_metric("m", 0, 1, 250).unwrap_err();
        assert_eq!(err, RrdError::NoWheel { resolution_ms: 250, available: vec![100, 1000] });
    }

    #[test]
    fn unregistered_and_text_rejected() {
        let mut a = RoundRobinArchive::create(small_layout(), &["m"]);
        assert_eq!(a.insert(&sample("x", 1.0, 0)), Err(RrdError::UnregisteredMetric("x".into())));
        let text = MetricSample::text("h", "m", "Linux", 0);
        assert_eq!(a.insert(&text), Err(RrdError::NonNumeric("m".into())));
    }

    #[test]
    fn old_samples_dropped_and_counted() {
        let mut a = RoundRobinArchive::create(small_layout(), &["m"]);
        a.insert(&sample("m", 1.0, 10_000)).unwrap();
        assert_eq!(a.insert(&sample("m", 1.0, 5_000)), Ok(InsertOutcome::TooOld));
        assert_eq!(a.insert(&sample("m", 1.0, 5_100)), Ok(InsertOutcome::Stored));
        assert_eq!(a.stats().too_old, 1);
    }

    #[test]
    fn series_slots_are_bounded() {
        let mut a = RoundRobinArchive::with_series(small_layout(), &["m"], 2);
        let size = a.byte_size();
        a.insert(&MetricSample::num("h", Some(1), "m", 1.0, "u", 0)).unwrap();
        a.insert(&MetricSample::num("h", Some(2), "m", 1.0, "u", 0)).unwrap();
        let err = a.insert(&MetricSample::num("h", Some(3), "m", 1.0, "u", 0));
        assert_eq!(err, Err(RrdError::SeriesCapacity(2, "m".into())));
        assert_eq!(a.byte_size(), size);
    }

    #[test]
    fn max_and_last_functions() {
        let layout = WheelLayout::new(vec![
            WheelSpec { step_ms: 100, capacity: 50, consolidation: Consolidation::Last },
            WheelSpec { step_ms: 1000, capacity: 20, consolidation: Consolidation::Max },
        ])
        .unwrap();
        let mut a = RoundRobinArchive::create(layout, &["m"]);
        for (v, ts) in [(3.0, 0), (9.0, 100), (1.0, 150), (4.0, 900), (0.0, 1000)] {
            a.insert(&sample("m", v, ts)).unwrap();
        }
        assert_eq!(a.query_metric("m", 100, 100, 100).unwrap(), vec![(100, Some(1.0))]);
        assert_eq!(a.query_metric("m", 0, 0, 1000).unwrap(), vec![(0, Some(9.0))]);
    }

    #[test]
    fn overwritten_slots_read_unknown() {
        let mut a = RoundRobinArchive::create(small_layout(), &["m"]);
        for i in 0..60u64 {
            a.insert(&sample("m", i as f64, i * 100)).unwrap();
        }
        // Raw wheel holds 50 slots: periods 10..=59.
        let q = a.query_metric("m", 0, 900, 100).unwrap();
        assert!(q.iter().all(|(_, v)| v.is_none()));
        assert_eq!(a.query_metric("m", 1000, 1000, 100).unwrap(), vec![(1000, Some(10.0))]);
    }
}
