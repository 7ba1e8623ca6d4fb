use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::source::{AccountingSource, Clock, HostCpuTimes};
use super::{
    MetricRegistry, MetricSample, MonitorError, Volatility, CPU_CORES, CPU_FRAC, CPU_MODEL, CPU_TOTAL, LOAD1,
    MEM_FREE_MIB, MEM_TOTAL_MIB, OS, RESIDENT_MIB, SAMPLER_DROPPED,
};

/// Shortest sampling interval (10 Hz).
pub const MIN_INTERVAL: Duration = Duration::from_millis(100);

const MIB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy)]
struct CpuMark {
    cpu_seconds: f64,
    mono: Duration,
}

/// Host metrics of one instant. Metrics whose source could not be read
/// are listed in `missing` instead of being reported.
#[derive(Debug, Clone, PartialEq)]
pub struct HostSample {
    pub samples: Vec<MetricSample>,
    pub missing: Vec<&'static str>,
}

/// Turns cumulative accounting into interval metrics.
///
/// CPU fractions are `delta(cpu time) / delta(wall time)` between two
/// calls for the same pid; the first call for a pid reports 0.
pub struct Monitor<S> {
    source: S,
    host: String,
    processes: HashMap<u32, CpuMark>,
    host_prev: Option<(HostCpuTimes, Duration)>,
    static_cache: Option<Vec<MetricSample>>,
}

impl<S: AccountingSource> Monitor<S> {
    pub fn new(mut source: S, host: impl Into<String>) -> Self {
        let host_prev = source.host_cpu().ok().map(|t| (t, source.now().mono));
        Monitor { source, host: host.into(), processes: HashMap::new(), host_prev, static_cache: None }
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn source_mut(&mut self) -> &mut S {
        &mut self.source
    }

    pub fn now(&mut self) -> Clock {
        self.source.now()
    }

    /// `cpu_frac` and `resident_mib` for `pid`. A vanished process is
    /// forgotten and reported as [`MonitorError::ProcessGone`].
    pub fn sample_process(&mut self, pid: u32) -> Result<Vec<MetricSample>, MonitorError> {
        let clock = self.source.now();
        self.sample_process_at(pid, clock)
    }

    fn sample_process_at(&mut self, pid: u32, clock: Clock) -> Result<Vec<MetricSample>, MonitorError> {
        let stat = match self.source.process(pid) {
            Ok(stat) => stat,
            Err(e) => {
                self.processes.remove(&pid);
                return Err(e);
            }
        };
        let mark = CpuMark { cpu_seconds: stat.cpu_seconds, mono: clock.mono };
        let frac = match self.processes.insert(pid, mark) {
            Some(prev) if clock.mono > prev.mono => {
                ((stat.cpu_seconds - prev.cpu_seconds) / (clock.mono - prev.mono).as_secs_f64()).max(0.0)
            }
            _ => 0.0,
        };
        Ok(vec![
            MetricSample::num(&self.host, Some(pid), CPU_FRAC, frac, "frac", clock.epoch_ms),
            MetricSample::num(
                &self.host,
                Some(pid),
                RESIDENT_MIB,
                stat.resident_bytes as f64 / MIB,
                "MiB",
                clock.epoch_ms,
            ),
        ])
    }

    pub fn forget(&mut self, pid: u32) {
        self.processes.remove(&pid);
    }

    /// Host-wide CPU use in CPUs (0 to the CPU count), free memory and
    /// 1-minute load.
    pub fn sample_host(&mut self) -> HostSample {
        let clock = self.source.now();
        self.sample_host_at(clock)
    }

    fn sample_host_at(&mut self, clock: Clock) -> HostSample {
        let mut samples = Vec::new();
        let mut missing = Vec::new();
        let cpus = self.source.cpu_count().max(1) as f64;
        match self.source.host_cpu() {
            Ok(times) => {
                let total = match self.host_prev.replace((times, clock.mono)) {
                    Some((prev, _)) if times.total > prev.total => {
                        ((times.busy - prev.busy) / (times.total - prev.total) * cpus).clamp(0.0, cpus)
                    }
                    _ => 0.0,
                };
                samples.push(MetricSample::num(&self.host, None, CPU_TOTAL, total, "cpus", clock.epoch_ms));
            }
            Err(_) => missing.push(CPU_TOTAL),
        }
        match self.source.mem_available_bytes() {
            Ok(bytes) => samples.push(MetricSample::num(
                &self.host,
                None,
                MEM_FREE_MIB,
                bytes as f64 / MIB,
                "MiB",
                clock.epoch_ms,
            )),
            Err(_) => missing.push(MEM_FREE_MIB),
        }
        match self.source.load1() {
            Ok(load) => samples.push(MetricSample::num(&self.host, None, LOAD1, load, "load", clock.epoch_ms)),
            Err(_) => missing.push(LOAD1),
        }
        HostSample { samples, missing }
    }

    fn read_static(&mut self) -> Vec<MetricSample> {
        let ts = self.source.now().epoch_ms;
        let info = self.source.static_info();
        let mut out = vec![
            MetricSample::text(&self.host, OS, &info.os, ts),
            MetricSample::text(&self.host, CPU_MODEL, &info.cpu_model, ts),
            MetricSample::num(&self.host, None, CPU_CORES, info.cpu_cores as f64, "cores", ts),
        ];
        out.push(match info.mem_total_bytes {
            Some(b) => MetricSample::num(&self.host, None, MEM_TOTAL_MIB, b as f64 / MIB, "MiB", ts),
            None => MetricSample::text(&self.host, MEM_TOTAL_MIB, "unknown", ts),
        });
        out
    }

    /// Non-volatile metrics, read once and then served from cache.
    pub fn describe_static(&mut self) -> Vec<MetricSample> {
        if self.static_cache.is_none() {
            self.static_cache = Some(self.read_static());
        }
        self.static_cache.clone().unwrap_or_default()
    }

    /// Re-reads the non-volatile metrics and returns them only if a value
    /// differs from what was last published.
    pub fn static_if_changed(&mut self) -> Option<Vec<MetricSample>> {
        let fresh = self.read_static();
        let changed = match &self.static_cache {
            Some(old) => old.iter().zip(&fresh).any(|(a, b)| a.value != b.value),
            None => true,
        };
        if changed {
            self.static_cache = Some(fresh.clone());
            Some(fresh)
        } else {
            None
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("sink failed: {0}")]
pub struct SinkError(pub String);

/// Consumer of sampled batches.
pub trait SampleSink: Send {
    fn accept(&mut self, batch: &[MetricSample]) -> Result<(), SinkError>;
}

impl<F> SampleSink for F
where
    F: FnMut(&[MetricSample]) -> Result<(), SinkError> + Send,
{
    fn accept(&mut self, batch: &[MetricSample]) -> Result<(), SinkError> {
        self(batch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WatchSelector {
    Pid(u32),
    /// Every process whose command name equals the tag.
    Tag(String),
}

impl std::str::FromStr for WatchSelector {
    type Err = MonitorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MonitorError::Config(format!("watch selector '{s}' is not pid:<n> or tag:<name>"));
        match s.split_once(':') {
            Some(("pid", n)) => n.trim().parse().map(WatchSelector::Pid).map_err(|_| bad()),
            Some(("tag", name)) if !name.trim().is_empty() => Ok(WatchSelector::Tag(name.trim().to_string())),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub interval: Duration,
    pub watch: Vec<WatchSelector>,
    pub registry: MetricRegistry,
    pub include_host: bool,
    /// Samples held while the sink is failing; the oldest are dropped beyond this.
    pub buffer_cap: usize,
    /// Ticks between rescans of tag selectors.
    pub tag_rescan_ticks: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            interval: MIN_INTERVAL,
            watch: Vec::new(),
            registry: MetricRegistry::standard(),
            include_host: true,
            buffer_cap: 10_000,
            tag_rescan_ticks: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        if self.interval < MIN_INTERVAL {
            return Err(MonitorError::Config(format!(
                "interval {:?} is shorter than {:?} (10 Hz)",
                self.interval, MIN_INTERVAL
            )));
        }
        if self.buffer_cap == 0 {
            return Err(MonitorError::Config("buffer_cap must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SamplerStats {
    pub ticks: u64,
    pub missed_ticks: u64,
    pub samples_delivered: u64,
    pub samples_dropped: u64,
    pub sink_failures: u64,
}

/// Running sampler. Dropping the handle without [`stop`](Self::stop)
/// detaches the thread, which then stops at its next tick.
pub struct SamplerHandle {
    stop_tx: mpsc::Sender<()>,
    join: JoinHandle<SamplerStats>,
    ticks: Arc<AtomicU64>,
}

impl SamplerHandle {
    pub fn ticks(&self) -> u64 {
        self.ticks.load(Ordering::Relaxed)
    }

    /// Stops the sampler; no samples are delivered after this returns.
    pub fn stop(self) -> SamplerStats {
        let _ = self.stop_tx.send(());
        self.join.join().unwrap_or_default()
    }
}

/// Samples on a fixed schedule until stopped.
///
/// Tick `k` is due at `start + k * interval`. A tick that is late by more
/// than one interval is skipped and counted rather than bunched, and
/// samples always carry the time they were actually taken. Volatile
/// metrics only are emitted; non-volatile ones are emitted on the first
/// tick and again whenever they change.
pub fn run_sampler<S, K>(
    config: SamplerConfig,
    mut monitor: Monitor<S>,
    mut sink: K,
) -> Result<SamplerHandle, MonitorError>
where
    S: AccountingSource + 'static,
    K: SampleSink + 'static,
{
    config.validate()?;
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let ticks = Arc::new(AtomicU64::new(0));
    let tick_counter = Arc::clone(&ticks);
    let join = thread::Builder::new()
        .name("sampler".to_string())
        .spawn(move || {
            let mut stats = SamplerStats::default();
            let mut pending: VecDeque<MetricSample> = VecDeque::new();
            let mut tagged: Vec<u32> = Vec::new();
            let mut gone: Vec<u32> = Vec::new();
            let wants = |name: &str| config.registry.get(name).is_some_and(|d| d.volatility == Volatility::Volatile);
            let publish_static = config.registry.names(Volatility::NonVolatile);
            let start = Instant::now();
            let mut k: u64 = 0;
            loop {
                let due = start + config.interval * k as u32;
                let now = Instant::now();
                if due > now {
                    match stop_rx.recv_timeout(due - now) {
                        Ok(()) | Err(RecvTimeoutError::Disconnected) => break,
                        Err(RecvTimeoutError::Timeout) => {}
                    }
                } else if stop_rx.try_recv().is_ok() {
                    break;
                }
                let clock = monitor.now();
                let mut batch = Vec::new();
                if config.include_host {
                    let host = monitor.sample_host_at(clock);
                    batch.extend(host.samples.into_iter().filter(|s| wants(&s.metric)));
                }
                if !publish_static.is_empty() {
                    let fresh = if k == 0 { Some(monitor.describe_static()) } else { None };
                    let fresh = fresh.or_else(|| k.is_multiple_of(600).then(|| monitor.static_if_changed()).flatten());
                    if let Some(statics) = fresh {
                        batch.extend(statics.into_iter().filter(|s| publish_static.contains(&s.metric.as_str())));
                    }
                }
                if k.is_multiple_of(config.tag_rescan_ticks.max(1)) {
                    tagged = config
                        .watch
                        .iter()
                        .filter_map(|w| match w {
                            WatchSelector::Tag(tag) => Some(monitor.source_mut().pids_named(tag)),
                            WatchSelector::Pid(_) => None,
                        })
                        .flatten()
                        .collect();
                }
                let explicit = config.watch.iter().filter_map(|w| match w {
                    WatchSelector::Pid(p) => Some(*p),
                    WatchSelector::Tag(_) => None,
                });
                let mut pids: Vec<u32> = explicit.chain(tagged.iter().copied()).collect();
                pids.sort_unstable();
                pids.dedup();
                pids.retain(|p| !gone.contains(p));
                for pid in pids {
                    match monitor.sample_process_at(pid, clock) {
                        Ok(samples) => batch.extend(samples.into_iter().filter(|s| wants(&s.metric))),
                        Err(MonitorError::ProcessGone(_)) => {
                            log::info!("watched process {pid} exited");
                            gone.push(pid);
                        }
                        Err(e) => log::warn!("sampling {pid}: {e}"),
                    }
                }
                if stats.samples_dropped > 0 && wants(SAMPLER_DROPPED) {
                    batch.push(MetricSample::num(
                        monitor.host(),
                        None,
                        SAMPLER_DROPPED,
                        stats.samples_dropped as f64,
                        "count",
                        clock.epoch_ms,
                    ));
                }
                pending.extend(batch);
                while pending.len() > config.buffer_cap {
                    pending.pop_front();
                    stats.samples_dropped += 1;
                }
                let out = pending.make_contiguous();
                match sink.accept(out) {
                    Ok(()) => {
                        stats.samples_delivered += out.len() as u64;
                        pending.clear();
                    }
                    Err(e) => {
                        stats.sink_failures += 1;
                        log::debug!("{e}; holding {} samples", pending.len());
                    }
                }
                stats.ticks += 1;
                tick_counter.store(stats.ticks, Ordering::Relaxed);
                // Skip ticks that are already more than one interval overdue.
                let elapsed = start.elapsed();
                let next = k + 1;
                let behind = (elapsed.as_nanos() / config.interval.as_nanos()) as u64;
                if behind > next {
                    stats.missed_ticks += behind - next;
                    k = behind;
                } else {
                    k = next;
                }
            }
            stats
        })
        .map_err(|e| MonitorError::Config(format!("cannot start sampler thread: {e}")))?;
    Ok(SamplerHandle { stop_tx, join, ticks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::{ProcSource, ScriptedSource, StaticInfo, TEXT_UNITS};
    use std::sync::Mutex;

    fn scripted() -> (ScriptedSource, Monitor<ScriptedSource>) {
        let src = ScriptedSource::new(1_700_000_000_000, 4);
        (src.clone(), Monitor::new(src, "h"))
    }

    fn value(samples: &[MetricSample], metric: &str) -> f64 {
        samples.iter().find(|s| s.metric == metric).and_then(|s| s.value.as_f64()).unwrap()
    }

    #[test]
    fn first_process_sample_is_zero() {
        let (src, mut mon) = scripted();
        src.set_process(7, "w", 12.0, 64 << 20);
        let s = mon.sample_process(7).unwrap();
        assert_eq!(value(&s, CPU_FRAC), 0.0);
        assert_eq!(value(&s, RESIDENT_MIB), 64.0);
        assert_eq!(s[0].pid, Some(7));
    }

    #[test]
    fn cpu_fraction_is_interval_based() {
        let (src, mut mon) = scripted();
        src.set_process(7, "w", 1.0, 0);
        mon.sample_process(7).unwrap();
        src.advance(500);
        src.set_process(7, "w", 1.25, 0);
        assert!((value(&mon.sample_process(7).unwrap(), CPU_FRAC) - 0.5).abs() < 1e-12);
        src.advance(1000);
        src.set_process(7, "w", 2.25, 0);
        assert!((value(&mon.sample_process(7).unwrap(), CPU_FRAC) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vanished_process_reports_gone() {
        let (src, mut mon) = scripted();
        src.set_process(9, "w", 0.0, 0);
        mon.sample_process(9).unwrap();
        src.kill(9);
        assert_eq!(mon.sample_process(9), Err(MonitorError::ProcessGone(9)));
        assert_eq!(mon.sample_process(12345), Err(MonitorError::ProcessGone(12345)));
    }

    #[test]
    fn host_cpu_scaled_by_cpu_count() {
        let (src, mut mon) = scripted();
        src.advance(1000);
        src.set_host_cpu(Some(HostCpuTimes { busy: 2.0, total: 4.0 }));
        let h = mon.sample_host();
        assert!(h.missing.is_empty());
        assert_eq!(value(&h.samples, CPU_TOTAL), 2.0);
    }

    #[test]
    fn unreadable_host_source_degrades() {
        let (src, mut mon) = scripted();
        src.set_host_cpu(None);
        src.set_mem_available(None);
        let h = mon.sample_host();
        assert_eq!(h.missing, vec![CPU_TOTAL, MEM_FREE_MIB]);
        assert_eq!(h.samples.len(), 1);
    }

    #[test]
    fn static_metrics_are_stable_and_non_volatile() {
        let (src, mut mon) = scripted();
        src.set_static(StaticInfo {
            os: "Linux 6.1".to_string(),
            cpu_model: "Test CPU".to_string(),
            cpu_cores: 4,
            mem_total_bytes: Some(8 << 30),
        });
        let a = mon.describe_static();
        src.advance(1000);
        let b = mon.describe_static();
        assert_eq!(a, b);
        let registry = MetricRegistry::standard();
        for s in &a {
            assert_eq!(registry.get(&s.metric).unwrap().volatility, Volatility::NonVolatile);
        }
        assert_eq!(value(&a, CPU_CORES), 4.0);
        assert_eq!(a[0].units, TEXT_UNITS);
        assert!(mon.static_if_changed().is_none());
    }

    #[test]
    fn os_static_core_count() {
        let mut mon = Monitor::new(ProcSource::new(), "me");
        let s = mon.describe_static();
        assert!(value(&s, CPU_CORES) >= 1.0);
        assert_eq!(s, mon.describe_static());
    }

    #[test]
    fn os_host_range() {
        let mut src = ProcSource::new();
        let cpus = src.cpu_count() as f64;
        let _ = src.host_cpu();
        let mut mon = Monitor::new(src, "me");
        thread::sleep(Duration::from_millis(100));
        let total = value(&mon.sample_host().samples, CPU_TOTAL);
        assert!((0.0..=cpus).contains(&total));
    }

    #[test]
    fn interval_below_ten_hz_rejected() {
        let cfg = SamplerConfig { interval: Duration::from_millis(50), ..SamplerConfig::default() };
        let (_, mon) = scripted();
        let err = run_sampler(cfg, mon, |_: &[MetricSample]| Ok(())).err();
        assert!(matches!(err, Some(MonitorError::Config(_))));
    }

    #[test]
    fn watch_selector_parsing() {
        assert_eq!("pid:42".parse::<WatchSelector>(), Ok(WatchSelector::Pid(42)));
        assert_eq!("tag:worker".parse::<WatchSelector>(), Ok(WatchSelector::Tag("worker".into())));
        assert!("pid:x".parse::<WatchSelector>().is_err());
        assert!("name:x".parse::<WatchSelector>().is_err());
    }

    #[test]
    fn failing_sink_buffers_then_drops_oldest() {
        let (src, mon) = scripted();
        src.set_process(5, "w", 0.0, 0);
        let cfg = SamplerConfig {
            watch: vec![WatchSelector::Pid(5)],
            include_host: false,
            registry: MetricRegistry::standard(),
            buffer_cap: 5,
            ..SamplerConfig::default()
        };
        let delivered = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&delivered);
        let calls = Arc::new(AtomicU64::new(0));
        let c = Arc::clone(&calls);
        let handle = run_sampler(cfg, mon, move |batch: &[MetricSample]| {
            // Fail the first five deliveries.
            if c.fetch_add(1, Ordering::SeqCst) < 5 {
                return Err(SinkError("down".to_string()));
            }
            seen.lock().unwrap().extend_from_slice(batch);
            Ok(())
        })
        .unwrap();
        while calls.load(Ordering::SeqCst) < 8 {
            thread::sleep(Duration::from_millis(20));
        }
        let stats = handle.stop();
        assert!(stats.samples_dropped > 0);
        assert_eq!(stats.sink_failures, 5);
        let got = delivered.lock().unwrap();
        assert!(got.iter().any(|s| s.metric == SAMPLER_DROPPED));
    }

    #[test]
    fn stop_ends_the_stream() {
        let (_, mon) = scripted();
        let count = Arc::new(AtomicU64::new(0));
        let c = Arc::clone(&count);
        let handle = run_sampler(SamplerConfig::default(), mon, move |_: &[MetricSample]| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok(())
        })
        .unwrap();
        thread::sleep(Duration::from_millis(350));
        let stats = handle.stop();
        let at_stop = count.load(Ordering::SeqCst);
        assert_eq!(at_stop, stats.ticks);
        thread::sleep(Duration::from_millis(250));
        assert_eq!(count.load(Ordering::SeqCst), at_stop);
    }
}
