use std::collections::HashMap;
use std::fs;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::MonitorError;

pub const NODE_NAME_ENV: &str = "LOADFORGE_NODE_NAME";

/// Host name used in samples: `LOADFORGE_NODE_NAME` when set, otherwise
/// the kernel host name.
pub fn node_name() -> String {
    if let Ok(name) = std::env::var(NODE_NAME_ENV) {
        if !name.trim().is_empty() {
            return name.trim().to_string();
        }
    }
    fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .ok()
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "localhost".to_string())
}

/// A reading of the clock used for timestamps and rate denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clock {
    pub epoch_ms: u64,
    /// Monotonic time since an arbitrary origin.
    pub mono: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessStat {
    /// User plus system CPU seconds since the process started.
    pub cpu_seconds: f64,
    pub resident_bytes: u64,
}

/// Cumulative host CPU time over all CPUs, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HostCpuTimes {
    pub busy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticInfo {
    pub os: String,
    pub cpu_model: String,
    pub cpu_cores: usize,
    pub mem_total_bytes: Option<u64>,
}

/// Where resource accounting comes from.
pub trait AccountingSource: Send {
    fn now(&mut self) -> Clock;
    fn process(&mut self, pid: u32) -> Result<ProcessStat, MonitorError>;
    fn host_cpu(&mut self) -> Result<HostCpuTimes, MonitorError>;
    fn mem_available_bytes(&mut self) -> Result<u64, MonitorError>;
    fn load1(&mut self) -> Result<f64, MonitorError>;
    fn cpu_count(&self) -> usize;
    fn static_info(&mut self) -> StaticInfo;
    /// Live processes whose command name equals `tag`.
    fn pids_named(&mut self, tag: &str) -> Vec<u32>;
}

/// Reads Linux procfs.
#[derive(Debug)]
pub struct ProcSource {
    origin: Instant,
    origin_epoch_ms: u64,
    ticks_per_second: f64,
    page_size: u64,
    cpus: usize,
}

impl Default for ProcSource {
    fn default() -> Self {
        ProcSource::new()
    }
}

fn sysconf(name: libc::c_int, fallback: i64) -> i64 {
    // SAFETY: sysconf has no memory-safety preconditions.
    let v = unsafe { libc::sysconf(name) };
    if v > 0 {
        v as i64
    } else {
        fallback
    }
}

fn read(path: &str) -> Result<String, MonitorError> {
    fs::read_to_string(path).map_err(|e| MonitorError::Source(format!("{path}: {e}")))
}

fn meminfo_kib(text: &str, key: &str) -> Option<u64> {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(':'))
        .and_then(|rest| rest.split_whitespace().next()?.parse().ok())
}

impl ProcSource {
    pub fn new() -> Self {
        let cpus = fs::read_to_string("/proc/stat")
            .map(|s| {
                s.lines()
                    .filter(|l| l.starts_with("cpu") && l.as_bytes().get(3).is_some_and(u8::is_ascii_digit))
                    .count()
            })
            .unwrap_or(0);
        let cpus = if cpus > 0 { cpus } else { std::thread::available_parallelism().map_or(1, |n| n.get()) };
        ProcSource {
            origin: Instant::now(),
            origin_epoch_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
            ticks_per_second: sysconf(libc::_SC_CLK_TCK, 100) as f64,
            page_size: sysconf(libc::_SC_PAGESIZE, 4096) as u64,
            cpus,
        }
    }
}

/// Splits `/proc/<pid>/stat` after the command field, which may itself
/// contain spaces and parentheses.
fn stat_fields(stat: &str) -> Option<Vec<&str>> {
    let close = stat.rfind(')')?;
    Some(stat[close + 1..].split_whitespace().collect())
}

impl AccountingSource for ProcSource {
    fn now(&mut self) -> Clock {
        let mono = self.origin.elapsed();
        Clock { epoch_ms: self.origin_epoch_ms + mono.as_millis() as u64, mono }
    }

    fn process(&mut self, pid: u32) -> Result<ProcessStat, MonitorError> {
        let gone = |_| MonitorError::ProcessGone(pid);
        let stat = fs::read_to_string(format!("/proc/{pid}/stat")).map_err(gone)?;
        let statm = fs::read_to_string(format!("/proc/{pid}/statm")).map_err(gone)?;
        let fields = stat_fields(&stat).ok_or_else(|| MonitorError::Source(format!("bad stat for {pid}")))?;
        // Fields after the command: state is index 0, utime 11, stime 12.
        if matches!(fields.first(), Some(&"Z") | Some(&"X")) {
            return Err(MonitorError::ProcessGone(pid));
        }
        let tick = |i: usize| -> Result<f64, MonitorError> {
            fields
                .get(i)
                .and_then(|f| f.parse::<u64>().ok())
                .map(|t| t as f64 / self.ticks_per_second)
                .ok_or_else(|| MonitorError::Source(format!("bad stat for {pid}")))
        };
        let cpu_seconds = tick(11)? + tick(12)?;
        let resident_pages: u64 = statm
            .split_whitespace()
            .nth(1)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| MonitorError::Source(format!("bad statm for {pid}")))?;
        Ok(ProcessStat { cpu_seconds, resident_bytes: resident_pages * self.page_size })
    }

    fn host_cpu(&mut self) -> Result<HostCpuTimes, MonitorError> {
        let stat = read("/proc/stat")?;
        let line = stat
            .lines()
            .find(|l| l.starts_with("cpu "))
            .ok_or_else(|| MonitorError::Source("no aggregate cpu line".to_string()))?;
        let ticks: Vec<u64> = line.split_whitespace().skip(1).filter_map(|f| f.parse().ok()).collect();
        if ticks.len() < 4 {
            return Err(MonitorError::Source("short cpu line".to_string()));
        }
        // user nice system idle iowait irq softirq steal; guest time is
        // already counted in user.
        let total: u64 = ticks.iter().take(8).sum();
        let idle = ticks[3] + ticks.get(4).copied().unwrap_or(0);
        Ok(HostCpuTimes {
            busy: (total - idle) as f64 / self.ticks_per_second,
            total: total as f64 / self.ticks_per_second,
        })
    }

    fn mem_available_bytes(&mut self) -> Result<u64, MonitorError> {
        let info = read("/proc/meminfo")?;
        meminfo_kib(&info, "MemAvailable")
            .or_else(|| meminfo_kib(&info, "MemFree"))
            .map(|kib| kib * 1024)
            .ok_or_else(|| MonitorError::Source("no MemAvailable in /proc/meminfo".to_string()))
    }

    fn load1(&mut self) -> Result<f64, MonitorError> {
        read("/proc/loadavg")?
            .split_whitespace()
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| MonitorError::Source("bad /proc/loadavg".to_string()))
    }

    fn cpu_count(&self) -> usize {
        self.cpus
    }

    fn static_info(&mut self) -> StaticInfo {
        let unknown = || "unknown".to_string();
        let os = match (fs::read_to_string("/proc/sys/kernel/ostype"), fs::read_to_string("/proc/sys/kernel/osrelease"))
        {
            (Ok(t), Ok(r)) => format!("{} {}", t.trim(), r.trim()),
            _ => unknown(),
        };
        let cpu_model = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|info| {
                info.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(unknown);
        let mem_total_bytes = fs::read_to_string("/proc/meminfo")
            .ok()
            .and_then(|info| meminfo_kib(&info, "MemTotal"))
            .map(|kib| kib * 1024);
        StaticInfo { os, cpu_model, cpu_cores: self.cpus.max(1), mem_total_bytes }
    }

    fn pids_named(&mut self, tag: &str) -> Vec<u32> {
        let Ok(entries) = fs::read_dir("/proc") else { return Vec::new() };
        let mut pids: Vec<u32> = entries
            .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<u32>().ok())
            .filter(|pid| fs::read_to_string(format!("/proc/{pid}/comm")).is_ok_and(|c| c.trim_end() == tag))
            .collect();
        pids.sort_unstable();
        pids
    }
}

#[derive(Debug, Default)]
struct Script {
    now_ms: u64,
    epoch_base_ms: u64,
    processes: HashMap<u32, (String, ProcessStat)>,
    host: Option<HostCpuTimes>,
    mem_available: Option<u64>,
    load1: Option<f64>,
    cpus: usize,
    info: Option<StaticInfo>,
}

/// Hand-driven accounting for tests. Clones share state, so a test can
/// keep one handle while a sampler thread owns another.
#[derive(Debug, Clone)]
pub struct ScriptedSource {
    inner: Arc<Mutex<Script>>,
}

impl ScriptedSource {
    pub fn new(epoch_base_ms: u64, cpus: usize) -> Self {
        let script = Script {
            epoch_base_ms,
            cpus,
            host: Some(HostCpuTimes::default()),
            mem_available: Some(1 << 30),
            load1: Some(0.0),
            ..Script::default()
        };
        ScriptedSource { inner: Arc::new(Mutex::new(script)) }
    }

    fn with<T>(&self, f: impl FnOnce(&mut Script) -> T) -> T {
        f(&mut self.inner.lock().expect("script lock"))
    }

    pub fn advance(&self, ms: u64) {
        self.with(|s| s.now_ms += ms);
    }

    pub fn set_process(&self, pid: u32, name: &str, cpu_seconds: f64, resident_bytes: u64) {
        self.with(|s| s.processes.insert(pid, (name.to_string(), ProcessStat { cpu_seconds, resident_bytes })));
    }

    pub fn kill(&self, pid: u32) {
        self.with(|s| s.processes.remove(&pid));
    }

    /// `None` makes host CPU accounting unreadable.
    pub fn set_host_cpu(&self, times: Option<HostCpuTimes>) {
        self.with(|s| s.host = times);
    }

    pub fn set_mem_available(&self, bytes: Option<u64>) {
        self.with(|s| s.mem_available = bytes);
    }

    pub fn set_static(&self, info: StaticInfo) {
        self.with(|s| s.info = Some(info));
    }
}

impl AccountingSource for ScriptedSource {
    fn now(&mut self) -> Clock {
        self.with(|s| Clock { epoch_ms: s.epoch_base_ms + s.now_ms, mono: Duration::from_millis(s.now_ms) })
    }

    fn process(&mut self, pid: u32) -> Result<ProcessStat, MonitorError> {
        self.with(|s| s.processes.get(&pid).map(|(_, st)| *st).ok_or(MonitorError::ProcessGone(pid)))
    }

    fn host_cpu(&mut self) -> Result<HostCpuTimes, MonitorError> {
        self.with(|s| s.host.ok_or_else(|| MonitorError::Source("host cpu unavailable".to_string())))
    }

    fn mem_available_bytes(&mut self) -> Result<u64, MonitorError> {
        self.with(|s| s.mem_available.ok_or_else(|| MonitorError::Source("meminfo unavailable".to_string())))
    }

    fn load1(&mut self) -> Result<f64, MonitorError> {
        self.with(|s| s.load1.ok_or_else(|| MonitorError::Source("loadavg unavailable".to_string())))
    }

    fn cpu_count(&self) -> usize {
        self.with(|s| s.cpus)
    }

    fn static_info(&mut self) -> StaticInfo {
        self.with(|s| {
            s.info.clone().unwrap_or(StaticInfo {
                os: "unknown".to_string(),
                cpu_model: "unknown".to_string(),
                cpu_cores: s.cpus.max(1),
                mem_total_bytes: None,
            })
        })
    }

    fn pids_named(&mut self, tag: &str) -> Vec<u32> {
        self.with(|s| {
            let mut pids: Vec<u32> = s.processes.iter().filter(|(_, (n, _))| n == tag).map(|(p, _)| *p).collect();
            pids.sort_unstable();
            pids
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_fields_survive_odd_command_names() {
        let stat = "123 (a b) c)) S 1 2 3 4 5 6 7 8 9 10 250 50 0 0";
        let f = stat_fields(stat).unwrap();
        assert_eq!(f[0], "S");
        assert_eq!(f[11], "250");
        assert_eq!(f[12], "50");
    }

    #[test]
    fn proc_source_reads_self() {
        let mut src = ProcSource::new();
        let me = src.process(std::process::id()).unwrap();
        assert!(me.resident_bytes > 0);
        assert!(src.cpu_count() >= 1);
        let host = src.host_cpu().unwrap();
        assert!(host.total >= host.busy);
        assert!(src.mem_available_bytes().unwrap() > 0);
        assert!(src.load1().unwrap() >= 0.0);
    }

    #[test]
    fn missing_pid_is_gone() {
        let mut src = ProcSource::new();
        assert_eq!(src.process(u32::MAX - 1), Err(MonitorError::ProcessGone(u32::MAX - 1)));
    }

    #[test]
    fn clock_is_monotone() {
        let mut src = ProcSource::new();
        let a = src.now();
        std::thread::sleep(Duration::from_millis(5));
        let b = src.now();
        assert!(b.mono > a.mono && b.epoch_ms >= a.epoch_ms);
    }

    #[test]
    fn node_name_env_override() {
        // Only this test touches the variable.
        std::env::set_var(NODE_NAME_ENV, "node-under-test");
        assert_eq!(node_name(), "node-under-test");
        std::env::remove_var(NODE_NAME_ENV);
        assert!(!node_name().is_empty());
    }
}
