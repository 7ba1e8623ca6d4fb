//! Per-process and host resource sampling.
//!
//! OS accounting is read through the [`AccountingSource`] trait. The
//! procfs implementation ([`ProcSource`]) is what the CLI uses; the
//! [`ScriptedSource`] replays hand-written series so the sampling logic can
//! be tested anywhere.

mod sampler;
mod source;

use std::fmt;

use thiserror::Error;

pub use sampler::{
    run_sampler, HostSample, Monitor, SampleSink, SamplerConfig, SamplerHandle, SamplerStats, SinkError, WatchSelector,
    MIN_INTERVAL,
};
pub use source::{
    node_name, AccountingSource, Clock, HostCpuTimes, ProcSource, ProcessStat, ScriptedSource, StaticInfo,
    NODE_NAME_ENV,
};

pub const CPU_FRAC: &str = "cpu_frac";
pub const RESIDENT_MIB: &str = "resident_mib";
pub const CPU_TOTAL: &str = "cpu_total";
pub const MEM_FREE_MIB: &str = "mem_free_mib";
pub const LOAD1: &str = "load1";
pub const SAMPLER_DROPPED: &str = "sampler_dropped";
pub const OS: &str = "os";
pub const CPU_MODEL: &str = "cpu_model";
pub const CPU_CORES: &str = "cpu_cores";
pub const MEM_TOTAL_MIB: &str = "mem_total_mib";

/// Units string marking a textual value.
pub const TEXT_UNITS: &str = "text";

#[derive(Debug, Error, PartialEq)]
pub enum MonitorError {
    #[error("process {0} is gone")]
    ProcessGone(u32),
    #[error("accounting source: {0}")]
    Source(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("metric '{0}' is already registered")]
    DuplicateMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Volatility {
    Volatile,
    NonVolatile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Host,
    Process,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricDescriptor {
    pub name: String,
    pub units: String,
    pub volatility: Volatility,
    pub scope: Scope,
}

impl MetricDescriptor {
    pub fn new(name: &str, units: &str, volatility: Volatility, scope: Scope) -> Self {
        MetricDescriptor { name: name.to_string(), units: units.to_string(), volatility, scope }
    }
}

/// Metric names known to a node. Names are unique and keep their volatility.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetricRegistry {
    descriptors: Vec<MetricDescriptor>,
}

impl MetricRegistry {
    pub fn empty() -> Self {
        MetricRegistry::default()
    }

    pub fn register(&mut self, d: MetricDescriptor) -> Result<(), MonitorError> {
        if self.get(&d.name).is_some() {
            return Err(MonitorError::DuplicateMetric(d.name));
        }
        self.descriptors.push(d);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&MetricDescriptor> {
        self.descriptors.iter().find(|d| d.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricDescriptor> {
        self.descriptors.iter()
    }

    pub fn names(&self, volatility: Volatility) -> Vec<&str> {
        self.iter().filter(|d| d.volatility == volatility).map(|d| d.name.as_str()).collect()
    }
}

impl MetricRegistry {
    /// The metrics this crate's samplers publish.
    pub fn standard() -> Self {
        use Scope::*;
        use Volatility::*;
        let mut r = MetricRegistry::default();
        for d in [
            MetricDescriptor::new(CPU_FRAC, "frac", Volatile, Process),
            MetricDescriptor::new(RESIDENT_MIB, "MiB", Volatile, Process),
            MetricDescriptor::new(CPU_TOTAL, "cpus", Volatile, Host),
            MetricDescriptor::new(MEM_FREE_MIB, "MiB", Volatile, Host),
            MetricDescriptor::new(LOAD1, "load", Volatile, Host),
            MetricDescriptor::new(SAMPLER_DROPPED, "count", Volatile, Host),
            MetricDescriptor::new(OS, TEXT_UNITS, NonVolatile, Host),
            MetricDescriptor::new(CPU_MODEL, TEXT_UNITS, NonVolatile, Host),
            MetricDescriptor::new(CPU_CORES, "cores", NonVolatile, Host),
            MetricDescriptor::new(MEM_TOTAL_MIB, "MiB", NonVolatile, Host),
        ] {
            r.register(d).expect("standard names are unique");
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Num(f64),
    Text(String),
}

impl MetricValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            MetricValue::Num(v) => Some(*v),
            MetricValue::Text(_) => None,
        }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Num(v) => write!(f, "{v}"),
            MetricValue::Text(s) => f.write_str(s),
        }
    }
}

/// One timestamped measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSample {
    pub host: String,
    /// Set for process-scope metrics.
    pub pid: Option<u32>,
    pub metric: String,
    pub value: MetricValue,
    pub units: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

impl MetricSample {
    pub fn num(host: &str, pid: Option<u32>, metric: &str, value: f64, units: &str, timestamp_ms: u64) -> Self {
        MetricSample {
            host: host.to_string(),
            pid,
            metric: metric.to_string(),
            value: MetricValue::Num(value),
            units: units.to_string(),
            timestamp_ms,
        }
    }

    pub fn text(host: &str, metric: &str, value: &str, timestamp_ms: u64) -> Self {
        MetricSample {
            host: host.to_string(),
            pid: None,
            metric: metric.to_string(),
            value: MetricValue::Text(value.to_string()),
            units: TEXT_UNITS.to_string(),
            timestamp_ms,
        }
    }
}
