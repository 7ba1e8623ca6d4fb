//! Experiment runner and single-host service composition.

mod compose;
mod experiment;

use thiserror::Error;

use crate::loadgen::SpecError;
use crate::monitor::{MetricRegistry, MonitorError, Volatility};
use crate::paramgen::ParamError;
use crate::rrdb::RrdError;
use crate::wire::WireError;

pub use compose::{compose, Node, NodeConfig, NodeSummary, Service, ServiceSet};
pub use experiment::{
    parse_report_csv, run_experiment, CpuSeriesRef, ExperimentOptions, ExperimentPlan, ExperimentReport, ExperimentRow,
    JobStatus, ParsedReport, ReportRow, EXPERIMENT_CSV_HEADER,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("job {job}: {source}")]
    Spec { job: String, source: SpecError },
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Archive(#[from] RrdError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Volatile metrics of a registry, the ones an archive stores.
pub fn archived_metrics(registry: &MetricRegistry) -> Vec<String> {
    registry.names(Volatility::Volatile).into_iter().map(str::to_string).collect()
}

/// `key = value` lines with `#` comments, as used by config files.
pub(crate) fn key_values(text: &str) -> Result<Vec<(usize, String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
