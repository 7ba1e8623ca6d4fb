//! Parameter-file generation for large job sets.
//!
//! A [`RunPlan`] names a bounded probability law for each numeric job
//! parameter. Generating the plan draws one value per parameter per job
//! and writes ordinary loadgen parameter files, so heavy-tailed job mixes
//! (say, Pareto-distributed CPU time across a cluster) can be prepared
//! ahead of a run and replayed exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::RngCore;
use thiserror::Error;

use crate::loadgen::{JobSpec, SpecError, TransitionTable, PARAM_KEYS};
use crate::rng::{derive_seed, seeded, unit_f64};

/// Attempts made under [`ClipPolicy::Resample`] before falling back to a clamp.
pub const MAX_RESAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("plan line {line}: {msg}")]
    Plan { line: usize, msg: String },
    #[error("job {index}: {source}")]
    Job { index: usize, source: SpecError },
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<dyn std::error::Error + Send + Sync> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Law {
    Uniform,
    Exponential { rate: f64 },
    Pareto { alpha: f64, x_min: f64 },
    Constant(f64),
}

impl Law {
    fn draw<R: RngCore + ?Sized>(&self, lo: f64, hi: f64, rng: &mut R) -> f64 {
        let u = unit_f64(rng);
        match *self {
            Law::Uniform => lo + (hi - lo) * u,
            Law::Exponential { rate } => -(1.0 - u).ln() / rate,
            Law::Pareto { alpha, x_min } => x_min * (1.0 - u).powf(-1.0 / alpha),
            Law::Constant(v) => v,
        }
    }

    /// Mean of the unbounded law, where finite.
    pub fn mean(&self, lo: f64, hi: f64) -> Option<f64> {
        match *self {
            Law::Uniform => Some((lo + hi) / 2.0),
            Law::Exponential { rate } => Some(1.0 / rate),
            Law::Pareto { alpha, x_min } => (alpha > 1.0).then(|| alpha * x_min / (alpha - 1.0)),
            Law::Constant(v) => Some(v),
        }
    }
}

impl fmt::Display for Law {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Law::Uniform => f.write_str("uniform"),
            Law::Exponential { rate } => write!(f, "exponential({rate})"),
            Law::Pareto { alpha, x_min } => write!(f, "pareto({alpha}, {x_min})"),
            Law::Constant(v) => write!(f, "constant({v})"),
        }
    }
}

impl FromStr for Law {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParamError::Distribution(format!("cannot parse law '{s}'"));
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((name, rest)) => (name.trim(), rest.strip_suffix(')').ok_or_else(bad)?),
            None => (s, ""),
        };
        let args: Vec<f64> = args
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(|a| a.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match (name.to_ascii_lowercase().as_str(), args.as_slice()) {
            ("uniform", []) => Ok(Law::Uniform),
            ("exponential", [rate]) => Ok(Law::Exponential { rate: *rate }),
            ("pareto", [alpha, x_min]) => Ok(Law::Pareto { alpha: *alpha, x_min: *x_min }),
            ("constant", [v]) => Ok(Law::Constant(*v)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipPolicy {
    #[default]
    Resample,
    Clamp,
}

impl FromStr for ClipPolicy {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "resample" => Ok(ClipPolicy::Resample),
            "clamp" => Ok(ClipPolicy::Clamp),
            other => Err(ParamError::Distribution(format!("unknown clip policy '{other}'"))),
        }
    }
}

/// A probability law restricted to `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionSpec {
    pub law: Law,
    pub lower: f64,
    pub upper: f64,
    pub clip: ClipPolicy,
}

impl DistributionSpec {
    pub fn new(law: Law, lower: f64, upper: f64) -> Self {
        DistributionSpec { law, lower, upper, clip: ClipPolicy::Resample }
    }

    pub fn constant(v: f64) -> Self {
        DistributionSpec::new(Law::Constant(v), v, v)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let err = |m: String| Err(ParamError::Distribution(m));
        if self.lower.is_nan() || self.upper.is_nan() || self.lower > self.upper {
            return err(format!("bounds [{}, {}] are not ordered", self.lower, self.upper));
        }
        match self.law {
            Law::Uniform if !(self.lower.is_finite() && self.upper.is_finite()) => {
                err("uniform needs finite bounds".to_string())
            }
            Law::Exponential { rate } if !(rate > 0.0 && rate.is_finite()) => {
                err(format!("exponential rate {rate} must be > 0"))
            }
            Law::Pareto { alpha, x_min } if !(alpha > 0.0 && x_min > 0.0 && alpha.is_finite() && x_min.is_finite()) => {
                err(format!("pareto needs alpha > 0 and x_min > 0, got ({alpha}, {x_min})"))
            }
            Law::Constant(v) if !(self.lower..=self.upper).contains(&v) => {
                err(format!("constant {v} lies outside [{}, {}]", self.lower, self.upper))
            }
            _ => Ok(()),
        }
    }
}

/// Draws one value from `spec`, always inside its bounds.
///
/// Under [`ClipPolicy::Resample`] out-of-bounds draws are retried up to
/// [`MAX_RESAMPLES`] times before the last draw is clamped.
pub fn sample<R: RngCore + ?Sized>(spec: &DistributionSpec, rng: &mut R) -> Result<f64, ParamError> {
    spec.validate()?;
    let (lo, hi) = (spec.lower, spec.upper);
    let mut x = spec.law.draw(lo, hi, rng);
    if spec.clip == ClipPolicy::Resample {
        let mut attempts = 1;
        while !(lo..=hi).contains(&x) && attempts < MAX_RESAMPLES {
            x = spec.law.draw(lo, hi, rng);
            attempts += 1;
        }
    }
    Ok(x.clamp(lo, hi))
}

/// Numeric job parameters a plan may draw, in parameter-file order.
pub const PLAN_METRICS: [&str; 7] = [
    "net_duration_s",
    "inter_packet_delay_ms",
    "packet_size_b",
    "mem_footprint_mib",
    "cpu_duration_s",
    "cpu_util_factor",
    "max_phase_entries",
];

fn integer_metric(metric: &str) -> bool {
    matches!(metric, "packet_size_b" | "max_phase_entries")
}

/// Recipe for a set of generated jobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub n_jobs: usize,
    pub master_seed: u64,
    pub job_prefix: String,
    pub packet_sink: String,
    pub transitions: TransitionTable,
    pub metrics: BTreeMap<String, DistributionSpec>,
}

impl Default for RunPlan {
    fn default() -> Self {
        let base = JobSpec::default();
        RunPlan {
            n_jobs: 1,
            master_seed: 0,
            job_prefix: "job".to_string(),
            packet_sink: base.packet_sink,
            transitions: base.transitions,
            metrics: BTreeMap::new(),
        }
    }
}

impl RunPlan {
    /// Seed written into job `index`'s parameter file.
    pub fn job_seed(&self, index: usize) -> u64 {
        derive_seed(self.master_seed, 2 * index as u64)
    }

    /// Seed of the stream the parameters of job `index` are drawn from.
    pub fn sampling_seed(&self, index: usize) -> u64 {
        derive_seed(self.master_seed, 2 * index as u64 + 1)
    }

    /// Law for `metric`, defaulting to the loadgen default as a constant.
    pub fn law_for(&self, metric: &str) -> DistributionSpec {
        if let Some(spec) = self.metrics.get(metric) {
            return *spec;
        }
        let base = JobSpec::default();
        let v: f64 = base.value_of(metric).parse().unwrap_or(0.0);
        DistributionSpec::constant(v)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if self.n_jobs == 0 {
            return Err(ParamError::Distribution("n_jobs must be at least 1".to_string()));
        }
        for (metric, spec) in &self.metrics {
            if !PLAN_METRICS.contains(&metric.as_str()) {
                return Err(ParamError::Distribution(format!("'{metric}' is not a plannable metric")));
            }
            spec.validate().map_err(|e| ParamError::Distribution(format!("{metric}: {e}")))?;
            if integer_metric(metric) && spec.lower.ceil() > spec.upper.floor() {
                return Err(ParamError::Distribution(format!("{metric}: no integer within bounds")));
            }
        }
        Ok(())
    }

    /// Parses a plan written as `key = value` lines.
    ///
    /// Plan keys are `n_jobs`, `seed`, `job_prefix`, `packet_sink` and
    /// `transitions`; each metric takes `<metric>.law`, `<metric>.lo`,
    /// `<metric>.hi` and `<metric>.clip`.
    pub fn parse(text: &str) -> Result<RunPlan, ParamError> {
        #[derive(Default)]
        struct Partial {
            law: Option<Law>,
            lo: Option<f64>,
            hi: Option<f64>,
            clip: ClipPolicy,
        }
        let mut plan = RunPlan::default();
        let mut partials: BTreeMap<String, Partial> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let perr = |msg: String| ParamError::Plan { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| perr(format!("expected 'key = value', found '{content}'")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| perr(format!("'{v}' is not a number")));
            match key {
                "n_jobs" => plan.n_jobs = value.parse().map_err(|_| perr(format!("bad n_jobs '{value}'")))?,
                "seed" => plan.master_seed = value.parse().map_err(|_| perr(format!("bad seed '{value}'")))?,
                "job_prefix" => plan.job_prefix = value.to_string(),
                "packet_sink" => plan.packet_sink = value.to_string(),
                "transitions" => {
                    plan.transitions = value.parse().map_err(|e| perr(format!("{e}")))?;
                }
                _ => {
                    let (metric, field) = key.split_once('.').ok_or_else(|| perr(format!("unknown key '{key}'")))?;
                    if !PLAN_METRICS.contains(&metric) {
                        return Err(perr(format!("'{metric}' is not a plannable metric")));
                    }
                    let partial = partials.entry(metric.to_string()).or_default();
                    match field {
                        "law" => partial.law = Some(value.parse().map_err(|e| perr(format!("{e}")))?),
                        "lo" => partial.lo = Some(num(value)?),
                        "hi" => partial.hi = Some(num(value)?),
                        "clip" => partial.clip = value.parse().map_err(|e| perr(format!("{e}")))?,
                        _ => return Err(perr(format!("unknown field '{field}'"))),
                    }
                }
            }
        }
        for (metric, p) in partials {
            let law = p.law.ok_or_else(|| ParamError::Plan { line: 0, msg: format!("{metric}.law missing") })?;
            let (default_lo, default_hi) = match law {
                Law::Constant(v) => (v.min(0.0), f64::INFINITY),
                Law::Pareto { x_min, .. } => (x_min, f64::INFINITY),
                _ => (0.0, f64::INFINITY),
            };
            let default_hi = if metric == "cpu_util_factor" { 1.0 } else { default_hi };
            let hi = p.hi.unwrap_or(default_hi);
            let spec = DistributionSpec { law, lower: p.lo.unwrap_or(default_lo), upper: hi, clip: p.clip };
            plan.metrics.insert(metric, spec);
        }
        plan.validate()?;
        Ok(plan)
    }

    /// Draws the job specs of the plan.
    pub fn jobs(&self) -> Result<Vec<JobSpec>, ParamError> {
        self.validate()?;
        (0..self.n_jobs).map(|i| self.job(i)).collect()
    }

    fn job(&self, index: usize) -> Result<JobSpec, ParamError> {
        let mut rng = seeded(self.sampling_seed(index));
        let mut spec = JobSpec {
            job_id: format!("{}-{index:05}", self.job_prefix),
            packet_sink: self.packet_sink.clone(),
            transitions: self.transitions.clone(),
            seed: self.job_seed(index),
            ..JobSpec::default()
        };
        for metric in PLAN_METRICS {
            let law = self.law_for(metric);
            let mut value = sample(&law, &mut rng)?;
            if integer_metric(metric) {
                value = value.round().clamp(law.lower.ceil(), law.upper.floor());
            }
            match metric {
                "net_duration_s" => spec.net_duration = value,
                "inter_packet_delay_ms" => spec.inter_packet_delay_ms = value,
                "packet_size_b" => spec.packet_size = value as usize,
                "mem_footprint_mib" => spec.mem_footprint_mib = value,
                "cpu_duration_s" => spec.cpu_duration = value,
                "cpu_util_factor" => spec.cpu_util_factor = value,
                "max_phase_entries" => {
                    let cap = if self.metrics.contains_key(metric) {
                        value as u32
                    } else {
                        self.transitions.max_phase_entries()
                    };
                    spec.transitions
                        .set_max_phase_entries(cap)
                        .map_err(|e| ParamError::Distribution(format!("max_phase_entries: {e}")))?;
                }
                _ => unreachable!(),
            }
        }
        spec.validate().map_err(|source| ParamError::Job { index, source })?;
        Ok(spec)
    }
}

/// A generated parameter file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamFile {
    pub name: String,
    pub contents: String,
}

/// Renders the plan as parameter files, one per job.
pub fn generate_param_files(plan: &RunPlan) -> Result<Vec<ParamFile>, ParamError> {
    Ok(plan
        .jobs()?
        .into_iter()
        .map(|spec| ParamFile { name: format!("{}.param", spec.job_id), contents: spec.to_param_file() })
        .collect())
}

pub fn write_param_files(files: &[ParamFile], dir: &Path) -> Result<(), ParamError> {
    fs::create_dir_all(dir)?;
    for f in files {
        fs::write(dir.join(&f.name), &f.contents)?;
    }
    Ok(())
}

/// Reads every `*.param` file in `dir`, sorted by name.
pub fn read_param_dir(dir: &Path) -> Result<Vec<ParamFile>, ParamError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "param"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let contents =
                fs::read_to_string(&path).map_err(|e| ParamError::File { path: path.clone(), source: Box::new(e) })?;
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok(ParamFile { name, contents })
        })
        .collect()
}

/// Columns of the inspection table.
pub fn inspection_columns() -> Vec<&'static str> {
    PARAM_KEYS.iter().copied().filter(|k| !matches!(*k, "packet_sink" | "transitions")).collect()
}

/// Tabulates every parameter of every job as CSV for external plotting.
pub fn emit_inspection_series(files: &[ParamFile]) -> Result<String, ParamError> {
    let columns = inspection_columns();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ParamError::Io(io::Error::other(e));
    w.write_record(&columns).map_err(csv_err)?;
    for f in files {
        let spec = JobSpec::parse(&f.contents, &[])
            .map_err(|e| ParamError::File { path: PathBuf::from(&f.name), source: Box::new(e) })?;
        w.write_record(columns.iter().map(|c| spec.value_of(c))).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ParamError::Io(io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_uniform() {
        let spec = DistributionSpec::new(Law::Uniform, 7.0, 7.0);
        let mut rng = seeded(1);
        for _ in 0..100 {
            assert_eq!(sample(&spec, &mut rng).unwrap(), 7.0);
        }
    }

    #[test]
    fn constant_law() {
        let spec = DistributionSpec::new(Law::Constant(4.0), 0.0, 10.0);
        let mut rng = seeded(2);
        assert!((0..100).all(|_| sample(&spec, &mut rng).unwrap() == 4.0));
    }

    #[test]
    fn invalid_specs() {
        let cases = [
            DistributionSpec::new(Law::Uniform, 2.0, 1.0),
            DistributionSpec::new(Law::Uniform, 0.0, f64::INFINITY),
            DistributionSpec::new(Law::Exponential { rate: 0.0 }, 0.0, 1.0),
            DistributionSpec::new(Law::Pareto { alpha: 0.0, x_min: 1.0 }, 0.0, 1.0),
            DistributionSpec::new(Law::Pareto { alpha: 1.0, x_min: -1.0 }, 0.0, 1.0),
            DistributionSpec::new(Law::Constant(11.0), 0.0, 10.0),
        ];
        for spec in cases {
            assert!(sample(&spec, &mut seeded(0)).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn clamp_policy_pins_to_bound() {
        let spec = DistributionSpec {
            law: Law::Pareto { alpha: 1.0, x_min: 50.0 },
            lower: 0.0,
            upper: 10.0,
            clip: ClipPolicy::Clamp,
        };
        assert_eq!(sample(&spec, &mut seeded(3)).unwrap(), 10.0);
        // Resampling cannot find mass inside the bounds and falls back to a clamp.
        let resample = DistributionSpec { clip: ClipPolicy::Resample, ..spec };
        assert_eq!(sample(&resample, &mut seeded(3)).unwrap(), 10.0);
    }

    #[test]
    fn law_text_round_trips() {
        for law in
            [Law::Uniform, Law::Exponential { rate: 0.5 }, Law::Pareto { alpha: 2.0, x_min: 1.5 }, Law::Constant(3.25)]
        {
            assert_eq!(law.to_string().parse::<Law>().unwrap(), law);
        }
        assert!("pareto(1)".parse::<Law>().is_err());
        assert!("gauss".parse::<Law>().is_err());
    }

    #[test]
    fn plan_parsing() {
        let plan = RunPlan::parse(
            "n_jobs = 3\nseed = 9\ncpu_duration_s.law = pareto(2, 1)\ncpu_duration_s.hi = 100\n\
             cpu_util_factor.law = uniform\nmem_footprint_mib.law = constant(16)\n",
        )
        .unwrap();
        assert_eq!(plan.n_jobs, 3);
        assert_eq!(plan.master_seed, 9);
        let cpu = plan.metrics["cpu_duration_s"];
        assert_eq!((cpu.lower, cpu.upper), (1.0, 100.0));
        let util = plan.metrics["cpu_util_factor"];
        assert_eq!((util.lower, util.upper), (0.0, 1.0));
        assert!(RunPlan::parse("bogus.law = uniform\n").is_err());
        assert!(matches!(RunPlan::parse("n_jobs 3\n"), Err(ParamError::Plan { line: 1, .. })));
    }

    #[test]
    fn constant_plan_yields_exact_values() {
        let plan = RunPlan::parse(
            "n_jobs = 1\njob_prefix = c\ncpu_duration_s.law = constant(12.5)\nnet_duration_s.law = constant(2)\n\
             mem_footprint_mib.law = constant(64)\ncpu_util_factor.law = constant(0.75)\n",
        )
        .unwrap();
        let files = generate_param_files(&plan).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].name, "c-00000.param");
        let spec = JobSpec::parse(&files[0].contents, &[]).unwrap();
        assert_eq!(spec.cpu_duration, 12.5);
        assert_eq!(spec.net_duration, 2.0);
        assert_eq!(spec.mem_footprint_mib, 64.0);
        assert_eq!(spec.cpu_util_factor, 0.75);
        assert_eq!(spec.seed, plan.job_seed(0));
    }

    #[test]
    fn integer_metrics_are_whole() {
        let plan = RunPlan::parse(
            "n_jobs = 50\npacket_size_b.law = uniform\npacket_size_b.lo = 64.5\npacket_size_b.hi = 1500\n",
        )
        .unwrap();
        for spec in plan.jobs().unwrap() {
            assert!((65..=1500).contains(&spec.packet_size));
        }
    }

    #[test]
    fn inspection_table_shape() {
        let plan = RunPlan::parse("n_jobs = 3\ncpu_duration_s.law = exponential(0.1)\n").unwrap();
        let csv = emit_inspection_series(&generate_param_files(&plan).unwrap()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "job_id,net_duration_s,inter_packet_delay_ms,packet_size_b,mem_footprint_mib,cpu_duration_s,cpu_util_factor,seed,max_phase_entries"
        );
    }

    #[test]
    fn unparsable_file_is_named() {
        let files = vec![ParamFile { name: "broken.param".to_string(), contents: "nonsense\n".to_string() }];
        let err = emit_inspection_series(&files).unwrap_err().to_string();
        assert!(err.contains("broken.param"), "{err}");
    }
}
