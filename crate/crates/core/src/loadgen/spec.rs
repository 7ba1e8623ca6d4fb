use std::fmt::Write as _;

use thiserror::Error;

use super::table::{TransitionError, TransitionTable, DEFAULT_MAX_PHASE_ENTRIES};

pub const DEFAULT_PACKET_SIZE: usize = 1024;

/// Parameter file keys, in the order they are written.
pub const PARAM_KEYS: [&str; 11] = [
    "job_id",
    "net_duration_s",
    "inter_packet_delay_ms",
    "packet_sink",
    "packet_size_b",
    "mem_footprint_mib",
    "cpu_duration_s",
    "cpu_util_factor",
    "seed",
    "transitions",
    "max_phase_entries",
];

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("override '{entry}': {msg}")]
    Override { entry: String, msg: String },
    #[error("invalid {field}: {msg}")]
    Validation { field: &'static str, msg: String },
}

impl SpecError {
    fn invalid(field: &'static str, msg: impl Into<String>) -> Self {
        SpecError::Validation { field, msg: msg.into() }
    }
}

/// One emulated job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub job_id: String,
    /// Seconds of network loading per NetLoad visit.
    pub net_duration: f64,
    pub inter_packet_delay_ms: f64,
    pub packet_sink: String,
    pub packet_size: usize,
    /// Resident footprint in MiB (2^20 bytes).
    pub mem_footprint_mib: f64,
    /// Seconds of CPU loading per CpuLoad visit.
    pub cpu_duration: f64,
    /// Probability that a CPU quantum is spent busy.
    pub cpu_util_factor: f64,
    pub transitions: TransitionTable,
    pub seed: u64,
}

impl Default for JobSpec {
    fn default() -> Self {
        JobSpec {
            job_id: "job".to_string(),
            net_duration: 0.0,
            inter_packet_delay_ms: 10.0,
            packet_sink: "127.0.0.1:9".to_string(),
            packet_size: DEFAULT_PACKET_SIZE,
            mem_footprint_mib: 0.0,
            cpu_duration: 0.0,
            cpu_util_factor: 1.0,
            transitions: TransitionTable::deterministic(DEFAULT_MAX_PHASE_ENTRIES),
            seed: 0,
        }
    }
}

impl JobSpec {
    /// Parses a parameter file and applies `key=value` overrides on top.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<JobSpec, SpecError> {
        let mut builder = Builder::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| SpecError::Parse { line, msg: format!("expected 'key = value', found '{content}'") })?;
            let key = key.trim();
            let Some(&known) = PARAM_KEYS.iter().find(|k| **k == key) else {
                return Err(SpecError::Parse { line, msg: format!("unknown key '{key}'") });
            };
            if seen.contains(&known) {
                return Err(SpecError::Parse { line, msg: format!("duplicate key '{key}'") });
            }
            seen.push(known);
            builder.set(known, value.trim()).map_err(|msg| SpecError::Parse { line, msg })?;
        }
        for (key, value) in overrides {
            let entry = format!("{key}={value}");
            let Some(&known) = PARAM_KEYS.iter().find(|k| **k == key.trim()) else {
                return Err(SpecError::Override { entry, msg: "unknown key".to_string() });
            };
            builder.set(known, value.trim()).map_err(|msg| SpecError::Override { entry, msg })?;
        }
        let spec = builder.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    /// Splits `key=value` strings as given on the command line.
    pub fn split_override(entry: &str) -> Result<(String, String), SpecError> {
        entry
            .split_once('=')
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .ok_or_else(|| SpecError::Override { entry: entry.to_string(), msg: "expected key=value".to_string() })
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.job_id.is_empty() || self.job_id.contains([',', '\n', '#']) {
            return Err(SpecError::invalid("job_id", "must be non-empty without ',', '#' or newlines"));
        }
        let non_negative = [
            ("net_duration_s", self.net_duration),
            ("inter_packet_delay_ms", self.inter_packet_delay_ms),
            ("mem_footprint_mib", self.mem_footprint_mib),
            ("cpu_duration_s", self.cpu_duration),
        ];
        for (field, value) in non_negative {
            if !value.is_finite() || value < 0.0 {
                return Err(SpecError::invalid(field, format!("{value} is not a finite value >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.cpu_util_factor) {
            return Err(SpecError::invalid("cpu_util_factor", format!("{} is outside [0, 1]", self.cpu_util_factor)));
        }
        if self.packet_size == 0 || self.packet_size > 65_507 {
            return Err(SpecError::invalid("packet_size_b", "must be in 1..=65507"));
        }
        if self.packet_sink.trim().is_empty() {
            return Err(SpecError::invalid("packet_sink", "empty address"));
        }
        self.transitions.validate().map_err(|e| SpecError::invalid("transitions", e.to_string()))?;
        Ok(())
    }

    /// Writes the canonical parameter file.
    pub fn to_param_file(&self) -> String {
        let mut out = String::new();
        for key in PARAM_KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// Textual value of one parameter key.
    pub fn value_of(&self, key: &str) -> String {
        match key {
            "job_id" => self.job_id.clone(),
            "net_duration_s" => self.net_duration.to_string(),
            "inter_packet_delay_ms" => self.inter_packet_delay_ms.to_string(),
            "packet_sink" => self.packet_sink.clone(),
            "packet_size_b" => self.packet_size.to_string(),
            "mem_footprint_mib" => self.mem_footprint_mib.to_string(),
            "cpu_duration_s" => self.cpu_duration.to_string(),
            "cpu_util_factor" => self.cpu_util_factor.to_string(),
            "seed" => self.seed.to_string(),
            "transitions" => self.transitions.to_string(),
            "max_phase_entries" => self.transitions.max_phase_entries().to_string(),
            _ => String::new(),
        }
    }
}

#[derive(Default)]
struct Builder {
    spec: JobSpec,
    table: Option<TransitionTable>,
    cap: Option<u32>,
}

impl Builder {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num(value: &str) -> Result<f64, String> {
            value.parse::<f64>().map_err(|_| format!("'{value}' is not a number"))
        }
        fn int<T: std::str::FromStr>(value: &str) -> Result<T, String> {
            value.parse::<T>().map_err(|_| format!("'{value}' is not an unsigned integer"))
        }
        let spec = &mut self.spec;
        match key {
            "job_id" => spec.job_id = value.to_string(),
            "net_duration_s" => spec.net_duration = num(value)?,
            "inter_packet_delay_ms" => spec.inter_packet_delay_ms = num(value)?,
            "packet_sink" => spec.packet_sink = value.to_string(),
            "packet_size_b" => spec.packet_size = int(value)?,
            "mem_footprint_mib" => spec.mem_footprint_mib = num(value)?,
            "cpu_duration_s" => spec.cpu_duration = num(value)?,
            "cpu_util_factor" => spec.cpu_util_factor = num(value)?,
            "seed" => spec.seed = int(value)?,
            "transitions" => self.table = Some(value.parse().map_err(|e: TransitionError| e.to_string())?),
            "max_phase_entries" => self.cap = Some(int(value)?),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<JobSpec, SpecError> {
        let mut table = self.table.unwrap_or_else(|| TransitionTable::deterministic(DEFAULT_MAX_PHASE_ENTRIES));
        if let Some(cap) = self.cap {
            table.set_max_phase_entries(cap).map_err(|e| SpecError::invalid("max_phase_entries", e.to_string()))?;
        }
        self.spec.transitions = table;
        Ok(self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loadgen::{State, TableKind};
    use proptest::prelude::*;

    const FILE: &str = "\
# sample job
job_id = j1
net_duration_s = 2
inter_packet_delay_ms = 5   # 200 packets/s
packet_sink = 127.0.0.1:9000
mem_footprint_mib = 64
cpu_duration_s = 10
cpu_util_factor = 0.5
seed = 42
";

    #[test]
    fn override_wins() {
        let ov = vec![("cpu_duration_s".to_string(), "20".to_string())];
        let spec = JobSpec::parse(FILE, &ov).unwrap();
        assert_eq!(spec.cpu_duration, 20.0);
        assert_eq!(spec.net_duration, 2.0);
        assert_eq!(spec.inter_packet_delay_ms, 5.0);
        assert_eq!(spec.seed, 42);
    }

    #[test]
    fn default_table_is_deterministic_progression() {
        let spec = JobSpec::parse(FILE, &[]).unwrap();
        let t = &spec.transitions;
        assert_eq!(t.kind(), TableKind::Deterministic);
        assert_eq!(t.row(State::NetLoad).unwrap(), &[(State::MemAlloc, 1.0)]);
        assert_eq!(t.row(State::MemAlloc).unwrap(), &[(State::CpuLoad, 1.0)]);
        assert_eq!(t.row(State::CpuLoad).unwrap(), &[(State::Done, 1.0)]);
        assert!(t.row(State::Done).is_none());
    }

    #[test]
    fn row_summing_to_point_nine_is_rejected() {
        let text = format!("{FILE}transitions = NetLoad: CpuLoad=0.6, Done=0.3; CpuLoad: Done=1\n");
        let err = JobSpec::parse(&text, &[]).unwrap_err();
        assert!(matches!(err, SpecError::Parse { line: 10, .. }), "{err:?}");
    }

    #[test]
    fn util_factor_out_of_range_names_field() {
        let ov = vec![("cpu_util_factor".to_string(), "1.5".to_string())];
        let err = JobSpec::parse(FILE, &ov).unwrap_err();
        assert!(matches!(err, SpecError::Validation { field: "cpu_util_factor", .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = JobSpec::parse("job_id = a\n\ncpu_duration_s 10\n", &[]).unwrap_err();
        assert!(matches!(err, SpecError::Parse { line: 3, .. }), "{err:?}");
        let err = JobSpec::parse("bogus = 1\n", &[]).unwrap_err();
        assert!(matches!(err, SpecError::Parse { line: 1, .. }));
    }

    #[test]
    fn negative_duration_rejected() {
        let ov = vec![("net_duration_s".to_string(), "-1".to_string())];
        let err = JobSpec::parse(FILE, &ov).unwrap_err();
        assert!(matches!(err, SpecError::Validation { field: "net_duration_s", .. }));
    }

    #[test]
    fn zero_cap_rejected() {
        let err = JobSpec::parse("max_phase_entries = 0\n", &[]).unwrap_err();
        assert!(matches!(err, SpecError::Validation { field: "max_phase_entries", .. }));
    }

    fn arb_table() -> impl Strategy<Value = TransitionTable> {
        prop_oneof![
            (1u32..50).prop_map(TransitionTable::deterministic),
            (0.0f64..=1.0, 0.0f64..=1.0, 1u32..50).prop_map(|(a, b, cap)| {
                let text = format!(
                    "NetLoad: MemAlloc={a}, CpuLoad={}; MemAlloc: CpuLoad=1; CpuLoad: CpuLoad={b}, Done={}",
                    1.0 - a,
                    1.0 - b
                );
                let mut t: TransitionTable = text.parse().unwrap();
                t.set_max_phase_entries(cap).unwrap();
                t
            }),
        ]
    }

    prop_compose! {
        fn arb_spec()(
            job_id in "[a-z][a-z0-9_-]{0,12}",
            net in 0.0f64..1e4,
            delay in 0.0f64..1e3,
            port in 1u16..,
            size in 1usize..9000,
            mem in 0.0f64..4096.0,
            cpu in 0.0f64..1e5,
            util in 0.0f64..=1.0,
            seed in any::<u64>(),
            transitions in arb_table(),
        ) -> JobSpec {
            JobSpec {
                job_id,
                net_duration: net,
                inter_packet_delay_ms: delay,
                packet_sink: format!("127.0.0.1:{port}"),
                packet_size: size,
                mem_footprint_mib: mem,
                cpu_duration: cpu,
                cpu_util_factor: util,
                transitions,
                seed,
            }
        }
    }

    proptest! {
        #[test]
        fn param_file_round_trip(spec in arb_spec()) {
            let text = spec.to_param_file();
            prop_assert_eq!(JobSpec::parse(&text, &[]).unwrap(), spec);
        }
    }
}
