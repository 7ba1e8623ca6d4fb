use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use loadforge::harness::{
    archived_metrics, compose, run_experiment, ExperimentOptions, ExperimentPlan, NodeConfig, ServiceSet,
};
use loadforge::loadgen::{write_reports_csv, JobRunner, JobSpec, RunOptions};
use loadforge::monitor::{
    node_name, run_sampler, MetricRegistry, MetricSample, MetricValue, Monitor, ProcSource, SamplerConfig, SinkError,
    WatchSelector,
};
use loadforge::paramgen::{emit_inspection_series, generate_param_files, read_param_dir, write_param_files, RunPlan};
use loadforge::rrdb::{load_archive, save_archive, RoundRobinArchive, SweepBound, Sweeper, SWEEP_CSV_HEADER};
use loadforge::wire::{Publisher, Transport, WindowConsolidator};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "loadforge", version, about = "Synthetic grid workloads and lightweight monitoring")]
struct Cli {
    /// Node configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for jobs (`run`) or plans (`gen`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one job from a parameter file.
    Run {
        param_file: PathBuf,
        /// Override a parameter, `key=value`.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Write the job report CSV here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 4096.0)]
        mem_cap_mib: f64,
    },
    /// Generate parameter files from a plan.
    Gen {
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter files in a directory as CSV columns.
    Inspect { dir: PathBuf },
    /// Sample processes and the host.
    Mon {
        #[arg(long, default_value_t = 100)]
        interval_ms: u64,
        /// `pid:<n>` or `tag:<name>`; repeatable.
        #[arg(long)]
        watch: Vec<String>,
        #[arg(long, default_value = "csv")]
        emit: Emit,
        /// Destination for `--emit wire`, e.g. `unicast:127.0.0.1:8749`.
        #[arg(long, default_value = "broadcast")]
        publish: String,
        #[arg(long, default_value_t = 1.0)]
        cadence_s: f64,
        /// Archive file for `--emit local-archive`.
        #[arg(long, default_value = "mon.rrd")]
        archive: PathBuf,
        #[arg(long)]
        no_host: bool,
        /// Stop after this many seconds instead of waiting for a signal.
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Receive datagrams into an archive.
    Aggregate {
        /// Listening address; repeatable.
        #[arg(long)]
        listen: Vec<String>,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Also sweep into this directory.
        #[arg(long)]
        sweep_dir: Option<PathBuf>,
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Sweep a saved archive into CSV files.
    Sweep {
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Include slots of the current, still open period.
        #[arg(long)]
        all: bool,
    },
    /// Run every job in a directory and report expected vs observed time.
    Experiment {
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        #[arg(long, default_value = "experiment.csv")]
        report: PathBuf,
    },
    /// Start monitor, aggregator and sweeper together.
    Compose {
        #[arg(long)]
        services: Option<String>,
        #[arg(long)]
        listen: Vec<String>,
        #[arg(long)]
        watch: Vec<String>,
        #[arg(long)]
        sweep_dir: Option<PathBuf>,
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        duration_s: Option<f64>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Emit {
    Wire,
    Csv,
    LocalArchive,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

trait Classify<T> {
    fn validation(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn validation(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_VALIDATION, err: e.into() })
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_RUNTIME, err: e.into() })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn node_config(cli_config: Option<&Path>) -> Result<NodeConfig, Failure> {
    match cli_config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).validation()?;
            NodeConfig::parse(&text).validation()
        }
        None => Ok(NodeConfig::default()),
    }
}

fn parse_addrs(list: &[String]) -> Result<Vec<std::net::SocketAddr>, Failure> {
    list.iter().map(|a| a.parse().map_err(|_| anyhow!("bad address '{a}'"))).collect::<Result<_, _>>().validation()
}

fn parse_watch(list: &[String]) -> Result<Vec<WatchSelector>, Failure> {
    list.iter().map(|w| w.parse::<WatchSelector>()).collect::<Result<_, _>>().validation()
}

/// Blocks until a signal arrives or the optional duration passes.
fn wait_for_stop(duration_s: Option<f64>) -> Result<(), Failure> {
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .context("installing signal handler")
    .runtime()?;
    let deadline = duration_s.map(|s| Instant::now() + Duration::from_secs_f64(s.max(0.0)));
    loop {
        let wait = match deadline {
            Some(d) => d.saturating_duration_since(Instant::now()),
            None => Duration::from_secs(3600),
        };
        if deadline.is_some() && wait.is_zero() {
            return Ok(());
        }
        match rx.recv_timeout(wait) {
            Ok(()) => return Ok(()),
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => return Ok(()),
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { param_file, overrides, report, mem_cap_mib } => {
            let text = fs::read_to_string(&param_file)
                .with_context(|| format!("reading {}", param_file.display()))
                .validation()?;
            let mut pairs =
                overrides.iter().map(|o| JobSpec::split_override(o)).collect::<Result<Vec<_>, _>>().validation()?;
            if let Some(seed) = cli.seed {
                pairs.push(("seed".to_string(), seed.to_string()));
            }
            let spec = JobSpec::parse(&text, &pairs).validation()?;
            let runner = JobRunner::new(RunOptions { mem_cap_mib, ..RunOptions::default() });
            let stdout = std::io::stdout();
            let result = runner
                .run_observed(&spec, |state, ts| {
                    let mut out = stdout.lock();
                    let _ = writeln!(out, "phase-start state={} ts_ms={ts}", state.name());
                    let _ = out.flush();
                })
                .validation()?;
            for e in result.errors() {
                eprintln!("phase error: {e}");
            }
            println!(
                "job={} expected_s={} observed_s={:.3} pct_diff={} states={}",
                result.job_id,
                result.expected,
                result.observed,
                result.pct_diff().map_or("n/a".to_string(), |p| format!("{p:.3}")),
                result.states_label()
            );
            if let Some(path) = report {
                let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display())).runtime()?;
                write_reports_csv(file, std::slice::from_ref(&result)).runtime()?;
            }
            if let Some(reason) = &result.aborted {
                return Err(Failure { code: EXIT_RUNTIME, err: anyhow!("job aborted: {reason}") });
            }
            Ok(())
        }
        Command::Gen { plan, out } => {
            let text = fs::read_to_string(&plan).with_context(|| format!("reading {}", plan.display())).validation()?;
            let mut plan = RunPlan::parse(&text).validation()?;
            if let Some(seed) = cli.seed {
                plan.master_seed = seed;
            }
            let files = generate_param_files(&plan).validation()?;
            write_param_files(&files, &out).runtime()?;
            println!("wrote {} parameter files to {}", files.len(), out.display());
            Ok(())
        }
        Command::Inspect { dir } => {
            let files = read_param_dir(&dir).runtime()?;
            print!("{}", emit_inspection_series(&files).validation()?);
            Ok(())
        }
        Command::Mon { interval_ms, watch, emit, publish, cadence_s, archive, no_host, duration_s } => {
            let registry = MetricRegistry::standard();
            let config = SamplerConfig {
                interval: Duration::from_millis(interval_ms),
                watch: parse_watch(&watch)?,
                include_host: !no_host,
                registry: registry.clone(),
                ..SamplerConfig::default()
            };
            config.validate().validation()?;
            let monitor = Monitor::new(ProcSource::new(), node_name());
            let mut saved: Option<std::sync::Arc<std::sync::Mutex<RoundRobinArchive>>> = None;
            let handle = match emit {
                Emit::Csv => {
                    println!("{SWEEP_CSV_HEADER}");
                    run_sampler(config, monitor, |batch: &[MetricSample]| -> Result<(), SinkError> {
                        let mut out = std::io::stdout().lock();
                        for s in batch {
                            let pid = s.pid.map_or(String::new(), |p| p.to_string());
                            let value = match &s.value {
                                MetricValue::Text(t) => format!("\"{}\"", t.replace('"', "\"\"")),
                                v => v.to_string(),
                            };
                            writeln!(out, "{},{},{pid},{},{value},{}", s.timestamp_ms, s.host, s.metric, s.units)
                                .map_err(|e| SinkError(e.to_string()))?;
                        }
                        out.flush().map_err(|e| SinkError(e.to_string()))
                    })
                }
                Emit::Wire => {
                    let transport: Transport = publish.parse().validation()?;
                    let mut publisher = Publisher::new(&node_name(), transport).runtime()?;
                    let mut consolidator =
                        WindowConsolidator::new(Duration::from_secs_f64(cadence_s.max(0.0))).validation()?;
                    run_sampler(config, monitor, move |batch: &[MetricSample]| -> Result<(), SinkError> {
                        let now = batch.iter().map(|s| s.timestamp_ms).max().unwrap_or(0);
                        batch.iter().cloned().for_each(|s| consolidator.push(s));
                        publisher
                            .publish(consolidator.take_ready(now))
                            .map(|_| ())
                            .map_err(|e| SinkError(e.to_string()))
                    })
                }
                Emit::LocalArchive => {
                    let metrics = archived_metrics(&registry);
                    let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
                    let store = std::sync::Arc::new(std::sync::Mutex::new(RoundRobinArchive::with_series(
                        Default::default(),
                        &names,
                        64,
                    )));
                    saved = Some(store.clone());
                    run_sampler(config, monitor, move |batch: &[MetricSample]| -> Result<(), SinkError> {
                        let mut a = store.lock().map_err(|_| SinkError("archive lock poisoned".to_string()))?;
                        for s in batch.iter().filter(|s| matches!(s.value, MetricValue::Num(_))) {
                            if let Err(e) = a.insert(s) {
                                log::debug!("insert: {e}");
                            }
                        }
                        Ok(())
                    })
                }
            }
            .runtime()?;
            wait_for_stop(duration_s)?;
            let stats = handle.stop();
            eprintln!(
                "mon: ticks={} missed={} delivered={} dropped={}",
                stats.ticks, stats.missed_ticks, stats.samples_delivered, stats.samples_dropped
            );
            if let Some(store) = saved {
                let a = store.lock().map_err(|_| anyhow!("archive lock poisoned")).runtime()?;
                save_archive(&a, &archive).runtime()?;
                eprintln!("mon: archive saved to {}", archive.display());
            }
            Ok(())
        }
        Command::Aggregate { listen, archive, sweep_dir, duration_s } => {
            let mut config = node_config(cli.config.as_deref())?;
            config.services = if sweep_dir.is_some() { "aggregate,sweep" } else { "aggregate" }.parse().validation()?;
            if !listen.is_empty() {
                config.listen = parse_addrs(&listen)?;
            }
            if let Some(dir) = sweep_dir {
                config.sweep_dir = dir;
            }
            if archive.is_some() {
                config.archive_path = archive;
            }
            run_node(&config, duration_s)
        }
        Command::Sweep { archive, out, all } => {
            let a = load_archive(&archive).runtime()?;
            let mut sweeper = Sweeper::open(
                &out,
                a.metrics().to_vec(),
                Duration::from_millis(a.layout().raw().horizon_ms() / 2),
                a.layout(),
            )
            .runtime()?;
            let n = sweeper.sweep(&a, if all { SweepBound::All } else { SweepBound::Closed }).runtime()?;
            println!("swept {n} records into {}", out.display());
            Ok(())
        }
        Command::Experiment { dir, repetitions, report } => {
            let mut plan = ExperimentPlan::from_dir(&dir, repetitions).validation()?;
            if let Some(seed) = cli.seed {
                for spec in &mut plan.jobs {
                    spec.seed = seed;
                }
            }
            plan.report_path = Some(report.clone());
            let result = run_experiment(&plan, &ExperimentOptions::default()).runtime()?;
            let (mean, max) = result.aggregates();
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            println!(
                "experiment: {} jobs, mean_pct_diff={} max_pct_diff={}, report {}",
                result.rows.len(),
                fmt(mean),
                fmt(max),
                report.display()
            );
            Ok(())
        }
        Command::Compose { services, listen, watch, sweep_dir, archive, duration_s } => {
            let mut config = node_config(cli.config.as_deref())?;
            if let Some(s) = services {
                config.services = s.parse::<ServiceSet>().validation()?;
            }
            if !listen.is_empty() {
                config.listen = parse_addrs(&listen)?;
            }
            if !watch.is_empty() {
                config.watch = parse_watch(&watch)?;
            }
            if let Some(dir) = sweep_dir {
                config.sweep_dir = dir;
            }
            if archive.is_some() {
                config.archive_path = archive;
            }
            run_node(&config, duration_s)
        }
    }
}

fn run_node(config: &NodeConfig, duration_s: Option<f64>) -> Result<(), Failure> {
    config.validate().validation()?;
    let node = compose(config).runtime()?;
    for addr in node.listen_addrs() {
        eprintln!("listening on {addr}");
    }
    wait_for_stop(duration_s)?;
    let summary = node.shutdown().runtime()?;
    for (addr, s) in config.listen.iter().zip(&summary.aggregators) {
        eprintln!(
            "aggregate {addr}: datagrams={} archived={} decode_errors={} insert_errors={} queue_dropped={}",
            s.datagrams, s.samples_archived, s.decode_errors, s.insert_errors, s.queue_dropped
        );
    }
    if summary.swept_records > 0 || summary.sweep_errors > 0 {
        eprintln!("sweep: records={} errors={}", summary.swept_records, summary.sweep_errors);
    }
    Ok(())
}
