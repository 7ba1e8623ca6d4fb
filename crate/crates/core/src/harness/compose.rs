use std::collections::BTreeSet;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{archived_metrics, key_values, HarnessError};
use crate::monitor::{
    node_name, run_sampler, MetricRegistry, MetricSample, Monitor, ProcSource, SamplerConfig, SamplerHandle,
    SamplerStats, SinkError, WatchSelector,
};
use crate::rrdb::{
    save_archive, shared, Consolidation, RoundRobinArchive, SharedArchive, SweepBound, Sweeper, WheelLayout,
};
use crate::wire::{
    Aggregator, AggregatorStats, ListenerConfig, Publisher, PublisherHealth, Transport, WindowConsolidator,
    DEFAULT_PORT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Service {
    Mon,
    Aggregate,
    Sweep,
}

impl FromStr for Service {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "mon" => Ok(Service::Mon),
            "aggregate" => Ok(Service::Aggregate),
            "sweep" => Ok(Service::Sweep),
            other => Err(HarnessError::Config(format!("unknown service '{other}'"))),
        }
    }
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Service::Mon => "mon",
            Service::Aggregate => "aggregate",
            Service::Sweep => "sweep",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSet(pub BTreeSet<Service>);

impl ServiceSet {
    pub fn all() -> Self {
        ServiceSet([Service::Mon, Service::Aggregate, Service::Sweep].into_iter().collect())
    }

    pub fn has(&self, s: Service) -> bool {
        self.0.contains(&s)
    }
}

impl FromStr for ServiceSet {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let set = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_, _>>()?;
        Ok(ServiceSet(set))
    }
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub node: String,
    pub services: ServiceSet,
    /// Aggregator listening sockets; all feed the same archive.
    pub listen: Vec<SocketAddr>,
    pub multicast_group: Option<Ipv4Addr>,
    /// Where the monitor publishes; defaults to the first listener on loopback.
    pub publish: Option<Transport>,
    pub sample_interval: Duration,
    pub publish_cadence: Duration,
    pub watch: Vec<WatchSelector>,
    pub include_host: bool,
    pub layout: WheelLayout,
    pub series_per_metric: usize,
    pub sweep_dir: PathBuf,
    pub sweep_interval: Duration,
    /// Archive saved here on shutdown.
    pub archive_path: Option<PathBuf>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            node: node_name(),
            services: ServiceSet::all(),
            listen: vec![(Ipv4Addr::UNSPECIFIED, DEFAULT_PORT).into()],
            multicast_group: None,
            publish: None,
            sample_interval: Duration::from_millis(100),
            publish_cadence: Duration::from_secs(1),
            watch: Vec::new(),
            include_host: true,
            layout: WheelLayout::default(),
            series_per_metric: 64,
            sweep_dir: PathBuf::from("sweeps"),
            sweep_interval: Duration::from_secs(30),
            archive_path: None,
        }
    }
}

fn parse_secs(v: &str) -> Result<Duration, String> {
    v.parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
        .ok_or_else(|| format!("'{v}' is not a number of seconds"))
}

/// Parses `<step_s>x<slots>[:<cf>]` entries separated by commas.
fn parse_wheels(v: &str) -> Result<WheelLayout, String> {
    let mut wheels = Vec::new();
    for part in v.split(',') {
        let (dims, cf) = part.trim().split_once(':').unwrap_or((part.trim(), "average"));
        let (step, slots) = dims.split_once('x').ok_or_else(|| format!("wheel '{part}' is not <step_s>x<slots>"))?;
        let step: f64 = step.parse().map_err(|_| format!("bad wheel step '{step}'"))?;
        let slots: usize = slots.parse().map_err(|_| format!("bad wheel size '{slots}'"))?;
        let cf: Consolidation = cf.parse().map_err(|_| format!("bad consolidation '{cf}'"))?;
        wheels.push((step, slots, cf));
    }
    WheelLayout::from_seconds(&wheels).map_err(|e| e.to_string())
}

impl NodeConfig {
    /// Reads `key = value` lines over the defaults. `listen` may repeat.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut c = NodeConfig::default();
        let mut listen = Vec::new();
        for (line, key, value) in key_values(text)? {
            let err = |m: String| HarnessError::Config(format!("line {line}: {key}: {m}"));
            match key.as_str() {
                "node" => c.node = value,
                "services" => c.services = value.parse()?,
                "listen" => listen.push(value.parse().map_err(|_| err(format!("bad address '{value}'")))?),
                "multicast_group" => {
                    c.multicast_group = Some(value.parse().map_err(|_| err(format!("bad group '{value}'")))?)
                }
                "publish" => c.publish = Some(value.parse().map_err(|e: crate::wire::WireError| err(e.to_string()))?),
                "sample_interval_s" => c.sample_interval = parse_secs(&value).map_err(err)?,
                "publish_cadence_s" => c.publish_cadence = parse_secs(&value).map_err(err)?,
                "watch" => {
                    c.watch = value
                        .split(',')
                        .filter(|w| !w.trim().is_empty())
                        .map(|w| w.trim().parse())
                        .collect::<Result<_, _>>()?
                }
                "include_host" => {
                    c.include_host = value.parse().map_err(|_| err(format!("'{value}' is not a bool")))?
                }
                "wheels" => c.layout = parse_wheels(&value).map_err(err)?,
                "series_per_metric" => {
                    c.series_per_metric = value.parse().map_err(|_| err(format!("'{value}' is not a count")))?
                }
                "sweep_dir" => c.sweep_dir = PathBuf::from(value),
                "sweep_interval_s" => c.sweep_interval = parse_secs(&value).map_err(err)?,
                "archive_path" => c.archive_path = Some(PathBuf::from(value)),
                _ => return Err(err("unknown key".to_string())),
            }
        }
        if !listen.is_empty() {
            c.listen = listen;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| Err(HarnessError::Config(m));
        if self.services.0.is_empty() {
            return cfg("no services selected".to_string());
        }
        if self.services.has(Service::Aggregate) {
            if self.listen.is_empty() {
                return cfg("aggregate needs at least one listen address".to_string());
            }
            let mut ports = BTreeSet::new();
            for a in &self.listen {
                if a.port() != 0 && !ports.insert(a.port()) {
                    return cfg(format!("port {} is configured twice", a.port()));
                }
            }
        }
        if self.services.has(Service::Sweep) && !self.services.has(Service::Aggregate) {
            return cfg("sweep needs the aggregate service in the same node".to_string());
        }
        if self.services.has(Service::Mon) && self.publish.is_none() && !self.services.has(Service::Aggregate) {
            return cfg("mon needs a publish transport when aggregate is not local".to_string());
        }
        if self.series_per_metric == 0 {
            return cfg("series_per_metric must be positive".to_string());
        }
        WindowConsolidator::new(self.publish_cadence)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct NodeSummary {
    pub sampler: Option<SamplerStats>,
    pub publisher: Option<PublisherHealth>,
    pub aggregators: Vec<AggregatorStats>,
    pub swept_records: usize,
    pub sweep_errors: usize,
}

struct SweepWorker {
    stop: mpsc::Sender<()>,
    join: JoinHandle<(usize, usize)>,
}

/// A running set of services sharing one configuration.
pub struct Node {
    archive: Option<SharedArchive>,
    aggregators: Vec<Aggregator>,
    sampler: Option<SamplerHandle>,
    mon_state: Option<Arc<Mutex<(WindowConsolidator, Publisher)>>>,
    sweeper: Option<SweepWorker>,
    archive_path: Option<PathBuf>,
}

/// Starts the selected services. Every listening socket is bound before
/// any service starts, so a port conflict leaves nothing running.
pub fn compose(config: &NodeConfig) -> Result<Node, HarnessError> {
    config.validate()?;
    let mut node = Node {
        archive: None,
        aggregators: Vec::new(),
        sampler: None,
        mon_state: None,
        sweeper: None,
        archive_path: None,
    };
    let registry = MetricRegistry::standard();

    if config.services.has(Service::Aggregate) {
        let metrics = archived_metrics(&registry);
        let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
        let archive = shared(RoundRobinArchive::with_series(config.layout.clone(), &names, config.series_per_metric));
        for addr in &config.listen {
            let listener = ListenerConfig { multicast_group: config.multicast_group, ..ListenerConfig::new(*addr) };
            node.aggregators.push(Aggregator::start(&listener, archive.clone())?);
        }
        node.archive = Some(archive);
        node.archive_path = config.archive_path.clone();
    }

    if config.services.has(Service::Sweep) {
        let archive = node.archive.clone().expect("validated: sweep implies aggregate");
        let mut sweeper =
            Sweeper::open(&config.sweep_dir, archived_metrics(&registry), config.sweep_interval, &config.layout)?;
        let (stop, rx) = mpsc::channel::<()>();
        let interval = config.sweep_interval.max(Duration::from_millis(10));
        let join = std::thread::Builder::new().name("sweep".to_string()).spawn(move || {
            let (mut records, mut errors) = (0, 0);
            let mut run = |bound: SweepBound| {
                let a = archive.read().expect("archive lock");
                match sweeper.sweep(&a, bound) {
                    Ok(n) => records += n,
                    Err(e) => {
                        log::warn!("sweep failed, marks unchanged: {e}");
                        errors += 1;
                    }
                }
            };
            while let Err(RecvTimeoutError::Timeout) = rx.recv_timeout(interval) {
                run(SweepBound::Closed);
            }
            // Final pass covers every stored slot, open or not.
            run(SweepBound::All);
            (records, errors)
        })?;
        node.sweeper = Some(SweepWorker { stop, join });
    }

    if config.services.has(Service::Mon) {
        let transport = match config.publish {
            Some(t) => t,
            None => {
                let port = node.aggregators.first().map_or(DEFAULT_PORT, |a| a.local_addr().port());
                Transport::Unicast((Ipv4Addr::LOCALHOST, port).into())
            }
        };
        let publisher = Publisher::new(&config.node, transport)?;
        let consolidator = WindowConsolidator::new(config.publish_cadence)?;
        let state = Arc::new(Mutex::new((consolidator, publisher)));
        let sink_state = state.clone();
        let sink = move |batch: &[MetricSample]| -> Result<(), SinkError> {
            let mut guard = sink_state.lock().map_err(|_| SinkError("publisher lock poisoned".to_string()))?;
            let (consolidator, publisher) = &mut *guard;
            let mut now = 0;
            for s in batch {
                now = now.max(s.timestamp_ms);
                consolidator.push(s.clone());
            }
            let ready = consolidator.take_ready(now);
            publisher.publish(ready).map(|_| ()).map_err(|e| SinkError(e.to_string()))
        };
        let sampler_config = SamplerConfig {
            interval: config.sample_interval,
            watch: config.watch.clone(),
            include_host: config.include_host,
            registry,
            ..SamplerConfig::default()
        };
        let monitor = Monitor::new(ProcSource::new(), config.node.clone());
        node.sampler = Some(run_sampler(sampler_config, monitor, sink)?);
        node.mon_state = Some(state);
    }
    Ok(node)
}

impl Node {
    pub fn archive(&self) -> Option<SharedArchive> {
        self.archive.clone()
    }

    pub fn listen_addrs(&self) -> Vec<SocketAddr> {
        self.aggregators.iter().map(Aggregator::local_addr).collect()
    }

    pub fn aggregator_stats(&self) -> Vec<AggregatorStats> {
        self.aggregators.iter().map(Aggregator::stats).collect()
    }

    pub fn aggregators(&self) -> &[Aggregator] {
        &self.aggregators
    }

    /// Stops the monitor (publishing what it holds), the aggregators, and
    /// finally the sweeper, which runs one last full sweep.
    pub fn shutdown(mut self) -> Result<NodeSummary, HarnessError> {
        let mut summary = NodeSummary::default();
        if let Some(sampler) = self.sampler.take() {
            summary.sampler = Some(sampler.stop());
        }
        if let Some(state) = self.mon_state.take() {
            let mut guard = state.lock().expect("publisher lock");
            let (consolidator, publisher) = &mut *guard;
            let rest = consolidator.flush();
            if let Err(e) = publisher.publish(rest) {
                log::warn!("final publish: {e}");
            }
            summary.publisher = Some(publisher.health().clone());
            if !self.aggregators.is_empty() {
                // Let loopback datagrams land before the listeners close.
                std::thread::sleep(Duration::from_millis(200));
            }
        }
        summary.aggregators = self.aggregators.drain(..).map(Aggregator::stop).collect();
        if let Some(worker) = self.sweeper.take() {
            let _ = worker.stop.send(());
            let (records, errors) =
                worker.join.join().map_err(|_| HarnessError::Config("sweep thread panicked".to_string()))?;
            summary.swept_records = records;
            summary.sweep_errors = errors;
        }
        if let (Some(path), Some(archive)) = (&self.archive_path, &self.archive) {
            save_archive(&archive.read().expect("archive lock"), path)?;
        }
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_port_is_a_startup_error() {
        let c = NodeConfig {
            listen: vec!["127.0.0.1:9100".parse().unwrap(), "0.0.0.0:9100".parse().unwrap()],
            ..NodeConfig::default()
        };
        assert!(matches!(compose(&c), Err(HarnessError::Config(_))));
        let text = "services = aggregate\nlisten = 127.0.0.1:9100\nlisten = 127.0.0.1:9100\n";
        assert!(NodeConfig::parse(text).is_err());
    }

    #[test]
    fn port_in_use_starts_nothing() {
        let taken = std::net::UdpSocket::bind("127.0.0.1:0").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let c = NodeConfig {
            listen: vec!["127.0.0.1:0".parse().unwrap(), taken.local_addr().unwrap()],
            sweep_dir: dir.path().join("sw"),
            ..NodeConfig::default()
        };
        assert!(matches!(compose(&c), Err(HarnessError::Wire(_))));
        assert!(!dir.path().join("sw").exists());
    }

    #[test]
    fn config_file_round() {
        let text = "node = n1\nservices = aggregate, sweep\nlisten = 127.0.0.1:0\nwheels = 0.1x600, 1x3600:max\n\
                    sweep_interval_s = 5\npublish_cadence_s = 2\nwatch = tag:loadforge, pid:1\n";
        let c = NodeConfig::parse(text).unwrap();
        assert_eq!(c.node, "n1");
        assert!(!c.services.has(Service::Mon));
        assert_eq!(c.layout.steps_ms(), vec![100, 1000]);
        assert_eq!(c.publish_cadence, Duration::from_secs(2));
        assert_eq!(c.watch.len(), 2);
        assert!(NodeConfig::parse("publish_cadence_s = 9\n").is_err());
        assert!(NodeConfig::parse("services = sweep\n").is_err());
        assert!(NodeConfig::parse("colour = blue\n").is_err());
    }

    #[test]
    fn shutdown_runs_final_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let c = NodeConfig {
            services: "aggregate,sweep".parse().unwrap(),
            listen: vec!["127.0.0.1:0".parse().unwrap()],
            sweep_dir: dir.path().to_path_buf(),
            sweep_interval: Duration::from_secs(30),
            archive_path: Some(dir.path().join("node.rrd")),
            ..NodeConfig::default()
        };
        let node = compose(&c).unwrap();
        let addr = node.listen_addrs()[0];
        let mut p = Publisher::new("peer", Transport::Unicast(addr)).unwrap();
        let now = crate::loadgen::epoch_ms();
        p.publish(vec![MetricSample::num("peer", None, "load1", 0.5, "load", now)]).unwrap();
        std::thread::sleep(Duration::from_millis(300));
        let summary = node.shutdown().unwrap();
        assert_eq!(summary.aggregators[0].samples_archived, 1);
        assert_eq!(summary.swept_records, 1);
        assert!(dir.path().join("node.rrd").exists());
    }
}
