use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, UdpSocket};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};

use super::{decode, encode, pack, MetricDatagram, WireError, DEFAULT_PORT};
use crate::monitor::{MetricSample, MetricValue};
use crate::rrdb::{InsertOutcome, RoundRobinArchive, SharedArchive};

/// Largest number of individually tracked missing sequence numbers per sender.
const MISSING_TRACKED: usize = 4096;
const RECV_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Unicast(SocketAddr),
    Broadcast(SocketAddrV4),
    Multicast { group: Ipv4Addr, port: u16, ttl: u32 },
}

impl Transport {
    pub fn destination(&self) -> SocketAddr {
        match *self {
            Transport::Unicast(a) => a,
            Transport::Broadcast(a) => SocketAddr::V4(a),
            Transport::Multicast { group, port, .. } => SocketAddr::V4(SocketAddrV4::new(group, port)),
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::Unicast(a) => write!(f, "unicast:{a}"),
            Transport::Broadcast(a) => write!(f, "broadcast:{a}"),
            Transport::Multicast { group, port, ttl } => write!(f, "multicast:{group}:{port}/ttl={ttl}"),
        }
    }
}

/// Accepts `unicast:<addr:port>`, `broadcast[:<addr>[:port]]` and
/// `multicast:<group>[:port]`.
impl FromStr for Transport {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WireError::Config(format!("bad transport '{s}'"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let v4 = |rest: &str, default: Ipv4Addr| -> Result<SocketAddrV4, WireError> {
            if rest.is_empty() {
                return Ok(SocketAddrV4::new(default, DEFAULT_PORT));
            }
            if let Ok(a) = rest.parse::<SocketAddrV4>() {
                return Ok(a);
            }
            rest.parse::<Ipv4Addr>().map(|ip| SocketAddrV4::new(ip, DEFAULT_PORT)).map_err(|_| bad())
        };
        match kind {
            "unicast" => {
                if let Ok(a) = rest.parse::<SocketAddr>() {
                    return Ok(Transport::Unicast(a));
                }
                let ip: std::net::IpAddr = rest.parse().map_err(|_| bad())?;
                Ok(Transport::Unicast(SocketAddr::new(ip, DEFAULT_PORT)))
            }
            "broadcast" => Ok(Transport::Broadcast(v4(rest, Ipv4Addr::BROADCAST)?)),
            "multicast" => {
                let a = v4(rest, Ipv4Addr::new(239, 255, 87, 49))?;
                if !a.ip().is_multicast() {
                    return Err(WireError::Config(format!("{} is not a multicast group", a.ip())));
                }
                Ok(Transport::Multicast { group: *a.ip(), port: a.port(), ttl: 1 })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PublisherHealth {
    pub datagrams_sent: u64,
    pub send_errors: u64,
    pub last_error: Option<String>,
}

/// Fire-and-forget datagram sender.
pub struct Publisher {
    node: String,
    socket: UdpSocket,
    transport: Transport,
    next_seq: u64,
    health: PublisherHealth,
}

impl Publisher {
    pub fn new(node: &str, transport: Transport) -> Result<Self, WireError> {
        let bind: SocketAddr = match transport.destination() {
            SocketAddr::V4(_) => (Ipv4Addr::UNSPECIFIED, 0).into(),
            SocketAddr::V6(_) => (std::net::Ipv6Addr::UNSPECIFIED, 0).into(),
        };
        let socket = UdpSocket::bind(bind).map_err(|e| WireError::Socket(e.to_string()))?;
        match transport {
            Transport::Broadcast(_) => socket.set_broadcast(true),
            Transport::Multicast { ttl, .. } => socket.set_multicast_ttl_v4(ttl),
            Transport::Unicast(_) => Ok(()),
        }
        .map_err(|e| WireError::Socket(e.to_string()))?;
        Ok(Publisher { node: node.to_string(), socket, transport, next_seq: 0, health: PublisherHealth::default() })
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn health(&self) -> &PublisherHealth {
        &self.health
    }

    /// Packs samples into datagrams and sends each once. Returns the
    /// sequence numbers used; a send failure is counted, not returned.
    pub fn publish(&mut self, samples: Vec<MetricSample>) -> Result<Vec<u64>, WireError> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let datagrams = pack(&self.node, self.next_seq, samples)?;
        let mut seqs = Vec::with_capacity(datagrams.len());
        for d in &datagrams {
            let bytes = encode(d)?;
            seqs.push(d.seq);
            self.send_bytes(&bytes);
        }
        Ok(seqs)
    }

    /// Sends a prepared datagram as-is. The publisher's own counter moves
    /// past its sequence number.
    pub fn send(&mut self, d: &MetricDatagram) -> Result<(), WireError> {
        let bytes = encode(d)?;
        self.next_seq = self.next_seq.max(d.seq);
        self.send_bytes(&bytes);
        Ok(())
    }

    fn send_bytes(&mut self, bytes: &[u8]) {
        self.next_seq += 1;
        match self.socket.send_to(bytes, self.transport.destination()) {
            Ok(_) => self.health.datagrams_sent += 1,
            Err(e) => {
                debug!("send to {} failed: {e}", self.transport);
                self.health.send_errors += 1;
                self.health.last_error = Some(e.to_string());
            }
        }
    }
}

/// Per-sender sequence accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StreamHealth {
    /// Highest sequence number seen.
    pub last_seq: u64,
    /// Sequence numbers skipped and not yet recovered.
    pub gaps: u64,
    pub datagrams: u64,
    pub samples: u64,
    pub duplicates: u64,
    missing: BTreeSet<u64>,
}

impl StreamHealth {
    fn first(seq: u64) -> Self {
        StreamHealth { last_seq: seq, ..Default::default() }
    }

    /// Records a sequence number; false for a duplicate.
    fn observe(&mut self, seq: u64) -> bool {
        if seq > self.last_seq {
            let skipped = seq - self.last_seq - 1;
            self.gaps += skipped;
            let from = self.last_seq + 1 + skipped.saturating_sub(MISSING_TRACKED as u64);
            self.missing.extend(from..seq);
            while self.missing.len() > MISSING_TRACKED {
                self.missing.pop_first();
            }
            self.last_seq = seq;
            true
        } else if self.missing.remove(&seq) {
            self.gaps -= 1;
            true
        } else {
            self.duplicates += 1;
            false
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AggregatorStats {
    pub datagrams: u64,
    pub decode_errors: u64,
    pub duplicates: u64,
    pub samples_archived: u64,
    pub samples_too_old: u64,
    pub insert_errors: u64,
    pub queue_dropped: u64,
}

#[derive(Debug)]
pub enum IngestOutcome {
    Accepted(MetricDatagram),
    Duplicate,
    Rejected(WireError),
}

/// Decoding, sequence accounting and archive insertion without sockets.
#[derive(Debug, Default)]
pub struct Ingestor {
    streams: BTreeMap<String, StreamHealth>,
    statics: BTreeMap<(String, String), String>,
    stats: AggregatorStats,
}

impl Ingestor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Decodes and accounts for one datagram.
    pub fn accept(&mut self, bytes: &[u8]) -> IngestOutcome {
        let d = match decode(bytes) {
            Ok(d) => d,
            Err(e) => {
                self.stats.decode_errors += 1;
                return IngestOutcome::Rejected(e);
            }
        };
        self.stats.datagrams += 1;
        let fresh = match self.streams.get_mut(&d.node) {
            Some(h) => h.observe(d.seq),
            None => {
                self.streams.insert(d.node.clone(), StreamHealth::first(d.seq));
                true
            }
        };
        if !fresh {
            self.stats.duplicates += 1;
            return IngestOutcome::Duplicate;
        }
        let h = self.streams.get_mut(&d.node).expect("stream present");
        h.datagrams += 1;
        h.samples += d.samples.len() as u64;
        IngestOutcome::Accepted(d)
    }

    /// Inserts every numeric sample; text samples update the static table.
    pub fn archive(&mut self, d: &MetricDatagram, archive: &mut RoundRobinArchive) {
        for s in &d.samples {
            if let MetricValue::Text(t) = &s.value {
                self.statics.insert((s.host.clone(), s.metric.clone()), t.clone());
                continue;
            }
            match archive.insert(s) {
                Ok(InsertOutcome::Stored) => self.stats.samples_archived += 1,
                Ok(InsertOutcome::TooOld) => self.stats.samples_too_old += 1,
                Err(e) => {
                    debug!("insert {} failed: {e}", s.metric);
                    self.stats.insert_errors += 1;
                }
            }
        }
    }

    pub fn ingest(&mut self, bytes: &[u8], archive: &mut RoundRobinArchive) -> IngestOutcome {
        let outcome = self.accept(bytes);
        if let IngestOutcome::Accepted(d) = &outcome {
            self.archive(d, archive);
        }
        outcome
    }

    pub fn streams(&self) -> &BTreeMap<String, StreamHealth> {
        &self.streams
    }

    /// Latest text value per (host, metric).
    pub fn statics(&self) -> &BTreeMap<(String, String), String> {
        &self.statics
    }

    pub fn stats(&self) -> &AggregatorStats {
        &self.stats
    }

    pub fn total_gaps(&self) -> u64 {
        self.streams.values().map(|h| h.gaps).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ListenerConfig {
    pub bind: SocketAddr,
    pub multicast_group: Option<Ipv4Addr>,
    /// Decoded datagrams waiting for the archive writer.
    pub queue_cap: usize,
}

impl ListenerConfig {
    pub fn new(bind: SocketAddr) -> Self {
        ListenerConfig { bind, multicast_group: None, queue_cap: 1024 }
    }
}

impl Default for ListenerConfig {
    fn default() -> Self {
        Self::new((Ipv4Addr::UNSPECIFIED, DEFAULT_PORT).into())
    }
}

struct Queue {
    items: Mutex<VecDeque<MetricDatagram>>,
    ready: Condvar,
    cap: usize,
}

impl Queue {
    /// Returns true when the oldest entry had to be dropped.
    fn push(&self, d: MetricDatagram) -> bool {
        let mut items = self.items.lock().expect("queue lock");
        let dropped = if items.len() >= self.cap { items.pop_front().is_some() } else { false };
        items.push_back(d);
        self.ready.notify_one();
        dropped
    }

    fn pop(&self, stop: &AtomicBool) -> Option<MetricDatagram> {
        let mut items = self.items.lock().expect("queue lock");
        loop {
            if let Some(d) = items.pop_front() {
                return Some(d);
            }
            if stop.load(Ordering::SeqCst) {
                return None;
            }
            items = self.ready.wait_timeout(items, RECV_POLL).expect("queue lock").0;
        }
    }
}

/// Listener plus archive writer running on their own threads.
pub struct Aggregator {
    local_addr: SocketAddr,
    archive: SharedArchive,
    ingestor: Arc<Mutex<Ingestor>>,
    stop_listen: Arc<AtomicBool>,
    stop_write: Arc<AtomicBool>,
    queue: Arc<Queue>,
    threads: Vec<JoinHandle<()>>,
}

impl Aggregator {
    /// Binds the listening socket, then starts both threads. A bind
    /// failure returns before anything is spawned.
    pub fn start(config: &ListenerConfig, archive: SharedArchive) -> Result<Self, WireError> {
        if config.queue_cap == 0 {
            return Err(WireError::Config("queue capacity must be positive".to_string()));
        }
        let socket = UdpSocket::bind(config.bind)
            .map_err(|e| WireError::Socket(format!("cannot listen on {}: {e}", config.bind)))?;
        if let Some(group) = config.multicast_group {
            socket
                .join_multicast_v4(&group, &Ipv4Addr::UNSPECIFIED)
                .map_err(|e| WireError::Socket(format!("cannot join {group}: {e}")))?;
        }
        socket.set_read_timeout(Some(RECV_POLL)).map_err(|e| WireError::Socket(e.to_string()))?;
        let local_addr = socket.local_addr().map_err(|e| WireError::Socket(e.to_string()))?;

        let ingestor = Arc::new(Mutex::new(Ingestor::new()));
        let queue =
            Arc::new(Queue { items: Mutex::new(VecDeque::new()), ready: Condvar::new(), cap: config.queue_cap });
        let stop_listen = Arc::new(AtomicBool::new(false));
        let stop_write = Arc::new(AtomicBool::new(false));

        let listener = {
            let (ingestor, queue, stop) = (ingestor.clone(), queue.clone(), stop_listen.clone());
            std::thread::Builder::new()
                .name("aggregate-listen".to_string())
                .spawn(move || {
                    let mut buf = vec![0u8; 65_536];
                    while !stop.load(Ordering::SeqCst) {
                        let n = match socket.recv_from(&mut buf) {
                            Ok((n, _)) => n,
                            Err(e)
                                if matches!(
                                    e.kind(),
                                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                                ) =>
                            {
                                continue
                            }
                            Err(e) => {
                                warn!("receive failed: {e}");
                                std::thread::sleep(RECV_POLL);
                                continue;
                            }
                        };
                        let outcome = ingestor.lock().expect("ingestor lock").accept(&buf[..n]);
                        match outcome {
                            IngestOutcome::Accepted(d) => {
                                if queue.push(d) {
                                    ingestor.lock().expect("ingestor lock").stats.queue_dropped += 1;
                                }
                            }
                            IngestOutcome::Rejected(e) => debug!("dropped datagram: {e}"),
                            IngestOutcome::Duplicate => {}
                        }
                    }
                })
                .map_err(|e| WireError::Socket(e.to_string()))?
        };
        let writer = {
            let (ingestor, queue, stop, archive) =
                (ingestor.clone(), queue.clone(), stop_write.clone(), archive.clone());
            std::thread::Builder::new()
                .name("aggregate-write".to_string())
                .spawn(move || {
                    while let Some(d) = queue.pop(&stop) {
                        let mut archive = archive.write().expect("archive lock");
                        ingestor.lock().expect("ingestor lock").archive(&d, &mut archive);
                    }
                })
                .map_err(|e| WireError::Socket(e.to_string()))?
        };
        Ok(Aggregator {
            local_addr,
            archive,
            ingestor,
            stop_listen,
            stop_write,
            queue,
            threads: vec![listener, writer],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn archive(&self) -> SharedArchive {
        self.archive.clone()
    }

    pub fn health(&self) -> BTreeMap<String, StreamHealth> {
        self.ingestor.lock().expect("ingestor lock").streams().clone()
    }

    pub fn statics(&self) -> BTreeMap<(String, String), String> {
        self.ingestor.lock().expect("ingestor lock").statics().clone()
    }

    pub fn stats(&self) -> AggregatorStats {
        self.ingestor.lock().expect("ingestor lock").stats().clone()
    }

    /// Stops listening, drains queued datagrams into the archive and joins.
    pub fn stop(mut self) -> AggregatorStats {
        self.shutdown();
        self.stats()
    }

    fn shutdown(&mut self) {
        self.stop_listen.store(true, Ordering::SeqCst);
        if let Some(listener) = (!self.threads.is_empty()).then(|| self.threads.remove(0)) {
            let _ = listener.join();
        }
        self.stop_write.store(true, Ordering::SeqCst);
        self.queue.ready.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Aggregator {
    fn drop(&mut self) {
        self.shutdown();
    }
}
