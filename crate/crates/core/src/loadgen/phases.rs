use std::hint::black_box;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::thread;
use std::time::{Duration, Instant};

use rand::RngCore;

use super::table::State;
use crate::rng::unit_f64;

/// Parameters a phase was started with. Equal seeds give equal plans.
#[derive(Debug, Clone, PartialEq)]
pub enum PlannedParams {
    Net { duration_s: f64, inter_packet_delay_ms: f64, packet_size: usize, sink: String },
    Mem { footprint_mib: f64 },
    Cpu { duration_s: f64, util_factor: f64 },
}

impl PlannedParams {
    /// Wall time the phase is expected to take.
    pub fn planned_seconds(&self) -> f64 {
        match self {
            PlannedParams::Net { duration_s, .. } | PlannedParams::Cpu { duration_s, .. } => *duration_s,
            PlannedParams::Mem { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhaseDetail {
    Net(NetworkPhase),
    Mem { resident_bytes: usize },
    Cpu(CpuPhase),
}

#[derive(Debug, Clone)]
pub struct PhaseEntry {
    pub state: State,
    pub planned: PlannedParams,
    /// Wall clock start, milliseconds since the Unix epoch.
    pub started_ms: u64,
    pub wall: Duration,
    pub detail: Option<PhaseDetail>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuPhase {
    pub quanta: u64,
    pub busy_quanta: u64,
    pub quantum: Duration,
    pub wall: Duration,
}

impl CpuPhase {
    pub fn busy_fraction(&self) -> f64 {
        if self.quanta == 0 {
            0.0
        } else {
            self.busy_quanta as f64 / self.quanta as f64
        }
    }
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        thread::sleep(deadline - now);
    }
}

fn spin_until(deadline: Instant) {
    let mut x = 0x2545_F491_4F6C_DD1Du64;
    while Instant::now() < deadline {
        for _ in 0..256 {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
        }
        x = black_box(x);
    }
}

/// Runs a duty-cycled CPU phase.
///
/// The phase is cut into quanta of at most `quantum` (shrunk so there are at
/// least ten). Each quantum is spent spinning with probability
/// `util_factor`, otherwise sleeping. Quantum boundaries are absolute
/// deadlines from the phase start, so the phase never ends early and
/// overshoots by at most the lateness of the final wake-up. Exactly one
/// draw is taken from `rng` per quantum.
pub fn run_cpu_phase<R: RngCore + ?Sized>(
    duration: Duration,
    util_factor: f64,
    quantum: Duration,
    rng: &mut R,
) -> CpuPhase {
    let start = Instant::now();
    if duration.is_zero() {
        return CpuPhase { quanta: 0, busy_quanta: 0, quantum, wall: start.elapsed() };
    }
    let quantum = quantum.min(duration / 10).max(Duration::from_micros(100));
    let quanta = duration.as_nanos().div_ceil(quantum.as_nanos()) as u64;
    let mut busy_quanta = 0;
    for i in 0..quanta {
        let deadline = start + (quantum * (i + 1) as u32).min(duration);
        if unit_f64(rng) < util_factor {
            busy_quanta += 1;
            spin_until(deadline);
        } else {
            sleep_until(deadline);
        }
    }
    CpuPhase { quanta, busy_quanta, quantum, wall: start.elapsed() }
}

/// Resident memory held by a job until it finishes.
#[derive(Debug, Default)]
pub struct MemoryBlock {
    bytes: Vec<u8>,
}

impl MemoryBlock {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Writes one byte per page so the block stays resident.
    pub fn touch(&mut self) {
        for b in self.bytes.iter_mut().step_by(4096) {
            *b = b.wrapping_add(1);
        }
        black_box(&self.bytes);
    }
}

pub fn mib_to_bytes(mib: f64) -> usize {
    (mib * (1u64 << 20) as f64).round() as usize
}

/// Allocates `footprint_mib` MiB and writes every byte so the pages are
/// resident rather than lazily mapped. A zero footprint allocates nothing.
pub fn run_memory_phase(footprint_mib: f64) -> Result<MemoryBlock, String> {
    let len = mib_to_bytes(footprint_mib);
    if len == 0 {
        return Ok(MemoryBlock::default());
    }
    let mut bytes = Vec::new();
    bytes.try_reserve_exact(len).map_err(|e| format!("allocating {footprint_mib} MiB failed: {e}"))?;
    bytes.resize(len, 0xA5);
    Ok(MemoryBlock { bytes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPhase {
    pub packets_sent: u64,
    pub send_errors: u64,
    /// `packet_size / inter_packet_delay` in bytes per second; `None` when
    /// the delay is zero and sending is unpaced.
    pub bandwidth_bps: Option<f64>,
    pub wall: Duration,
}

fn resolve(sink: &str) -> Result<SocketAddr, String> {
    sink.to_socket_addrs()
        .map_err(|e| format!("cannot resolve sink '{sink}': {e}"))?
        .next()
        .ok_or_else(|| format!("sink '{sink}' resolved to no address"))
}

/// Sends `packet_size`-byte datagrams to `sink`, one per
/// `inter_packet_delay`, for `duration`.
///
/// Sends happen at absolute offsets `k * delay` from the start, so a
/// 10 ms delay over one second yields 100 packets. When every send fails
/// the phase still returns its counts with an error message.
pub fn run_network_phase(
    duration: Duration,
    inter_packet_delay: Duration,
    sink: &str,
    packet_size: usize,
) -> (NetworkPhase, Option<String>) {
    let start = Instant::now();
    let bandwidth_bps = (!inter_packet_delay.is_zero()).then(|| packet_size as f64 / inter_packet_delay.as_secs_f64());
    let mut report = NetworkPhase { packets_sent: 0, send_errors: 0, bandwidth_bps, wall: Duration::ZERO };
    if duration.is_zero() {
        report.wall = start.elapsed();
        return (report, None);
    }
    let deadline = start + duration;
    let socket = resolve(sink).and_then(|addr| {
        let bind = if addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
        let socket = UdpSocket::bind(bind).map_err(|e| format!("bind failed: {e}"))?;
        Ok((socket, addr))
    });
    let (socket, addr) = match socket {
        Ok(pair) => pair,
        Err(msg) => {
            report.wall = start.elapsed();
            return (report, Some(msg));
        }
    };
    let payload = vec![0x5Au8; packet_size];
    let mut last_error = None;
    let mut k: u32 = 0;
    loop {
        let send_at = start + inter_packet_delay * k;
        if send_at >= deadline {
            break;
        }
        sleep_until(send_at);
        match socket.send_to(&payload, addr) {
            Ok(_) => report.packets_sent += 1,
            Err(e) => {
                report.send_errors += 1;
                last_error = Some(e.to_string());
            }
        }
        k += 1;
    }
    sleep_until(deadline);
    report.wall = start.elapsed();
    let error =
        (report.packets_sent == 0).then(|| format!("no packets reached {sink}: {}", last_error.unwrap_or_default()));
    (report, error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_duration_cpu_returns_immediately() {
        let p = run_cpu_phase(Duration::ZERO, 1.0, Duration::from_millis(100), &mut seeded(1));
        assert_eq!(p.quanta, 0);
        assert!(p.wall < Duration::from_millis(5));
    }

    #[test]
    fn cpu_wall_time_within_one_quantum() {
        let q = Duration::from_millis(20);
        let d = Duration::from_millis(400);
        let p = run_cpu_phase(d, 0.5, q, &mut seeded(9));
        assert_eq!(p.quanta, 20);
        assert!(p.wall >= d);
        assert!(p.wall <= d + q, "{:?}", p.wall);
    }

    #[test]
    fn cpu_boundaries_are_all_busy_or_all_idle() {
        let d = Duration::from_millis(200);
        let q = Duration::from_millis(10);
        assert_eq!(run_cpu_phase(d, 1.0, q, &mut seeded(2)).busy_fraction(), 1.0);
        assert_eq!(run_cpu_phase(d, 0.0, q, &mut seeded(2)).busy_fraction(), 0.0);
    }

    #[test]
    fn short_phase_gets_ten_quanta() {
        let p = run_cpu_phase(Duration::from_millis(50), 0.0, Duration::from_millis(100), &mut seeded(0));
        assert_eq!(p.quanta, 10);
        assert_eq!(p.quantum, Duration::from_millis(5));
    }

    #[test]
    fn zero_footprint_allocates_nothing() {
        assert!(run_memory_phase(0.0).unwrap().is_empty());
    }

    #[test]
    fn footprint_is_mebibytes() {
        assert_eq!(run_memory_phase(2.0).unwrap().len(), 2 * 1024 * 1024);
    }

    #[test]
    fn zero_duration_network_sends_nothing() {
        let (p, err) = run_network_phase(Duration::ZERO, Duration::from_millis(1), "127.0.0.1:9", 1024);
        assert_eq!(p.packets_sent, 0);
        assert!(err.is_none());
    }

    #[test]
    fn bandwidth_is_size_over_delay() {
        let (p, _) = run_network_phase(Duration::ZERO, Duration::from_millis(1), "127.0.0.1:9", 1024);
        assert_eq!(p.bandwidth_bps, Some(1_024_000.0));
    }

    #[test]
    fn unresolvable_sink_is_an_error() {
        let (p, err) =
            run_network_phase(Duration::from_millis(50), Duration::from_millis(1), "no.such.host.invalid:1", 64);
        assert_eq!(p.packets_sent, 0);
        assert!(err.is_some());
    }
}
