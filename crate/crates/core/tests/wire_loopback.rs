use std::net::UdpSocket;
use std::time::{Duration, Instant};

use loadforge::monitor::MetricSample;
use loadforge::rrdb::{shared, RoundRobinArchive, SeriesKey, WheelLayout};
use loadforge::wire::{decode, Aggregator, ListenerConfig, Publisher, Transport};

fn now_ms() -> u64 {
    loadforge::loadgen::epoch_ms()
}

#[test]
fn loopback_unicast_arrives_within_100ms() {
    let archive = shared(RoundRobinArchive::with_series(WheelLayout::default(), &["cpu_frac"], 8));
    let agg = Aggregator::start(&ListenerConfig::new("127.0.0.1:0".parse().unwrap()), archive.clone()).unwrap();
    let mut p = Publisher::new("pub", Transport::Unicast(agg.local_addr())).unwrap();
    let ts = now_ms();
    let sent = Instant::now();
    p.publish(vec![MetricSample::num("pub", Some(3), "cpu_frac", 0.75, "frac", ts)]).unwrap();
    let key = SeriesKey::new("cpu_frac", "pub", Some(3));
    loop {
        let hit = archive.read().unwrap().query(&key, ts / 100 * 100, ts, 100).unwrap().first().and_then(|p| p.1);
        if hit == Some(0.75) {
            break;
        }
        assert!(sent.elapsed() < Duration::from_millis(100), "not archived within 100 ms");
        std::thread::sleep(Duration::from_millis(2));
    }
    let stats = agg.stop();
    assert_eq!(stats.samples_archived, 1);
}

#[test]
fn consecutive_publishes_have_consecutive_sequence_numbers() {
    let rx = UdpSocket::bind("127.0.0.1:0").unwrap();
    rx.set_read_timeout(Some(Duration::from_secs(1))).unwrap();
    let mut p = Publisher::new("n", Transport::Unicast(rx.local_addr().unwrap())).unwrap();
    let s = MetricSample::num("n", None, "load1", 1.0, "load", 1);
    p.publish(vec![s.clone()]).unwrap();
    p.publish(vec![s]).unwrap();
    let mut buf = [0u8; 9000];
    let n = rx.recv(&mut buf).unwrap();
    let a = decode(&buf[..n]).unwrap().seq;
    let n = rx.recv(&mut buf).unwrap();
    let b = decode(&buf[..n]).unwrap().seq;
    assert_eq!(b, a + 1);
}

#[test]
fn broadcast_without_listener_does_not_disturb_publisher() {
    let mut p = Publisher::new("n", "broadcast:255.255.255.255:47999".parse().unwrap()).unwrap();
    for i in 0..5 {
        let seqs = p.publish(vec![MetricSample::num("n", None, "load1", 1.0, "load", i)]).unwrap();
        assert_eq!(seqs, vec![i]);
    }
    let h = p.health();
    assert_eq!(h.datagrams_sent + h.send_errors, 5);
}

#[test]
fn idle_aggregator_has_empty_archive_and_no_gaps() {
    let archive = shared(RoundRobinArchive::with_series(WheelLayout::default(), &["cpu_frac"], 8));
    let agg = Aggregator::start(&ListenerConfig::new("127.0.0.1:0".parse().unwrap()), archive.clone()).unwrap();
    std::thread::sleep(Duration::from_millis(150));
    assert!(agg.health().is_empty());
    let stats = agg.stop();
    assert_eq!(stats.datagrams, 0);
    assert!(archive.read().unwrap().series_keys().is_empty());
}

#[test]
fn garbage_datagrams_do_not_stop_the_listener() {
    let archive = shared(RoundRobinArchive::with_series(WheelLayout::default(), &["cpu_frac"], 8));
    let agg = Aggregator::start(&ListenerConfig::new("127.0.0.1:0".parse().unwrap()), archive).unwrap();
    let tx = UdpSocket::bind("127.0.0.1:0").unwrap();
    tx.send_to(b"<grm v=\"1\" node=\"x\"", agg.local_addr()).unwrap();
    tx.send_to(&[0xff; 64], agg.local_addr()).unwrap();
    let mut p = Publisher::new("ok", Transport::Unicast(agg.local_addr())).unwrap();
    p.publish(vec![MetricSample::num("ok", Some(1), "cpu_frac", 0.1, "frac", now_ms())]).unwrap();
    std::thread::sleep(Duration::from_millis(200));
    let stats = agg.stop();
    assert_eq!(stats.decode_errors, 2);
    assert_eq!(stats.samples_archived, 1);
}
