use std::collections::BTreeMap;
use std::time::Duration;

use super::WireError;
use crate::monitor::{MetricSample, MetricValue, CPU_FRAC, CPU_TOTAL};

pub const MIN_WINDOW: Duration = Duration::from_secs(1);
pub const MAX_WINDOW: Duration = Duration::from_secs(5);

type Key = (String, String, Option<u32>, String);

#[derive(Debug)]
struct Open {
    window: u64,
    sum: f64,
    count: u64,
    last: MetricValue,
}

/// Folds raw samples into one sample per series per publish window.
///
/// Utilization metrics are averaged over the window; everything else
/// publishes its latest value. Output samples carry the window start.
#[derive(Debug)]
pub struct WindowConsolidator {
    window_ms: u64,
    open: BTreeMap<Key, Open>,
    ready: Vec<MetricSample>,
}

fn averaged(metric: &str) -> bool {
    metric == CPU_FRAC || metric == CPU_TOTAL
}

impl WindowConsolidator {
    pub fn new(window: Duration) -> Result<Self, WireError> {
        if window < MIN_WINDOW || window > MAX_WINDOW {
            return Err(WireError::Config(format!(
                "publish cadence must be between {}s and {}s, got {:?}",
                MIN_WINDOW.as_secs(),
                MAX_WINDOW.as_secs(),
                window
            )));
        }
        Ok(WindowConsolidator { window_ms: window.as_millis() as u64, open: BTreeMap::new(), ready: Vec::new() })
    }

    pub fn window_ms(&self) -> u64 {
        self.window_ms
    }

    pub fn push(&mut self, s: MetricSample) {
        let window = s.timestamp_ms / self.window_ms;
        let key = (s.metric.clone(), s.host.clone(), s.pid, s.units.clone());
        if let Some(o) = self.open.get(&key) {
            if o.window < window {
                let o = self.open.remove(&key).expect("present");
                self.ready.push(self.close(&key, o));
            } else if o.window > window {
                // Late sample for a window already replaced.
                return;
            }
        }
        let o = self.open.entry(key).or_insert(Open { window, sum: 0.0, count: 0, last: s.value.clone() });
        if let MetricValue::Num(v) = s.value {
            o.sum += v;
            o.count += 1;
        }
        o.last = s.value;
    }

    fn close(&self, key: &Key, o: Open) -> MetricSample {
        let value = match (&o.last, averaged(&key.0) && o.count > 0) {
            (MetricValue::Num(_), true) => MetricValue::Num(o.sum / o.count as f64),
            (last, _) => last.clone(),
        };
        MetricSample {
            metric: key.0.clone(),
            host: key.1.clone(),
            pid: key.2,
            units: key.3.clone(),
            value,
            timestamp_ms: o.window * self.window_ms,
        }
    }

    /// Returns every window that ended at or before `now_ms`.
    pub fn take_ready(&mut self, now_ms: u64) -> Vec<MetricSample> {
        let done: Vec<Key> = self
            .open
            .iter()
            .filter(|(_, o)| (o.window + 1) * self.window_ms <= now_ms)
            .map(|(k, _)| k.clone())
            .collect();
        for k in done {
            let o = self.open.remove(&k).expect("present");
            let s = self.close(&k, o);
            self.ready.push(s);
        }
        std::mem::take(&mut self.ready)
    }

    /// Closes every open window regardless of time.
    pub fn flush(&mut self) -> Vec<MetricSample> {
        self.take_ready(u64::MAX / 2)
    }
}
