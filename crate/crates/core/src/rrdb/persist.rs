//! Flat binary archive files. The layout is described in
//! `docs/ARCHIVE_FORMAT.md`; all integers are little-endian.

use std::fs;
use std::path::Path;

use super::{Consolidation, RoundRobinArchive, RrdError, Series, SeriesKey, Slot, WheelLayout, WheelSpec};

pub const ARCHIVE_MAGIC: [u8; 8] = *b"LFRRDB\0\0";
pub const ARCHIVE_VERSION: u32 = 1;
const NO_HIGH_WATER: u64 = u64::MAX;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RrdError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| RrdError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, RrdError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, RrdError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, RrdError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64, RrdError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, RrdError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, RrdError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| RrdError::Format("invalid utf-8".to_string()))
    }
}

pub fn encode_archive(archive: &RoundRobinArchive) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(archive.byte_size() + 1024));
    w.0.extend_from_slice(&ARCHIVE_MAGIC);
    w.u32(ARCHIVE_VERSION);
    w.u32(0);
    let wheels = archive.layout().wheels();
    w.u32(wheels.len() as u32);
    for spec in wheels {
        w.u64(spec.step_ms);
        w.u64(spec.capacity as u64);
        w.u8(spec.consolidation.code());
    }
    w.u32(archive.metrics().len() as u32);
    for m in archive.metrics() {
        w.str(m);
    }
    w.u32(archive.series_per_metric() as u32);
    let series = archive.series_internal();
    w.u32(series.len() as u32);
    for s in series {
        w.str(&s.metric);
        match &s.key {
            Some(key) => {
                w.u8(1);
                w.str(&key.host);
                w.u8(key.pid.is_some() as u8);
                w.u32(key.pid.unwrap_or(0));
                w.str(&s.units);
            }
            None => w.u8(0),
        }
        w.u64(s.high_water_ms.unwrap_or(NO_HIGH_WATER));
        for wheel in &s.wheels {
            for slot in wheel {
                w.i64(slot.period);
                w.u32(slot.count);
                w.f64(slot.sum);
                w.f64(slot.max);
                w.f64(slot.last);
                w.u64(slot.last_ts);
            }
        }
    }
    w.0
}

pub fn decode_archive(bytes: &[u8]) -> Result<RoundRobinArchive, RrdError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != ARCHIVE_MAGIC {
        return Err(RrdError::Format("bad magic".to_string()));
    }
    let version = r.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(RrdError::Format(format!("unsupported version {version}")));
    }
    r.u32()?;
    let n_wheels = r.u32()? as usize;
    let mut specs = Vec::with_capacity(n_wheels.min(64));
    for _ in 0..n_wheels {
        let step_ms = r.u64()?;
        let capacity = r.u64()? as usize;
        let code = r.u8()?;
        let consolidation =
            Consolidation::from_code(code).ok_or_else(|| RrdError::Format(format!("bad consolidation {code}")))?;
        specs.push(WheelSpec { step_ms, capacity, consolidation });
    }
    let layout = WheelLayout::new(specs)?;
    let n_metrics = r.u32()? as usize;
    let metrics = (0..n_metrics).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
    let series_per_metric = r.u32()? as usize;
    let n_series = r.u32()? as usize;
    if n_series != metrics.len() * series_per_metric {
        return Err(RrdError::Format("series count does not match metrics".to_string()));
    }
    let mut series = Vec::with_capacity(n_series);
    for _ in 0..n_series {
        let metric = r.str()?;
        let (key, units) = match r.u8()? {
            0 => (None, String::new()),
            1 => {
                let host = r.str()?;
                let has_pid = r.u8()? == 1;
                let pid = r.u32()?;
                let units = r.str()?;
                (Some(SeriesKey::new(&metric, &host, has_pid.then_some(pid))), units)
            }
            b => return Err(RrdError::Format(format!("bad binding flag {b}"))),
        };
        let hw = r.u64()?;
        let mut wheels = Vec::with_capacity(layout.wheels().len());
        for spec in layout.wheels() {
            let mut slots = Vec::with_capacity(spec.capacity);
            for _ in 0..spec.capacity {
                slots.push(Slot {
                    period: r.i64()?,
                    count: r.u32()?,
                    sum: r.f64()?,
                    max: r.f64()?,
                    last: r.f64()?,
                    last_ts: r.u64()?,
                });
            }
            wheels.push(slots);
        }
        series.push(Series { metric, key, units, high_water_ms: (hw != NO_HIGH_WATER).then_some(hw), wheels });
    }
    if r.pos != bytes.len() {
        return Err(RrdError::Format("trailing bytes".to_string()));
    }
    Ok(RoundRobinArchive::from_parts(layout, metrics, series_per_metric, series))
}

pub fn save_archive(archive: &RoundRobinArchive, path: &Path) -> Result<(), RrdError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_archive(archive))
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| RrdError::Format(format!("{}: {e}", path.display())))
}

pub fn load_archive(path: &Path) -> Result<RoundRobinArchive, RrdError> {
    let bytes = fs::read(path).map_err(|e| RrdError::Format(format!("{}: {e}", path.display())))?;
    decode_archive(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::MetricSample;

    #[test]
    fn file_round_trip_preserves_queries() {
        let layout = WheelLayout::new(vec![
            WheelSpec { step_ms: 100, capacity: 40, consolidation: Consolidation::Average },
            WheelSpec { step_ms: 1000, capacity: 8, consolidation: Consolidation::Max },
        ])
        .unwrap();
        let mut a = RoundRobinArchive::with_series(layout, &["cpu", "mem"], 2);
        for i in 0..55u64 {
            a.insert(&MetricSample::num("n", Some(3), "cpu", (i % 7) as f64, "frac", i * 100)).unwrap();
            a.insert(&MetricSample::num("n", None, "mem", i as f64, "MiB", i * 100)).unwrap();
        }
        let bytes = encode_archive(&a);
        assert_eq!(&bytes[..8], b"LFRRDB\0\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let b = decode_archive(&bytes).unwrap();
        assert_eq!(b.series_keys(), a.series_keys());
        assert_eq!(b.byte_size(), a.byte_size());
        for key in a.series_keys() {
            for res in [100, 1000] {
                assert_eq!(a.query(&key, 0, 6000, res).unwrap(), b.query(&key, 0, 6000, res).unwrap());
            }
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let a = RoundRobinArchive::create(WheelLayout::default(), &["m"]);
        let bytes = encode_archive(&a);
        assert!(decode_archive(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_archive(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(decode_archive(&v2).is_err());
    }
}
