//! XML metric datagrams.
//!
//! One document per UDP datagram, version 1, canonical form:
//!
//! ```text
//! <grm v="1" node="hostA" seq="42"><m name="cpu_frac" host="hostA" pid="1234" val="0.53" units="frac" ts="1715000000123"/></grm>
//! ```
//!
//! Attributes appear in exactly that order, `pid` is omitted for host
//! metrics, and numbers use the shortest representation that parses back
//! to the same value. Values whose units are `text` are carried verbatim.

mod consolidate;
mod transport;

use std::fmt::Write as _;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::monitor::{MetricSample, MetricValue, TEXT_UNITS};

pub use consolidate::WindowConsolidator;
pub use transport::{
    Aggregator, AggregatorStats, IngestOutcome, Ingestor, ListenerConfig, Publisher, PublisherHealth, StreamHealth,
    Transport,
};

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest encoded datagram.
pub const MAX_DATAGRAM_BYTES: usize = 8 * 1024;
pub const DEFAULT_PORT: u16 = 8749;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("datagram has no samples")]
    EmptyBatch,
    #[error("encoded datagram is {size} bytes, over the {limit} byte limit; split the batch")]
    SplitRequired { size: usize, limit: usize },
    #[error("field {field} cannot be encoded: {reason}")]
    Unencodable { field: &'static str, reason: String },
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("unknown protocol version '{0}'")]
    UnknownVersion(String),
    #[error("missing required attribute '{0}'")]
    MissingAttribute(&'static str),
    #[error("invalid value for '{attr}': '{value}'")]
    InvalidAttribute { attr: &'static str, value: String },
    #[error("socket: {0}")]
    Socket(String),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDatagram {
    pub version: u32,
    pub node: String,
    pub seq: u64,
    pub samples: Vec<MetricSample>,
}

impl MetricDatagram {
    pub fn new(node: &str, seq: u64, samples: Vec<MetricSample>) -> Self {
        MetricDatagram { version: PROTOCOL_VERSION, node: node.to_string(), seq, samples }
    }
}

fn push_attr(out: &mut String, field: &'static str, name: &str, value: &str) -> Result<(), WireError> {
    out.push(' ');
    out.push_str(name);
    out.push_str("=\"");
    for c in value.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\t' | '\n' | '\r' => {
                let _ = write!(out, "&#{};", c as u32);
            }
            c if c.is_control() => {
                return Err(WireError::Unencodable { field, reason: format!("control character U+{:04X}", c as u32) })
            }
            c => out.push(c),
        }
    }
    out.push('"');
    Ok(())
}

/// Serializes a datagram in canonical form.
pub fn encode(d: &MetricDatagram) -> Result<Vec<u8>, WireError> {
    if d.samples.is_empty() {
        return Err(WireError::EmptyBatch);
    }
    let mut out = String::with_capacity(64 + d.samples.len() * 110);
    out.push_str("<grm");
    push_attr(&mut out, "version", "v", &d.version.to_string())?;
    push_attr(&mut out, "node", "node", &d.node)?;
    push_attr(&mut out, "seq", "seq", &d.seq.to_string())?;
    out.push('>');
    for s in &d.samples {
        let val = match &s.value {
            MetricValue::Num(v) if v.is_finite() && s.units != TEXT_UNITS => v.to_string(),
            MetricValue::Text(t) if s.units == TEXT_UNITS => t.clone(),
            MetricValue::Num(v) => {
                return Err(WireError::Unencodable { field: "val", reason: format!("{v} with units '{}'", s.units) })
            }
            MetricValue::Text(_) => {
                return Err(WireError::Unencodable {
                    field: "val",
                    reason: format!("text value needs units '{TEXT_UNITS}'"),
                })
            }
        };
        out.push_str("<m");
        push_attr(&mut out, "name", "name", &s.metric)?;
        push_attr(&mut out, "host", "host", &s.host)?;
        if let Some(pid) = s.pid {
            push_attr(&mut out, "pid", "pid", &pid.to_string())?;
        }
        push_attr(&mut out, "val", "val", &val)?;
        push_attr(&mut out, "units", "units", &s.units)?;
        push_attr(&mut out, "ts", "ts", &s.timestamp_ms.to_string())?;
        out.push_str("/>");
    }
    out.push_str("</grm>");
    if out.len() > MAX_DATAGRAM_BYTES {
        return Err(WireError::SplitRequired { size: out.len(), limit: MAX_DATAGRAM_BYTES });
    }
    Ok(out.into_bytes())
}

/// Packs samples into as few datagrams as fit the size limit, numbered
/// from `first_seq`. A single sample that cannot fit is an error.
pub fn pack(node: &str, first_seq: u64, samples: Vec<MetricSample>) -> Result<Vec<MetricDatagram>, WireError> {
    let mut out = Vec::new();
    let mut current: Vec<MetricSample> = Vec::new();
    let mut size = 0usize;
    for s in samples {
        // Encoding alone with the widest sequence number bounds the wrapper.
        let one = encode(&MetricDatagram::new(node, u64::MAX, vec![s.clone()]))?;
        let start = one.windows(2).position(|w| w == b"<m").expect("sample element");
        let element = one.len() - start - "</grm>".len();
        if !current.is_empty() && size + element > MAX_DATAGRAM_BYTES {
            let seq = first_seq + out.len() as u64;
            out.push(MetricDatagram::new(node, seq, std::mem::take(&mut current)));
        }
        if current.is_empty() {
            size = one.len();
        } else {
            size += element;
        }
        current.push(s);
    }
    if !current.is_empty() {
        let seq = first_seq + out.len() as u64;
        out.push(MetricDatagram::new(node, seq, current));
    }
    Ok(out)
}

struct Attrs {
    pairs: Vec<(String, String)>,
}

impl Attrs {
    fn read(e: &BytesStart<'_>) -> Result<Self, WireError> {
        let mut pairs = Vec::new();
        for attr in e.attributes() {
            let attr = attr.map_err(|e| WireError::Malformed(e.to_string()))?;
            let key = String::from_utf8(attr.key.as_ref().to_vec())
                .map_err(|_| WireError::Malformed("non-utf-8 attribute name".to_string()))?;
            let value = attr.unescape_value().map_err(|e| WireError::Malformed(e.to_string()))?;
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(WireError::Malformed(format!("duplicate attribute '{key}'")));
            }
            pairs.push((key, value.into_owned()));
        }
        Ok(Attrs { pairs })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn required(&self, name: &'static str) -> Result<&str, WireError> {
        self.get(name).ok_or(WireError::MissingAttribute(name))
    }

    fn number<T: std::str::FromStr>(&self, name: &'static str) -> Result<T, WireError> {
        let raw = self.required(name)?;
        raw.parse().map_err(|_| WireError::InvalidAttribute { attr: name, value: raw.to_string() })
    }
}

fn read_sample(attrs: &Attrs) -> Result<MetricSample, WireError> {
    let units = attrs.required("units")?.to_string();
    let raw = attrs.required("val")?;
    let value = if units == TEXT_UNITS {
        MetricValue::Text(raw.to_string())
    } else {
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => MetricValue::Num(v),
            _ => return Err(WireError::InvalidAttribute { attr: "val", value: raw.to_string() }),
        }
    };
    let pid = match attrs.get("pid") {
        Some(_) => Some(attrs.number::<u32>("pid")?),
        None => None,
    };
    Ok(MetricSample {
        host: attrs.required("host")?.to_string(),
        pid,
        metric: attrs.required("name")?.to_string(),
        value,
        units,
        timestamp_ms: attrs.number("ts")?,
    })
}

/// Parses one datagram. Never panics; every failure is classified.
pub fn decode(bytes: &[u8]) -> Result<MetricDatagram, WireError> {
    let text = std::str::from_utf8(bytes).map_err(|_| WireError::Malformed("not utf-8".to_string()))?;
    let mut reader = Reader::from_str(text);
    let mut header: Option<(u32, String, u64)> = None;
    let mut samples = Vec::new();
    let mut closed = false;
    loop {
        let event = reader.read_event().map_err(|e| WireError::Malformed(e.to_string()))?;
        match event {
            Event::Eof => break,
            Event::Text(t) if t.iter().all(u8::is_ascii_whitespace) => {}
            _ if closed => return Err(WireError::Malformed("content after </grm>".to_string())),
            Event::Start(e) if header.is_none() => {
                if e.name().as_ref() != b"grm" {
                    return Err(WireError::Malformed("root element is not <grm>".to_string()));
                }
                let attrs = Attrs::read(&e)?;
                let v = attrs.required("v")?;
                if v != "1" {
                    return Err(WireError::UnknownVersion(v.to_string()));
                }
                header = Some((PROTOCOL_VERSION, attrs.required("node")?.to_string(), attrs.number("seq")?));
            }
            Event::Empty(e) if header.is_some() && e.name().as_ref() == b"m" => {
                samples.push(read_sample(&Attrs::read(&e)?)?);
            }
            Event::End(e) if header.is_some() && e.name().as_ref() == b"grm" => closed = true,
            Event::Empty(e) if header.is_none() && e.name().as_ref() == b"grm" => {
                return Err(WireError::Malformed("datagram has no samples".to_string()))
            }
            other => return Err(WireError::Malformed(format!("unexpected {other:?}"))),
        }
    }
    let (version, node, seq) = header.ok_or_else(|| WireError::Malformed("no <grm> element".to_string()))?;
    if !closed {
        return Err(WireError::Malformed("document is truncated".to_string()));
    }
    if samples.is_empty() {
        return Err(WireError::Malformed("datagram has no samples".to_string()));
    }
    Ok(MetricDatagram { version, node, seq, samples })
}
