//! Events, batches, queue names and the canonical event encoding.
//!
//! The encoding is the cross-language contract: a single JSON object with
//! top-level keys `attrs`, `seq`, `ts` in that (sorted) order, attribute keys
//! sorted by byte order, no whitespace, and numbers in shortest round-trip
//! form. Integers never carry a fraction or exponent; floats always carry
//! one (`1.0`, `0.78`, `1e21`), so the two scalar kinds stay distinct.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::Value;
use thiserror::Error;

/// A scalar attribute value.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    Str(String),
    Int(i64),
    Float(f64),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Scalar::Int(i) => Some(i as f64),
            Scalar::Float(f) => Some(f),
            Scalar::Str(_) => None,
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_owned())
    }
}

impl From<String> for Scalar {
    fn from(s: String) -> Self {
        Scalar::Str(s)
    }
}

impl From<i64> for Scalar {
    fn from(i: i64) -> Self {
        Scalar::Int(i)
    }
}

impl From<f64> for Scalar {
    fn from(f: f64) -> Self {
        Scalar::Float(f)
    }
}

/// One event tuple.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Event {
    /// Producer-assigned, strictly increasing within one producer stream.
    pub seq: u64,
    /// Producer wall clock, epoch microseconds.
    pub ts_produced: i64,
    pub attrs: BTreeMap<String, Scalar>,
}

impl Event {
    pub fn new(seq: u64, ts_produced: i64) -> Self {
        Event { seq, ts_produced, attrs: BTreeMap::new() }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<Scalar>) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn attr(&self, key: &str) -> Option<&Scalar> {
        self.attrs.get(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodingError {
    #[error("attribute `{0}` is not a finite scalar")]
    NonScalar(String),
    #[error("attribute keys must be non-empty")]
    EmptyKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", match .key { Some(k) => format!("cannot decode event at `{k}`: {}", .reason), None => format!("cannot decode event: {}", .reason) })]
pub struct DecodingError {
    /// The offending key, when the failure is attributable to one.
    pub key: Option<String>,
    pub reason: String,
}

impl DecodingError {
    fn at(key: &str, reason: impl Into<String>) -> Self {
        DecodingError { key: Some(key.to_owned()), reason: reason.into() }
    }
}

/// Appends the canonical encoding of `e` to `out`.
pub fn encode_event_into(e: &Event, out: &mut Vec<u8>) -> Result<(), EncodingError> {
    out.extend_from_slice(b"{\"attrs\":{");
    for (i, (k, v)) in e.attrs.iter().enumerate() {
        if k.is_empty() {
            return Err(EncodingError::EmptyKey);
        }
        if i > 0 {
            out.push(b',');
        }
        write_json_str(k, out);
        out.push(b':');
        match v {
            Scalar::Str(s) => write_json_str(s, out),
            Scalar::Int(n) => out.extend_from_slice(n.to_string().as_bytes()),
            Scalar::Float(f) => {
                if !f.is_finite() {
                    return Err(EncodingError::NonScalar(k.clone()));
                }
                // serde_json renders finite floats in shortest round-trip form.
                serde_json::to_writer(&mut *out, f).expect("writing to a Vec cannot fail");
            }
        }
    }
    out.extend_from_slice(b"},\"seq\":");
    out.extend_from_slice(e.seq.to_string().as_bytes());
    out.extend_from_slice(b",\"ts\":");
    out.extend_from_slice(e.ts_produced.to_string().as_bytes());
    out.push(b'}');
    Ok(())
}

fn write_json_str(s: &str, out: &mut Vec<u8>) {
    serde_json::to_writer(&mut *out, s).expect("writing to a Vec cannot fail");
}

pub fn encode_event(e: &Event) -> Result<Vec<u8>, EncodingError> {
    let mut out = Vec::with_capacity(64 + e.attrs.len() * 24);
    encode_event_into(e, &mut out)?;
    Ok(out)
}

/// Decodes an event; key order and whitespace on input are irrelevant.
pub fn decode_event(bytes: &[u8]) -> Result<Event, DecodingError> {
    let doc: Value = serde_json::from_slice(bytes)
        .map_err(|e| DecodingError { key: None, reason: e.to_string() })?;
    let Value::Object(mut obj) = doc else {
        return Err(DecodingError { key: None, reason: "expected an object".into() });
    };
    let seq = match obj.remove("seq") {
        None => return Err(DecodingError::at("seq", "missing")),
        Some(v) => v.as_u64().ok_or_else(|| DecodingError::at("seq", "expected an unsigned integer"))?,
    };
    let ts_produced = match obj.remove("ts") {
        None => return Err(DecodingError::at("ts", "missing")),
        Some(v) => v.as_i64().ok_or_else(|| DecodingError::at("ts", "expected an integer"))?,
    };
    let mut attrs = BTreeMap::new();
    match obj.remove("attrs") {
        None => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                if k.is_empty() {
                    return Err(DecodingError::at("attrs", "empty attribute key"));
                }
                let scalar = match v {
                    Value::String(s) => Scalar::Str(s),
                    Value::Number(n) => {
                        if let Some(i) = n.as_i64() {
                            Scalar::Int(i)
                        } else if n.is_f64() {
                            Scalar::Float(n.as_f64().expect("f64 number"))
                        } else {
                            return Err(DecodingError::at(&k, "integer out of range"));
                        }
                    }
                    _ => return Err(DecodingError::at(&k, "expected a scalar")),
                };
                attrs.insert(k, scalar);
            }
        }
        Some(_) => return Err(DecodingError::at("attrs", "expected an object")),
    }
    Ok(Event { seq, ts_produced, attrs })
}

/// Which way a batch travels relative to the user-defined operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Host to operator, bounded by the out batch size.
    ToOperator,
    /// Operator to host, bounded by the in batch size.
    FromOperator,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("batch of {len} events exceeds bound {bound}")]
pub struct BatchOverflow {
    pub len: usize,
    pub bound: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventBatch {
    events: Vec<Event>,
    direction: Direction,
}

impl EventBatch {
    pub fn new(direction: Direction, events: Vec<Event>, bound: usize) -> Result<Self, BatchOverflow> {
        if events.len() > bound {
            return Err(BatchOverflow { len: events.len(), bound });
        }
        Ok(EventBatch { events, direction })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid queue name `{0}`")]
pub struct InvalidQueueName(pub String);

/// Longest stem that still leaves room for a four-byte suffix.
pub const MAX_STEM_LEN: usize = 60;

/// True for names made of `[a-z0-9-]`, 1 to 64 bytes.
pub fn is_valid_queue_ident(s: &str) -> bool {
    !s.is_empty() && s.len() <= 64 && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

/// An operator data queue name, ending in `-in` or `-out`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueueName(String);

impl QueueName {
    pub fn parse(s: &str) -> Result<Self, InvalidQueueName> {
        let stem = s.strip_suffix("-in").or_else(|| s.strip_suffix("-out"));
        if is_valid_queue_ident(s) && stem.is_some_and(|st| !st.is_empty()) {
            Ok(QueueName(s.to_owned()))
        } else {
            Err(InvalidQueueName(s.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The name without its `-in`/`-out` suffix.
    pub fn stem(&self) -> &str {
        self.0
            .strip_suffix("-in")
            .or_else(|| self.0.strip_suffix("-out"))
            .expect("validated suffix")
    }
}

impl fmt::Display for QueueName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The input and output queues of one operator instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueuePair {
    pub input: QueueName,
    pub output: QueueName,
}

impl QueuePair {
    pub fn for_instance(instance_id: &str) -> Result<Self, InvalidQueueName> {
        if !is_valid_queue_ident(instance_id) || instance_id.len() > MAX_STEM_LEN {
            return Err(InvalidQueueName(instance_id.to_owned()));
        }
        Ok(QueuePair {
            input: QueueName::parse(&format!("{instance_id}-in"))?,
            output: QueueName::parse(&format!("{instance_id}-out"))?,
        })
    }

    pub fn instance_id(&self) -> &str {
        self.input.stem()
    }
}

/// Control queue of an instance; carries lifecycle handshakes, never events.
pub fn control_queue(instance_id: &str) -> String {
    format!("{instance_id}-ctl")
}

/// Dead-letter queue for events an operator function rejected.
pub fn dead_letter_queue(instance_id: &str) -> String {
    format!("{instance_id}-dlq")
}
