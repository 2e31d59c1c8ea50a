use serde::Serialize;
use serde_json::{Map, Value};

use super::TransportError;

/// Maximum length of a hive identifier.
pub const HIVE_ID_MAX_LEN: usize = 64;

/// Hive identifier: 1 to 64 characters from `[a-z0-9_-]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct HiveId(String);

impl HiveId {
    pub fn new(id: impl Into<String>) -> Result<Self, TransportError> {
        let id = id.into();
        if Self::is_valid(&id) {
            Ok(Self(id))
        } else {
            Err(TransportError::InvalidMessage(format!("invalid hive id {id:?}")))
        }
    }

    pub fn is_valid(id: &str) -> bool {
        (1..=HIVE_ID_MAX_LEN).contains(&id.len())
            && id
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for HiveId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for HiveId {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HiveId::new(s)
    }
}

/// One averaged four-cell reading published by a sensor node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryMessage {
    pub hive_id: HiveId,
    pub seq: u64,
    pub ts_ms: u64,
    pub cells_g: [f64; 4],
}

impl TelemetryMessage {
    pub fn validate(&self) -> Result<(), TransportError> {
        if !HiveId::is_valid(self.hive_id.as_str()) {
            return Err(TransportError::InvalidMessage(format!(
                "invalid hive id {:?}",
                self.hive_id.as_str()
            )));
        }
        if let Some(bad) = self.cells_g.iter().find(|v| !v.is_finite()) {
            return Err(TransportError::InvalidMessage(format!(
                "cell value {bad} is not finite"
            )));
        }
        Ok(())
    }
}

const KEYS: [&str; 4] = ["hive_id", "seq", "ts_ms", "cells_g"];

/// Canonical JSON encoding: keys in schema order, no whitespace.
pub fn encode_message(msg: &TelemetryMessage) -> Result<Vec<u8>, TransportError> {
    msg.validate()?;
    serde_json::to_vec(msg).map_err(|e| TransportError::InvalidMessage(e.to_string()))
}

/// Parses and validates a payload. Key order is not significant.
pub fn decode_message(bytes: &[u8]) -> Result<TelemetryMessage, TransportError> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| TransportError::MalformedPayload(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(schema("payload is not a JSON object"));
    };
    if let Some(extra) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(schema(format!("unexpected key {extra:?}")));
    }

    let hive_id = match field(&obj, "hive_id")? {
        Value::String(s) => HiveId::new(s.clone()).map_err(|_| schema(format!("invalid hive_id {s:?}")))?,
        _ => return Err(schema("hive_id must be a string")),
    };
    let seq = field(&obj, "seq")?
        .as_u64()
        .ok_or_else(|| schema("seq must be an unsigned integer"))?;
    let ts_ms = field(&obj, "ts_ms")?
        .as_u64()
        .ok_or_else(|| schema("ts_ms must be an unsigned integer"))?;
    let Value::Array(cells) = field(&obj, "cells_g")? else {
        return Err(schema("cells_g must be an array"));
    };
    if cells.len() != 4 {
        return Err(schema(format!("cells_g must hold 4 values, got {}", cells.len())));
    }
    let mut cells_g = [0.0; 4];
    for (slot, v) in cells_g.iter_mut().zip(cells) {
        let f = v.as_f64().ok_or_else(|| schema("cells_g values must be numbers"))?;
        if !f.is_finite() {
            return Err(schema("cells_g values must be finite"));
        }
        *slot = f;
    }
    Ok(TelemetryMessage {
        hive_id,
        seq,
        ts_ms,
        cells_g,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, TransportError> {
    obj.get(key).ok_or_else(|| schema(format!("missing key {key:?}")))
}

fn schema(msg: impl Into<String>) -> TransportError {
    TransportError::SchemaViolation(msg.into())
}
