//! Canonical text documents.
//!
//! Every structured document the platform writes (registry manifests,
//! control-port replies, metrics files) uses the same rules as the event
//! encoding: one JSON object, keys sorted by byte order, no insignificant
//! whitespace, UTF-8.

use serde::{de::DeserializeOwned, Serialize};

/// Renders `value` as a canonical document.
///
/// Struct fields are re-sorted by routing through [`serde_json::Value`],
/// whose object map is ordered.
pub fn to_canonical<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    serde_json::to_vec(&v)
}

pub fn to_canonical_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn from_canonical<T: DeserializeOwned>(bytes: &[u8]) -> serde_json::Result<T> {
    serde_json::from_slice(bytes)
}
