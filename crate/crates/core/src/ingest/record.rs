use std::net::IpAddr;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::IngestError;

/// One observed HTTP request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRequestRecord {
    /// Epoch milliseconds, UTC.
    #[serde(rename = "ts")]
    pub timestamp_ms: i64,
    #[serde(rename = "uid")]
    pub user_id: String,
    pub url: String,
    /// Lower-cased host of `url`. Derived at parse time, never serialized.
    #[serde(skip)]
    pub host: String,
    #[serde(rename = "ua", default)]
    pub user_agent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referer: Option<String>,
    #[serde(default)]
    pub bytes_out: u64,
    #[serde(default)]
    pub bytes_in: u64,
    #[serde(rename = "dur", default)]
    pub duration_ms: u64,
    #[serde(rename = "ip", default, skip_serializing_if = "Option::is_none")]
    pub client_ip: Option<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
}

impl HttpRequestRecord {
    /// Builds a record from its required fields, deriving the host.
    pub fn new(timestamp_ms: i64, user_id: impl Into<String>, url: impl Into<String>) -> Result<Self, IngestError> {
        let url = url.into();
        let host = host_of_url(&url)?;
        Ok(HttpRequestRecord {
            timestamp_ms,
            user_id: user_id.into(),
            url,
            host,
            user_agent: String::new(),
            referer: None,
            bytes_out: 0,
            bytes_in: 0,
            duration_ms: 0,
            client_ip: None,
            city: None,
        })
    }

    /// Serializes in the canonical JSON Lines schema (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }
}

pub(crate) fn host_of_url(url: &str) -> Result<String, IngestError> {
    let parsed = url::Url::parse(url).map_err(|e| IngestError::malformed(format!("url: {e}")))?;
    match parsed.host_str() {
        Some(h) if !h.is_empty() => Ok(h.to_ascii_lowercase()),
        _ => Err(IngestError::malformed("url has no host")),
    }
}

/// Epoch-ms integer or RFC 3339 string.
pub(crate) fn parse_timestamp(value: &Value) -> Result<i64, IngestError> {
    match value {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.is_finite()).map(|f| f as i64))
            .ok_or_else(|| IngestError::malformed("timestamp out of range")),
        Value::String(s) => parse_timestamp_str(s),
        _ => Err(IngestError::malformed("timestamp must be a number or string")),
    }
}

pub(crate) fn parse_timestamp_str(s: &str) -> Result<i64, IngestError> {
    let s = s.trim();
    if let Ok(ms) = s.parse::<i64>() {
        return Ok(ms);
    }
    DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.timestamp_millis())
        .map_err(|e| IngestError::malformed(format!("timestamp {s:?}: {e}")))
}
