use std::io;
use std::path::Path;

use adcost_core::features::CoreFeatures;
use adcost_core::nurl::PriceValue;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::fs::OpenOptions;
use tokio::io::AsyncWriteExt;
use tokio::sync::{mpsc, oneshot};

/// Keys rejected anywhere in a contribution body.
pub const IDENTIFYING_FIELDS: &[&str] = &[
    "user_id",
    "user",
    "uid",
    "url",
    "uri",
    "referer",
    "referrer",
    "client_ip",
    "ip",
    "ip_address",
    "user_agent",
    "cookie",
    "cookies",
    "device_id",
    "email",
    "host",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContributionError {
    #[error("identifying field {0:?} not allowed")]
    Identifying(String),
    #[error("invalid contribution: {0}")]
    Schema(String),
}

/// Anonymous training sample: core features and the observed charge price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contribution {
    pub features: CoreFeatures,
    pub price: PriceValue,
    pub submitted_at: DateTime<Utc>,
}

fn find_identifying(v: &Value) -> Option<&str> {
    match v {
        Value::Object(m) => m.iter().find_map(|(k, v)| {
            let lower = k.to_ascii_lowercase();
            match IDENTIFYING_FIELDS.iter().find(|f| **f == lower) {
                Some(f) => Some(*f),
                None => find_identifying(v),
            }
        }),
        Value::Array(a) => a.iter().find_map(find_identifying),
        _ => None,
    }
}

/// Parses a request body; identifying keys and unknown fields are rejected.
pub fn parse_contribution(body: &[u8]) -> Result<Contribution, ContributionError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| ContributionError::Schema(e.to_string()))?;
    if let Some(f) = find_identifying(&v) {
        return Err(ContributionError::Identifying(f.to_string()));
    }
    serde_json::from_value(v).map_err(|e| ContributionError::Schema(e.to_string()))
}

struct Append {
    line: String,
    done: oneshot::Sender<io::Result<()>>,
}

/// Append-only JSONL store. All writes go through one task.
#[derive(Debug, Clone)]
pub struct ContributionStore {
    tx: mpsc::Sender<Append>,
}

impl std::fmt::Debug for Append {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Append")
    }
}

impl ContributionStore {
    pub async fn open(path: &Path) -> io::Result<Self> {
        let mut file = OpenOptions::new().create(true).append(true).open(path).await?;
        let (tx, mut rx) = mpsc::channel::<Append>(256);
        tokio::spawn(async move {
            while let Some(a) = rx.recv().await {
                let res = async {
                    file.write_all(a.line.as_bytes()).await?;
                    file.flush().await
                }
                .await;
                let _ = a.done.send(res);
            }
        });
        Ok(ContributionStore { tx })
    }

    /// Returns once the line is written.
    pub async fn append(&self, c: &Contribution) -> io::Result<()> {
        let mut line = serde_json::to_string(c).map_err(io::Error::other)?;
        line.push('\n');
        let (done, wait) = oneshot::channel();
        self.tx.send(Append { line, done }).await.map_err(|_| io::Error::other("store closed"))?;
        wait.await.map_err(|_| io::Error::other("store closed"))?
    }
}
