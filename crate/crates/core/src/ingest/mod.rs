//! Weblog ingestion: record parsing, tracker-domain classification and
//! per-user partitioning.

mod blacklist;
mod parse;
mod record;

use std::collections::BTreeMap;

use thiserror::Error;

pub use blacklist::{classify_domain, Blacklist, DomainCategory};
pub use parse::{
    parse_csv_fields, parse_json_record, parse_record, CsvLayout, IngestStats, Ingestor, LogFormat, Parsed,
};
pub use record::HttpRequestRecord;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("bad csv header: {0}")]
    BadHeader(String),
    #[error("unknown domain category {0:?}")]
    UnknownCategory(String),
    #[error("bad blacklist: {0}")]
    BadBlacklist(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IngestError {
    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        IngestError::MalformedRecord(msg.into())
    }
}

/// Groups records by user. Each sub-stream is stably sorted by timestamp, so
/// records sharing a timestamp keep their input order.
pub fn partition_by_user<I>(records: I) -> BTreeMap<String, Vec<HttpRequestRecord>>
where
    I: IntoIterator<Item = HttpRequestRecord>,
{
    let mut streams: BTreeMap<String, Vec<HttpRequestRecord>> = BTreeMap::new();
    for r in records {
        match streams.get_mut(&r.user_id) {
            Some(s) => s.push(r),
            None => {
                streams.insert(r.user_id.clone(), vec![r]);
            }
        }
    }
    for s in streams.values_mut() {
        s.sort_by_key(|r| r.timestamp_ms);
    }
    streams
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;

    fn rec(ts: i64, user: &str) -> HttpRequestRecord {
        HttpRequestRecord::new(ts, user, format!("http://site{ts}.com/")).unwrap()
    }

    #[test]
    fn groups_and_orders() {
        let parts = partition_by_user(vec![rec(2, "a"), rec(1, "a"), rec(3, "b")]);
        assert_eq!(parts.len(), 2);
        let a: Vec<i64> = parts["a"].iter().map(|r| r.timestamp_ms).collect();
        assert_eq!(a, vec![1, 2]);
        assert_eq!(parts["b"].len(), 1);
        assert!(partition_by_user(Vec::new()).is_empty());
    }

    #[test]
    fn counts_match_hash_group_by() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut records: Vec<_> = (0..10_000)
            .map(|i| rec(rng.random_range(0..1_000), &format!("u{}", i % 37 + rng.random_range(0..3))))
            .collect();
        records.shuffle(&mut rng);
        let mut oracle: HashMap<String, usize> = HashMap::new();
        for r in &records {
            *oracle.entry(r.user_id.clone()).or_default() += 1;
        }
        let parts = partition_by_user(records.clone());
        assert_eq!(parts.len(), oracle.len());
        for (u, stream) in &parts {
            assert_eq!(stream.len(), oracle[u]);
            assert!(stream.windows(2).all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
        }
        let total: usize = parts.values().map(Vec::len).sum();
        assert_eq!(total, records.len());
    }

    #[test]
    fn filtering_commutes_with_partitioning() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let records: Vec<_> =
            (0..2_000).map(|_| rec(rng.random_range(0..500), &format!("u{}", rng.random_range(0..20)))).collect();
        let keep = |r: &HttpRequestRecord| r.timestamp_ms % 3 != 0;
        let a = partition_by_user(records.iter().filter(|r| keep(r)).cloned());
        let b: BTreeMap<_, _> = partition_by_user(records)
            .into_iter()
            .map(|(u, s)| (u, s.into_iter().filter(|r| keep(r)).collect::<Vec<_>>()))
            .filter(|(_, s)| !s.is_empty())
            .collect();
        assert_eq!(a, b);
    }
}
