use std::collections::{BTreeSet, HashMap};

use crate::domain::registrable_domain;
use crate::ingest::HttpRequestRecord;

const MIN_ID_LEN: usize = 16;
const MIN_ENTROPY_BITS: f64 = 3.0;

/// True for query values that look like user identifiers: at least 16
/// characters from `[A-Za-z0-9_-]`, mixing letters and digits, with a
/// per-character Shannon entropy of at least 3 bits.
pub fn is_identifier_like(value: &str) -> bool {
    let bytes = value.as_bytes();
    if bytes.len() < MIN_ID_LEN
        || !bytes.iter().all(|b| b.is_ascii_alphanumeric() || *b == b'-' || *b == b'_')
        || !bytes.iter().any(u8::is_ascii_digit)
        || !bytes.iter().any(u8::is_ascii_alphabetic)
    {
        return false;
    }
    let mut freq = [0u32; 256];
    for &b in bytes {
        freq[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    let entropy: f64 = freq
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = f64::from(c) / n;
            -p * p.log2()
        })
        .sum();
    entropy >= MIN_ENTROPY_BITS
}

/// Incremental cookie-sync counter for one user's time-ordered stream.
///
/// A sync event is an identifier-like value seen in third-party requests to
/// at least two distinct sites; each identifier counts once.
#[derive(Debug, Clone, Default)]
pub struct CookieSyncDetector {
    seen: HashMap<String, BTreeSet<String>>,
    count: u64,
}

impl CookieSyncDetector {
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn observe(&mut self, record: &HttpRequestRecord) {
        let site = registrable_domain(&record.host);
        let first_party =
            record.referer.as_deref().and_then(crate::domain::host_of).is_some_and(|r| registrable_domain(&r) == site);
        if first_party {
            return;
        }
        let Some(query) = record.url.split_once('?').map(|(_, q)| q) else { return };
        let query = query.split('#').next().unwrap_or_default();
        for (_, value) in url::form_urlencoded::parse(query.as_bytes()) {
            if !is_identifier_like(&value) {
                continue;
            }
            let sites = self.seen.entry(value.into_owned()).or_default();
            if sites.len() < 2 && sites.insert(site.to_string()) && sites.len() == 2 {
                self.count += 1;
            }
        }
    }
}

/// Number of cookie-sync events in a time-ordered user stream.
pub fn detect_cookie_sync<'a, I>(stream: I) -> u64
where
    I: IntoIterator<Item = &'a HttpRequestRecord>,
{
    let mut d = CookieSyncDetector::default();
    for r in stream {
        d.observe(r);
    }
    d.count()
}
