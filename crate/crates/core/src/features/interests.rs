use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::domain::suffixes;

/// Domain → IAB content category (`IAB1` … `IAB26`, optionally with a
/// `-N` subcategory).
#[derive(Debug, Clone, Default)]
pub struct IabMap {
    entries: HashMap<String, String>,
}

pub fn is_valid_iab(code: &str) -> bool {
    let Some(rest) = code.strip_prefix("IAB") else { return false };
    let (main, sub) = match rest.split_once('-') {
        Some((m, s)) => (m, Some(s)),
        None => (rest, None),
    };
    let main_ok = main.parse::<u8>().is_ok_and(|n| (1..=26).contains(&n)) && !main.starts_with('0');
    let sub_ok = sub.is_none_or(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
    main_ok && sub_ok
}

impl IabMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, domain: &str, iab: &str) -> Result<(), FeatureError> {
        let iab = iab.trim().to_ascii_uppercase();
        if !is_valid_iab(&iab) {
            return Err(FeatureError::BadTable(format!("invalid IAB code {iab:?}")));
        }
        self.entries.insert(domain.trim().trim_matches('.').to_ascii_lowercase(), iab);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// IAB of the longest registered suffix of `host`.
    pub fn lookup(&self, host: &str) -> Option<&str> {
        suffixes(host).find_map(|s| self.entries.get(s)).map(String::as_str)
    }

    /// Reads a `domain,iab_code` CSV (optional header).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, FeatureError> {
        let mut rdr =
            csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let mut map = IabMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| FeatureError::BadTable(e.to_string()))?;
            let domain = row.get(0).unwrap_or_default();
            if i == 0 && domain.eq_ignore_ascii_case("domain") {
                continue;
            }
            if domain.is_empty() {
                continue;
            }
            map.insert(domain, row.get(1).unwrap_or_default())?;
        }
        Ok(map)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, FeatureError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }
}

/// Weighted interest categories; weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterestProfile {
    pub weights: BTreeMap<String, f64>,
}

impl InterestProfile {
    /// Normalizes per-category visit counts. `None` when nothing was mapped.
    pub fn from_counts(counts: &BTreeMap<String, u64>) -> Option<Self> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return None;
        }
        let weights =
            counts.iter().filter(|(_, &c)| c > 0).map(|(k, &c)| (k.clone(), c as f64 / total as f64)).collect();
        Some(InterestProfile { weights })
    }

    pub fn top(&self) -> Option<&str> {
        self.weights.iter().max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0))).map(|(k, _)| k.as_str())
    }
}

/// Interest profile from a multiset of visited hosts; unmapped hosts are
/// ignored.
pub fn infer_interests<'a, I>(visited_hosts: I, map: &IabMap) -> Result<InterestProfile, FeatureError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for host in visited_hosts {
        if let Some(iab) = map.lookup(host) {
            *counts.entry(iab.to_string()).or_default() += 1;
        }
    }
    InterestProfile::from_counts(&counts).ok_or(FeatureError::EmptyProfile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ratio_example() {
        let mut map = IabMap::new();
        map.insert("news.com", "IAB12").unwrap();
        map.insert("sport.com", "IAB17").unwrap();
        let visits = ["news.com", "news.com", "www.news.com", "sport.com", "unmapped.org"];
        let p = infer_interests(visits, &map).unwrap();
        assert_eq!(p.weights["IAB12"], 0.75);
        assert_eq!(p.weights["IAB17"], 0.25);
        assert_eq!(p.top(), Some("IAB12"));
    }

    #[test]
    fn all_unmapped_is_empty_profile() {
        let map = IabMap::new();
        assert!(matches!(infer_interests(["a.com", "b.com"], &map), Err(FeatureError::EmptyProfile)));
    }

    #[test]
    fn code_validation() {
        for ok in ["IAB1", "IAB26", "IAB12-3"] {
            assert!(is_valid_iab(ok), "{ok}");
        }
        for bad in ["IAB0", "IAB27", "IAB", "iab1x", "IAB01", "IAB3-", "X12"] {
            assert!(!is_valid_iab(bad), "{bad}");
        }
        assert!(IabMap::from_csv_reader("a.com,IAB99\n".as_bytes()).is_err());
    }

    #[test]
    fn weights_equal_counting_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut map = IabMap::new();
        let domains: Vec<String> = (0..40).map(|i| format!("site{i}.com")).collect();
        for (i, d) in domains.iter().enumerate().take(30) {
            map.insert(d, &format!("IAB{}", i % 7 + 1)).unwrap();
        }
        let visits: Vec<&str> = (0..10_000).map(|_| domains[rng.random_range(0..40)].as_str()).collect();
        let p = infer_interests(visits.iter().copied(), &map).unwrap();

        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut mapped = 0usize;
        for v in &visits {
            let idx: usize = v.trim_start_matches("site").trim_end_matches(".com").parse().unwrap();
            if idx < 30 {
                *counts.entry(format!("IAB{}", idx % 7 + 1)).or_default() += 1;
                mapped += 1;
            }
        }
        assert_eq!(p.weights.len(), counts.len());
        for (k, c) in counts {
            assert!((p.weights[&k] - c as f64 / mapped as f64).abs() < 1e-12);
        }
        let total: f64 = p.weights.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
