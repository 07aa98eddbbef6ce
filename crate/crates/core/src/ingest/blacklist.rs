use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::domain::suffixes;

/// Tracker category of a request domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainCategory {
    Advertising,
    Analytics,
    Social,
    ThirdPartyContent,
    Rest,
}

impl DomainCategory {
    pub const ALL: [DomainCategory; 5] = [
        DomainCategory::Advertising,
        DomainCategory::Analytics,
        DomainCategory::Social,
        DomainCategory::ThirdPartyContent,
        DomainCategory::Rest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainCategory::Advertising => "advertising",
            DomainCategory::Analytics => "analytics",
            DomainCategory::Social => "social",
            DomainCategory::ThirdPartyContent => "third_party_content",
            DomainCategory::Rest => "rest",
        }
    }
}

impl fmt::Display for DomainCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainCategory {
    type Err = IngestError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Ok(match norm.as_str() {
            "advertising" | "ads" => DomainCategory::Advertising,
            "analytics" => DomainCategory::Analytics,
            "social" => DomainCategory::Social,
            "third_party_content" | "content" | "3rd_party_content" => DomainCategory::ThirdPartyContent,
            "rest" => DomainCategory::Rest,
            _ => return Err(IngestError::UnknownCategory(s.to_string())),
        })
    }
}

/// Domain-suffix → category table. Lookups pick the longest registered suffix.
#[derive(Debug, Clone, Default)]
pub struct Blacklist {
    entries: HashMap<String, DomainCategory>,
}

impl Blacklist {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a suffix. A suffix may be registered only once.
    pub fn insert(&mut self, domain: &str, category: DomainCategory) -> Result<(), IngestError> {
        let key = domain.trim().trim_start_matches("*.").trim_matches('.').to_ascii_lowercase();
        if key.is_empty() {
            return Err(IngestError::BadBlacklist("empty domain".into()));
        }
        if self.entries.insert(key.clone(), category).is_some() {
            return Err(IngestError::BadBlacklist(format!("duplicate domain {key}")));
        }
        Ok(())
    }

    /// Merges another list into this one; the same duplicate rule applies.
    pub fn extend(&mut self, other: &Blacklist) -> Result<(), IngestError> {
        for (d, c) in &other.entries {
            self.insert(d, *c)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a `domain,category` CSV. A header row is accepted when its
    /// first field is literally `domain`. Unknown categories fail the load.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, IngestError> {
        let mut rdr =
            csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let mut list = Blacklist::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| IngestError::BadBlacklist(e.to_string()))?;
            let domain = row.get(0).unwrap_or_default();
            let category = row.get(1).unwrap_or_default();
            if i == 0 && domain.eq_ignore_ascii_case("domain") {
                continue;
            }
            if domain.is_empty() {
                continue;
            }
            list.insert(domain, category.parse()?)?;
        }
        Ok(list)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, IngestError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    /// The built-in list covering the domains the simulator and the shipped
    /// macro rules use, plus a handful of common trackers.
    pub fn builtin() -> Self {
        Self::from_csv_reader(include_str!("../../data/blacklist.csv").as_bytes()).expect("builtin blacklist is valid")
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<_> = self.entries.iter().collect();
        rows.sort();
        let mut out = String::from("domain,category\n");
        for (d, c) in rows {
            out.push_str(d);
            out.push(',');
            out.push_str(c.as_str());
            out.push('\n');
        }
        out
    }

    /// Total and pure: unlisted hosts fall into [`DomainCategory::Rest`].
    pub fn classify(&self, host: &str) -> DomainCategory {
        classify_domain(host, self)
    }
}

/// Category of `host` under the longest matching registered suffix.
pub fn classify_domain(host: &str, bl: &Blacklist) -> DomainCategory {
    if bl.entries.is_empty() {
        return DomainCategory::Rest;
    }
    let find = |h: &str| {
        suffixes(h.trim_end_matches('.')).find_map(|s| bl.entries.get(s).copied()).unwrap_or(DomainCategory::Rest)
    };
    if host.bytes().any(|b| b.is_ascii_uppercase()) {
        find(&host.to_ascii_lowercase())
    } else {
        find(host)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::host_matches_suffix;
    use proptest::prelude::*;

    fn list(rows: &[(&str, DomainCategory)]) -> Blacklist {
        let mut bl = Blacklist::new();
        for (d, c) in rows {
            bl.insert(d, *c).unwrap();
        }
        bl
    }

    #[test]
    fn suffix_match_and_default() {
        let bl = list(&[("doubleclick.net", DomainCategory::Advertising)]);
        assert_eq!(classify_domain("ads.doubleclick.net", &bl), DomainCategory::Advertising);
        assert_eq!(classify_domain("ADS.DoubleClick.net", &bl), DomainCategory::Advertising);
        assert_eq!(classify_domain("example.org", &Blacklist::new()), DomainCategory::Rest);
        assert_eq!(classify_domain("notdoubleclick.net", &bl), DomainCategory::Rest);
    }

    #[test]
    fn longest_suffix_wins() {
        let bl = list(&[("tracker.com", DomainCategory::Analytics), ("a.tracker.com", DomainCategory::Advertising)]);
        assert_eq!(classify_domain("sub.a.tracker.com", &bl), DomainCategory::Advertising);
        assert_eq!(classify_domain("b.tracker.com", &bl), DomainCategory::Analytics);
    }

    /// Brute-force oracle: scan every entry, keep the longest matching one.
    fn oracle(host: &str, rows: &[(String, DomainCategory)]) -> DomainCategory {
        rows.iter()
            .filter(|(d, _)| host_matches_suffix(host, d))
            .max_by_key(|(d, _)| d.len())
            .map(|(_, c)| *c)
            .unwrap_or(DomainCategory::Rest)
    }

    proptest! {
        #[test]
        fn matches_exhaustive_small_table_oracle(
            table in proptest::collection::btree_map("[abc]{1,2}(\\.[abc]{1,2}){0,2}", 0usize..5, 0..8),
            host in "[abc]{1,2}(\\.[abc]{1,2}){0,4}",
        ) {
            let rows: Vec<(String, DomainCategory)> =
                table.into_iter().map(|(d, c)| (d, DomainCategory::ALL[c])).collect();
            let mut bl = Blacklist::new();
            for (d, c) in &rows {
                bl.insert(d, *c).unwrap();
            }
            prop_assert_eq!(classify_domain(&host, &bl), oracle(&host, &rows));
        }
    }

    #[test]
    fn csv_loading() {
        let csv = "domain,category\ndoubleclick.net,Advertising\ngoogle-analytics.com,analytics\n# comment\nfacebook.com,social\n";
        let bl = Blacklist::from_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(bl.len(), 3);
        assert_eq!(bl.classify("www.facebook.com"), DomainCategory::Social);
    }

    #[test]
    fn unknown_category_fails_at_load() {
        let csv = "doubleclick.net,evil\n";
        assert!(matches!(Blacklist::from_csv_reader(csv.as_bytes()), Err(IngestError::UnknownCategory(_))));
    }

    #[test]
    fn duplicate_suffix_rejected() {
        let csv = "a.com,advertising\nA.com,social\n";
        assert!(matches!(Blacklist::from_csv_reader(csv.as_bytes()), Err(IngestError::BadBlacklist(_))));
    }

    #[test]
    fn builtin_list_loads() {
        let bl = Blacklist::builtin();
        assert_eq!(bl.classify("cpp.imp.mpx.mopub.com"), DomainCategory::Advertising);
        assert_eq!(bl.classify("tags.mathtag.com"), DomainCategory::Advertising);
        let round = Blacklist::from_csv_reader(bl.to_csv().as_bytes()).unwrap();
        assert_eq!(round.len(), bl.len());
    }
}
