use std::collections::HashMap;
use std::io::Read;
use std::net::IpAddr;
use std::path::Path;

use ipnet::IpNet;

use super::FeatureError;

/// CIDR → city table answering most-specific-prefix queries.
///
/// Prefixes are bucketed by (family, length); a lookup masks the address at
/// each populated length, longest first, and probes a hash map.
#[derive(Debug, Clone, Default)]
pub struct GeoTable {
    // (is_v6, prefix_len) buckets sorted by descending prefix length.
    buckets: Vec<((bool, u8), HashMap<u128, String>)>,
    len: usize,
}

fn key(net: &IpNet) -> (bool, u8, u128) {
    match net.trunc() {
        IpNet::V4(n) => (false, n.prefix_len(), u128::from(u32::from(n.network()))),
        IpNet::V6(n) => (true, n.prefix_len(), u128::from(n.network())),
    }
}

fn masked(ip: IpAddr, prefix: u8) -> u128 {
    match ip {
        IpAddr::V4(a) => {
            let bits = u32::from(a);
            let m = if prefix == 0 { 0 } else { u32::MAX << (32 - u32::from(prefix)) };
            u128::from(bits & m)
        }
        IpAddr::V6(a) => {
            let bits = u128::from(a);
            let m = if prefix == 0 { 0 } else { u128::MAX << (128 - u32::from(prefix)) };
            bits & m
        }
    }
}

impl GeoTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a prefix. Re-inserting the same network replaces its city.
    pub fn insert(&mut self, net: IpNet, city: impl Into<String>) {
        let (v6, len, addr) = key(&net);
        let pos = match self.buckets.iter().position(|(k, _)| *k == (v6, len)) {
            Some(p) => p,
            None => {
                self.buckets.push(((v6, len), HashMap::new()));
                self.buckets.sort_by(|a, b| b.0 .1.cmp(&a.0 .1).then(a.0 .0.cmp(&b.0 .0)));
                self.buckets.iter().position(|(k, _)| *k == (v6, len)).unwrap_or_default()
            }
        };
        if self.buckets[pos].1.insert(addr, city.into()).is_none() {
            self.len += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// City of the most specific prefix containing `ip`.
    pub fn lookup(&self, ip: IpAddr) -> Option<&str> {
        let v6 = ip.is_ipv6();
        self.buckets
            .iter()
            .filter(|((fam, _), _)| *fam == v6)
            .find_map(|((_, len), map)| map.get(&masked(ip, *len)))
            .map(String::as_str)
    }

    /// Reads a `cidr,city` CSV (optional `cidr,city` header).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, FeatureError> {
        let mut rdr =
            csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let mut table = GeoTable::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| FeatureError::BadTable(e.to_string()))?;
            let cidr = row.get(0).unwrap_or_default();
            let city = row.get(1).unwrap_or_default();
            if i == 0 && cidr.eq_ignore_ascii_case("cidr") {
                continue;
            }
            let net: IpNet = cidr.parse().map_err(|_| FeatureError::BadTable(format!("bad cidr {cidr:?}")))?;
            if city.is_empty() {
                return Err(FeatureError::BadTable(format!("empty city for {cidr}")));
            }
            table.insert(net, city);
        }
        Ok(table)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, FeatureError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }
}

/// Most specific prefix's city for `ip`, if any prefix matches.
pub fn geo_lookup(ip: IpAddr, table: &GeoTable) -> Option<String> {
    table.lookup(ip).map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: &[(&str, &str)]) -> GeoTable {
        let mut t = GeoTable::new();
        for (c, city) in rows {
            t.insert(c.parse().unwrap(), *city);
        }
        t
    }

    #[test]
    fn examples() {
        let t = table(&[("10.0.0.0/8", "Madrid")]);
        assert_eq!(geo_lookup("10.0.0.5".parse().unwrap(), &t).as_deref(), Some("Madrid"));
        let t = table(&[("10.0.0.0/8", "Madrid"), ("10.1.0.0/16", "Barcelona")]);
        assert_eq!(geo_lookup("10.1.0.5".parse().unwrap(), &t).as_deref(), Some("Barcelona"));
        assert_eq!(geo_lookup("10.2.0.5".parse().unwrap(), &t).as_deref(), Some("Madrid"));
        assert_eq!(geo_lookup("192.168.1.1".parse().unwrap(), &t), None);
    }

    #[test]
    fn ipv6_and_csv() {
        let csv = "cidr,city\n2001:db8::/32,Valencia\n2001:db8:1::/48,Seville\n";
        let t = GeoTable::from_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(t.lookup("2001:db8:1::7".parse().unwrap()), Some("Seville"));
        assert_eq!(t.lookup("2001:db8:2::7".parse().unwrap()), Some("Valencia"));
        assert_eq!(t.lookup("10.0.0.1".parse().unwrap()), None);
        assert!(GeoTable::from_csv_reader("nonsense,X\n".as_bytes()).is_err());
    }

    /// Linear scan keeping the longest containing prefix.
    fn oracle(ip: IpAddr, rows: &[(IpNet, String)]) -> Option<String> {
        let mut best: Option<&(IpNet, String)> = None;
        for row in rows {
            if row.0.contains(&ip) && best.is_none_or(|b| row.0.prefix_len() >= b.0.prefix_len()) {
                best = Some(row);
            }
        }
        best.map(|b| b.1.clone())
    }

    proptest! {
        #[test]
        fn matches_linear_scan_oracle(
            prefixes in proptest::collection::btree_map((any::<u32>(), 0u8..=32), "[A-Z]{3}", 1..30),
            probes in proptest::collection::vec(any::<u32>(), 50),
        ) {
            // Normalize to distinct networks so "last insert wins" is unambiguous.
            let mut nets: std::collections::BTreeMap<IpNet, String> = Default::default();
            for ((addr, len), city) in prefixes {
                let net = IpNet::new(IpAddr::V4(addr.into()), len).unwrap().trunc();
                nets.insert(net, city);
            }
            let rows: Vec<(IpNet, String)> = nets.into_iter().collect();
            let mut t = GeoTable::new();
            for (n, c) in &rows {
                t.insert(*n, c.clone());
            }
            for p in probes {
                // Probe near a stored prefix half the time.
                let ip = IpAddr::V4(p.into());
                prop_assert_eq!(geo_lookup(ip, &t), oracle(ip, &rows));
                let near = match rows[(p as usize) % rows.len()].0 { IpNet::V4(n) => u32::from(n.network()) | (p & 0xff), _ => p };
                let ip = IpAddr::V4(near.into());
                prop_assert_eq!(geo_lookup(ip, &t), oracle(ip, &rows));
            }
        }
    }
}
