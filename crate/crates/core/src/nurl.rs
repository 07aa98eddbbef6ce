//! Winning-price notification (nURL) detection.
//!
//! A notification is recognized by host against a table of macro rules; the
//! rule names which query parameters carry the charge price, which carry
//! bids, and which carry ad metadata.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{host_matches_suffix, host_of, registrable_domain};
use crate::ingest::HttpRequestRecord;
use crate::money::MicroCpm;

pub const RULES_SCHEMA_VERSION: u32 = 1;

/// Upper bound (exclusive) for a believable cleartext CPM.
const MAX_CLEARTEXT_MICROS: i64 = 10_000 * 1_000_000;
const MIN_TOKEN_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum NurlError {
    #[error("unrecognized price value {0:?}")]
    UnrecognizedPrice(String),
    #[error("invalid macro rule {adx_id}: {reason}")]
    InvalidRule { adx_id: String, reason: String },
    #[error("macro rules schema_version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("cannot parse macro rules: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceTag {
    Charge,
    Bid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceParam {
    pub name: String,
    pub tag: PriceTag,
}

/// Notification fields a query parameter can populate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaField {
    AdSize,
    AdWidth,
    AdHeight,
    CampaignId,
    ImpressionId,
    BidderName,
    Publisher,
    Currency,
    DspDomain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroRule {
    pub adx_id: String,
    /// Domain suffix the notification host must fall under.
    pub host_pattern: String,
    /// Price parameters in precedence order.
    pub price_params: Vec<PriceParam>,
    #[serde(default)]
    pub metadata_params: BTreeMap<String, MetaField>,
}

impl MacroRule {
    pub fn validate(&self) -> Result<(), NurlError> {
        let invalid = |reason: &str| NurlError::InvalidRule { adx_id: self.adx_id.clone(), reason: reason.to_string() };
        if self.adx_id.trim().is_empty() {
            return Err(invalid("empty adx_id"));
        }
        if self.host_pattern.trim().is_empty() {
            return Err(invalid("empty host_pattern"));
        }
        if !self.price_params.iter().any(|p| p.tag == PriceTag::Charge) {
            return Err(invalid("no charge-tagged price parameter"));
        }
        Ok(())
    }

    pub fn matches_host(&self, host: &str) -> bool {
        host_matches_suffix(host, &self.host_pattern)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AdSize {
    pub width: u32,
    pub height: u32,
}

impl fmt::Display for AdSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for AdSize {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        let (w, h) = s.trim().split_once(['x', 'X']).ok_or(())?;
        let width = w.trim().parse().map_err(|_| ())?;
        let height = h.trim().parse().map_err(|_| ())?;
        if width == 0 || height == 0 {
            return Err(());
        }
        Ok(AdSize { width, height })
    }
}

impl Serialize for AdSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AdSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| serde::de::Error::custom(format!("bad ad size {s:?}")))
    }
}

/// A charge price as observed in a notification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PriceValue {
    Cleartext { cpm: MicroCpm, currency: String },
    Encrypted { token: String },
}

impl PriceValue {
    pub fn is_encrypted(&self) -> bool {
        matches!(self, PriceValue::Encrypted { .. })
    }

    pub fn cleartext_cpm(&self) -> Option<MicroCpm> {
        match self {
            PriceValue::Cleartext { cpm, .. } => Some(*cpm),
            PriceValue::Encrypted { .. } => None,
        }
    }
}

fn is_token_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'%'
}

/// Decides whether an (already URL-decoded) price value is a cleartext
/// decimal or an opaque encrypted token.
pub fn classify_price(raw: &str) -> Result<PriceValue, NurlError> {
    let s = raw.trim();
    let unrecognized = || NurlError::UnrecognizedPrice(raw.to_string());
    if s.is_empty() {
        return Err(unrecognized());
    }
    if let Ok(cpm) = MicroCpm::parse_decimal(s) {
        if cpm.micros() > 0 && cpm.micros() < MAX_CLEARTEXT_MICROS {
            return Ok(PriceValue::Cleartext { cpm, currency: "USD".to_string() });
        }
        return Err(unrecognized());
    }
    if s.len() >= MIN_TOKEN_LEN && s.bytes().all(is_token_char) {
        return Ok(PriceValue::Encrypted { token: s.to_string() });
    }
    Err(unrecognized())
}

/// A detected winning-price notification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceNotification {
    pub user_id: String,
    pub timestamp_ms: i64,
    pub adx_id: String,
    pub dsp_domain: Option<String>,
    pub price: PriceValue,
    pub ad_size: Option<AdSize>,
    pub impression_id: Option<String>,
    pub campaign_id: Option<String>,
    pub bidder_name: Option<String>,
    pub publisher: Option<String>,
    /// Bid-tagged values found next to the charge price, kept as metadata.
    #[serde(default)]
    pub bid_prices: Vec<(String, String)>,
    pub url_param_count: usize,
    pub raw_url: String,
}

impl PriceNotification {
    /// Stable identity used to keep cost ledgers free of duplicates.
    pub fn identity(&self) -> String {
        format!("{}|{}|{}", self.user_id, self.timestamp_ms, self.raw_url)
    }
}

/// An ordered set of macro rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    pub schema_version: u32,
    pub rules: Vec<MacroRule>,
}

impl RuleSet {
    pub fn new(rules: Vec<MacroRule>) -> Result<Self, NurlError> {
        for r in &rules {
            r.validate()?;
        }
        Ok(RuleSet { schema_version: RULES_SCHEMA_VERSION, rules })
    }

    pub fn from_json(text: &str) -> Result<Self, NurlError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != RULES_SCHEMA_VERSION {
            return Err(NurlError::VersionMismatch { found, expected: RULES_SCHEMA_VERSION });
        }
        let set: RuleSet = serde_json::from_value(value)?;
        RuleSet::new(set.rules)
    }

    pub fn from_path(path: &Path) -> Result<Self, NurlError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rules reconstructed from published notification examples plus the
    /// simulated marketplace's exchanges.
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../data/macro_rules.json")).expect("builtin rules are valid")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("rules serialize")
    }

    pub fn rule(&self, adx_id: &str) -> Option<&MacroRule> {
        self.rules.iter().find(|r| r.adx_id == adx_id)
    }

    pub fn detect(&self, record: &HttpRequestRecord) -> Option<PriceNotification> {
        detect(record, &self.rules)
    }
}

/// Returns a notification when the record's host matches a rule and one of
/// the rule's charge-tagged parameters holds a recognizable price. Query
/// values are percent-decoded exactly once before classification.
pub fn detect(record: &HttpRequestRecord, rules: &[MacroRule]) -> Option<PriceNotification> {
    let host = record.host.as_str();
    if !rules.iter().any(|r| r.matches_host(host)) {
        return None;
    }
    let parsed = url::Url::parse(&record.url).ok()?;
    let params: Vec<(Cow<'_, str>, Cow<'_, str>)> = parsed.query_pairs().collect();
    let first = |name: &str| params.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_ref());

    for rule in rules.iter().filter(|r| r.matches_host(host)) {
        let price = rule
            .price_params
            .iter()
            .filter(|p| p.tag == PriceTag::Charge)
            .filter_map(|p| first(&p.name))
            .find_map(|v| classify_price(v).ok());
        let Some(mut price) = price else { continue };

        let bid_prices = rule
            .price_params
            .iter()
            .filter(|p| p.tag == PriceTag::Bid)
            .filter_map(|p| first(&p.name).map(|v| (p.name.clone(), v.to_string())))
            .collect();

        let mut n = PriceNotification {
            user_id: record.user_id.clone(),
            timestamp_ms: record.timestamp_ms,
            adx_id: rule.adx_id.clone(),
            dsp_domain: None,
            price: PriceValue::Encrypted { token: String::new() },
            ad_size: None,
            impression_id: None,
            campaign_id: None,
            bidder_name: None,
            publisher: None,
            bid_prices,
            url_param_count: params.len(),
            raw_url: record.url.clone(),
        };
        let (mut width, mut height) = (None, None);
        let mut currency = None;
        for (param, field) in &rule.metadata_params {
            let Some(value) = first(param).map(str::trim).filter(|v| !v.is_empty()) else {
                continue;
            };
            match field {
                MetaField::AdSize => n.ad_size = n.ad_size.or_else(|| value.parse().ok()),
                MetaField::AdWidth => width = value.parse::<u32>().ok(),
                MetaField::AdHeight => height = value.parse::<u32>().ok(),
                MetaField::CampaignId => n.campaign_id = Some(value.to_string()),
                MetaField::ImpressionId => n.impression_id = Some(value.to_string()),
                MetaField::BidderName => n.bidder_name = Some(value.to_string()),
                MetaField::Publisher => n.publisher = Some(value.to_string()),
                MetaField::Currency => currency = Some(value.to_ascii_uppercase()),
                MetaField::DspDomain => n.dsp_domain = host_of(value),
            }
        }
        if n.ad_size.is_none() {
            if let (Some(w), Some(h)) = (width, height) {
                n.ad_size = format!("{w}x{h}").parse().ok();
            }
        }
        if n.dsp_domain.is_none() {
            n.dsp_domain = embedded_callback_host(&params, host);
        }
        if let (PriceValue::Cleartext { currency: c, .. }, Some(cur)) = (&mut price, currency) {
            *c = cur;
        }
        n.price = price;
        return Some(n);
    }
    None
}

/// Host of the first parameter value that is itself an http(s) URL pointing
/// at a different site than the notification.
fn embedded_callback_host(params: &[(Cow<'_, str>, Cow<'_, str>)], nurl_host: &str) -> Option<String> {
    let own = registrable_domain(nurl_host);
    params
        .iter()
        .filter(|(_, v)| v.starts_with("http://") || v.starts_with("https://"))
        .filter_map(|(_, v)| host_of(v))
        .find(|h| registrable_domain(h) != own)
}

/// The cooperating (exchange, bidder) pair, with the bidder reduced to its
/// registrable domain.
pub fn pair_adx_dsp(n: &PriceNotification) -> Option<(String, String)> {
    n.dsp_domain.as_deref().map(|d| (n.adx_id.clone(), registrable_domain(d).to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const ROW_A: &str = "http://cpp.imp.mpx.mopub.com/imp?ad_domain=amazon.es&ads_creative_id=ID&bid_price=0.99&bidder_id=ID&bidder_name=..&charge_price=0.95&country=..&currency=USD&latency=0.116&mopub_id=ID&pub_name=..";
    pub(crate) const ROW_B: &str = "http://tags.mathtag.com/notify/js?exch=ruc&price=B6A3F3C19F50C7FD&3pck=http%3A%2F%2Fbeacon-eu2.rubiconproject.com%2Fbeacon%2Ft%2Fce48666c-6eb4-46db-b0e9-6f4155eb557d%2F";
    pub(crate) const ROW_C: &str = "http://adserver-ir-p.mythings.com/ads/admainrtb.aspx?googid=ID&width=300&height=250&cmpid=ID&gid=ID&mcpm=60&rtbwinprice=VLwbi4K21KFAAAm2ziqnOS_O5oNkFuuJw";

    fn record(url: &str) -> HttpRequestRecord {
        HttpRequestRecord::new(1_431_648_000_000, "u1", url).unwrap()
    }

    #[test]
    fn row_a_charge_not_bid() {
        let n = RuleSet::builtin().detect(&record(ROW_A)).unwrap();
        assert_eq!(n.adx_id, "mopub");
        assert_eq!(n.price, PriceValue::Cleartext { cpm: MicroCpm::from_micros(950_000), currency: "USD".into() });
        assert_eq!(n.bid_prices, vec![("bid_price".to_string(), "0.99".to_string())]);
        assert_eq!(pair_adx_dsp(&n), None);
    }

    #[test]
    fn row_b_encrypted_with_dsp_pair() {
        let n = RuleSet::builtin().detect(&record(ROW_B)).unwrap();
        assert_eq!(n.price, PriceValue::Encrypted { token: "B6A3F3C19F50C7FD".into() });
        assert_eq!(n.dsp_domain.as_deref(), Some("beacon-eu2.rubiconproject.com"));
        assert_eq!(pair_adx_dsp(&n), Some(("rubicon-relay".to_string(), "rubiconproject.com".to_string())));
    }

    #[test]
    fn row_c_encrypted_with_size() {
        let n = RuleSet::builtin().detect(&record(ROW_C)).unwrap();
        assert_eq!(n.adx_id, "mythings");
        assert_eq!(n.price, PriceValue::Encrypted { token: "VLwbi4K21KFAAAm2ziqnOS_O5oNkFuuJw".into() });
        assert_eq!(n.ad_size, Some(AdSize { width: 300, height: 250 }));
        assert_eq!(n.campaign_id.as_deref(), Some("ID"));
    }

    #[test]
    fn non_matching_host_is_ignored() {
        assert!(RuleSet::builtin().detect(&record("http://www.example.org/imp?price=1.5")).is_none());
    }

    #[test]
    fn matching_host_without_charge_param_is_ignored() {
        let url = "http://cpp.imp.mpx.mopub.com/imp?bid_price=0.99&currency=USD";
        assert!(RuleSet::builtin().detect(&record(url)).is_none());
    }

    #[test]
    fn price_classification() {
        assert_eq!(
            classify_price("0.95").unwrap(),
            PriceValue::Cleartext { cpm: MicroCpm::from_micros(950_000), currency: "USD".into() }
        );
        assert!(classify_price("VLwbi4K21KFAAAm2ziqnOS_O5oNkFuuJw").unwrap().is_encrypted());
        assert!(classify_price("B6A3F3C19F50C7FD").unwrap().is_encrypted());
        for bad in ["-3.1", "", "0", "0.0", "20000", "abc", "has space!!"] {
            assert!(matches!(classify_price(bad), Err(NurlError::UnrecognizedPrice(_))), "{bad}");
        }
    }

    #[test]
    fn percent_decoding_happens_once() {
        // %2541 decodes to the literal text "%41", not "A".
        let url = "http://tags.mathtag.com/notify/js?price=ABCDEFGH%2541";
        let n = RuleSet::builtin().detect(&record(url)).unwrap();
        assert_eq!(n.price, PriceValue::Encrypted { token: "ABCDEFGH%41".into() });
    }

    #[test]
    fn first_declared_charge_param_wins() {
        let rule = MacroRule {
            adx_id: "x".into(),
            host_pattern: "x.example".into(),
            price_params: vec![
                PriceParam { name: "p1".into(), tag: PriceTag::Charge },
                PriceParam { name: "p2".into(), tag: PriceTag::Charge },
            ],
            metadata_params: BTreeMap::new(),
        };
        let n = detect(&record("http://a.x.example/w?p2=2.0&p1=1.0"), &[rule]).unwrap();
        assert_eq!(n.price.cleartext_cpm(), Some(MicroCpm::from_micros(1_000_000)));
    }

    #[test]
    fn currency_from_metadata() {
        let url = "http://cpp.imp.mpx.mopub.com/imp?charge_price=1.5&currency=eur";
        let n = RuleSet::builtin().detect(&record(url)).unwrap();
        assert_eq!(n.price, PriceValue::Cleartext { cpm: MicroCpm::from_micros(1_500_000), currency: "EUR".into() });
    }

    #[test]
    fn rule_validation() {
        let mut rule = MacroRule {
            adx_id: "x".into(),
            host_pattern: "x.example".into(),
            price_params: vec![PriceParam { name: "b".into(), tag: PriceTag::Bid }],
            metadata_params: BTreeMap::new(),
        };
        assert!(rule.validate().is_err());
        rule.price_params.push(PriceParam { name: "c".into(), tag: PriceTag::Charge });
        assert!(rule.validate().is_ok());
        rule.host_pattern.clear();
        assert!(rule.validate().is_err());
    }

    #[test]
    fn rules_file_versioning() {
        let json = RuleSet::builtin().to_json_pretty();
        assert!(RuleSet::from_json(&json).is_ok());
        let bumped = json.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(matches!(RuleSet::from_json(&bumped), Err(NurlError::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn ad_size_parsing() {
        assert_eq!("320x50".parse::<AdSize>(), Ok(AdSize { width: 320, height: 50 }));
        assert!("320".parse::<AdSize>().is_err());
        assert!("0x50".parse::<AdSize>().is_err());
    }
}
