//! Per-notification feature vectors built causally from a user's request
//! history.

mod cookie_sync;
mod geo;
mod interests;
mod ua;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cookie_sync::{detect_cookie_sync, is_identifier_like, CookieSyncDetector};
pub use geo::{geo_lookup, GeoTable};
pub use interests::{infer_interests, is_valid_iab, IabMap, InterestProfile};
pub use ua::{parse_user_agent, DeviceProfile, DeviceType, Interaction, Os};

use crate::domain::{host_of, registrable_domain};
use crate::ingest::{Blacklist, DomainCategory, HttpRequestRecord};
use crate::nurl::{PriceNotification, RuleSet};

/// Placeholder for unknown categorical values in core features.
pub const OTHER: &str = "other";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bad reference table: {0}")]
    BadTable(String),
    #[error("no location for request at {0}")]
    MissingGeo(i64),
    #[error("no visited domain maps to an interest category")]
    EmptyProfile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TodBucket {
    #[serde(rename = "12am-9am")]
    Night,
    #[serde(rename = "9am-6pm")]
    Day,
    #[serde(rename = "6pm-12am")]
    Evening,
}

impl TodBucket {
    pub const ALL: [TodBucket; 3] = [TodBucket::Night, TodBucket::Day, TodBucket::Evening];

    pub fn from_hour(hour: u8) -> Self {
        match hour {
            0..=8 => TodBucket::Night,
            9..=17 => TodBucket::Day,
            _ => TodBucket::Evening,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TodBucket::Night => "12am-9am",
            TodBucket::Day => "9am-6pm",
            TodBucket::Evening => "6pm-12am",
        }
    }
}

impl fmt::Display for TodBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// UTC hour (0-23) and weekday (0 = Monday) of an epoch-millisecond instant.
pub fn hour_and_weekday(timestamp_ms: i64) -> (u8, u8) {
    let dt = DateTime::from_timestamp_millis(timestamp_ms).unwrap_or_default();
    (dt.hour() as u8, dt.weekday().num_days_from_monday() as u8)
}

/// The reduced, non-identifying feature set shared with the model service
/// and used by campaign setups.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreFeatures {
    pub interaction: Interaction,
    pub device_type: DeviceType,
    pub os: Os,
    pub city: String,
    pub tod_bucket: TodBucket,
    pub day_of_week: u8,
    pub hour_of_day: u8,
    pub ad_size: String,
    pub publisher_iab: String,
    pub adx_id: String,
}

/// Feature families used by group-level feature selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureGroup {
    #[serde(rename = "A")]
    Time,
    #[serde(rename = "B")]
    Http,
    #[serde(rename = "C")]
    Ad,
    #[serde(rename = "D")]
    Dsp,
    #[serde(rename = "E")]
    Publisher,
    #[serde(rename = "F")]
    UserHttp,
    #[serde(rename = "G")]
    Interests,
    #[serde(rename = "H")]
    Location,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 8] = [
        FeatureGroup::Time,
        FeatureGroup::Http,
        FeatureGroup::Ad,
        FeatureGroup::Dsp,
        FeatureGroup::Publisher,
        FeatureGroup::UserHttp,
        FeatureGroup::Interests,
        FeatureGroup::Location,
    ];

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let i = (c.to_ascii_uppercase() as u32).checked_sub('A' as u32)? as usize;
        Self::ALL.get(i).copied()
    }

    pub fn description(self) -> &'static str {
        match self {
            FeatureGroup::Time => "time",
            FeatureGroup::Http => "http request",
            FeatureGroup::Ad => "ad",
            FeatureGroup::Dsp => "dsp",
            FeatureGroup::Publisher => "publisher",
            FeatureGroup::UserHttp => "user http stats",
            FeatureGroup::Interests => "interests",
            FeatureGroup::Location => "locations",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// A single model input column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnDef {
    pub name: &'static str,
    pub group: FeatureGroup,
    pub kind: ColumnKind,
}

const fn num(name: &'static str, group: FeatureGroup) -> ColumnDef {
    ColumnDef { name, group, kind: ColumnKind::Numeric }
}

const fn cat(name: &'static str, group: FeatureGroup) -> ColumnDef {
    ColumnDef { name, group, kind: ColumnKind::Categorical }
}

const IAB_COLUMNS: [&str; 26] = [
    "iab1", "iab2", "iab3", "iab4", "iab5", "iab6", "iab7", "iab8", "iab9", "iab10", "iab11", "iab12", "iab13",
    "iab14", "iab15", "iab16", "iab17", "iab18", "iab19", "iab20", "iab21", "iab22", "iab23", "iab24", "iab25",
    "iab26",
];

/// Every column a [`FeatureVector`] expands into, in a fixed order.
pub fn columns() -> &'static [ColumnDef] {
    use FeatureGroup::*;
    static COLUMNS: std::sync::OnceLock<Vec<ColumnDef>> = std::sync::OnceLock::new();
    COLUMNS.get_or_init(|| {
        let mut v = vec![
            num("hour_of_day", Time),
            cat("day_of_week", Time),
            cat("tod_bucket", Time),
            cat("device_type", Http),
            cat("os", Http),
            cat("interaction", Http),
            num("url_param_count", Http),
            num("request_bytes", Http),
            num("request_duration_ms", Http),
            cat("ad_size", Ad),
            cat("adx_id", Ad),
            num("campaign_popularity", Ad),
            cat("dsp_domain", Dsp),
            num("advertiser_requests", Dsp),
            num("advertiser_bytes", Dsp),
            num("advertiser_avg_duration_ms", Dsp),
            cat("publisher_iab", Publisher),
            num("beacon_count", UserHttp),
            num("cookie_sync_count", UserHttp),
            num("publishers_visited", UserHttp),
            num("total_bytes", UserHttp),
            num("total_requests", UserHttp),
            num("avg_bytes_per_request", UserHttp),
            num("total_duration_ms", UserHttp),
            num("avg_duration_per_request_ms", UserHttp),
        ];
        v.extend(IAB_COLUMNS.iter().map(|n| num(n, Interests)));
        v.push(cat("city", Location));
        v.push(num("unique_locations", Location));
        v
    })
}

/// One column value.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(String),
    Missing,
}

/// Running per-user HTTP statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UserAggregates {
    pub beacon_count: u64,
    pub cookie_sync_count: u64,
    pub publishers_visited: u64,
    pub total_bytes: u64,
    pub total_requests: u64,
    pub total_duration_ms: u64,
}

impl UserAggregates {
    pub fn avg_bytes_per_request(&self) -> f64 {
        if self.total_requests == 0 {
            0.0
        } else {
            self.total_bytes as f64 / self.total_requests as f64
        }
    }

    pub fn avg_duration_per_request(&self) -> f64 {
        if self.total_requests == 0 {
            0.0
        } else {
            self.total_duration_ms as f64 / self.total_requests as f64
        }
    }

    /// Combines aggregates of disjoint shards. Counters add, so a publisher
    /// visited in two shards is counted twice.
    pub fn merge(&self, other: &UserAggregates) -> UserAggregates {
        UserAggregates {
            beacon_count: self.beacon_count + other.beacon_count,
            cookie_sync_count: self.cookie_sync_count + other.cookie_sync_count,
            publishers_visited: self.publishers_visited + other.publishers_visited,
            total_bytes: self.total_bytes + other.total_bytes,
            total_requests: self.total_requests + other.total_requests,
            total_duration_ms: self.total_duration_ms + other.total_duration_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserStats {
    pub requests: u64,
    pub bytes: u64,
    pub total_duration_ms: u64,
}

impl AdvertiserStats {
    pub fn avg_duration_ms(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.total_duration_ms as f64 / self.requests as f64
        }
    }
}

/// Everything known about one price notification at the moment it fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub hour_of_day: u8,
    pub day_of_week: u8,
    pub tod_bucket: TodBucket,

    pub device: DeviceProfile,
    pub url_param_count: Option<u64>,
    pub request_bytes: Option<u64>,
    pub request_duration_ms: Option<u64>,

    pub ad_size: Option<String>,
    pub adx_id: String,
    pub campaign_popularity: Option<u64>,

    pub dsp_domain: Option<String>,
    pub advertiser: Option<AdvertiserStats>,

    pub publisher_iab: Option<String>,

    pub user: Option<UserAggregates>,

    pub interests: Option<InterestProfile>,

    pub city: Option<String>,
    pub unique_locations: Option<u64>,
}

impl FeatureVector {
    /// Projects onto the reduced core set; unknown categoricals become
    /// `"other"`.
    pub fn project(&self) -> CoreFeatures {
        CoreFeatures {
            interaction: self.device.interaction,
            device_type: self.device.device_type,
            os: self.device.os,
            city: self.city.clone().unwrap_or_else(|| OTHER.into()),
            tod_bucket: self.tod_bucket,
            day_of_week: self.day_of_week,
            hour_of_day: self.hour_of_day,
            ad_size: self.ad_size.clone().unwrap_or_else(|| OTHER.into()),
            publisher_iab: self.publisher_iab.clone().unwrap_or_else(|| OTHER.into()),
            adx_id: self.adx_id.clone(),
        }
    }

    /// Values for [`columns`], in order.
    pub fn cells(&self) -> Vec<Cell> {
        let n = |v: Option<f64>| v.map_or(Cell::Missing, Cell::Num);
        let c = |v: Option<&str>| v.map_or(Cell::Missing, |s| Cell::Cat(s.to_string()));
        let u = self.user.as_ref();
        let a = self.advertiser.as_ref();
        let mut out = vec![
            Cell::Num(f64::from(self.hour_of_day)),
            Cell::Cat(self.day_of_week.to_string()),
            Cell::Cat(self.tod_bucket.as_str().into()),
            Cell::Cat(self.device.device_type.as_str().into()),
            Cell::Cat(self.device.os.as_str().into()),
            Cell::Cat(self.device.interaction.as_str().into()),
            n(self.url_param_count.map(|v| v as f64)),
            n(self.request_bytes.map(|v| v as f64)),
            n(self.request_duration_ms.map(|v| v as f64)),
            c(self.ad_size.as_deref()),
            Cell::Cat(self.adx_id.clone()),
            n(self.campaign_popularity.map(|v| v as f64)),
            c(self.dsp_domain.as_deref()),
            n(a.map(|a| a.requests as f64)),
            n(a.map(|a| a.bytes as f64)),
            n(a.map(AdvertiserStats::avg_duration_ms)),
            c(self.publisher_iab.as_deref()),
            n(u.map(|u| u.beacon_count as f64)),
            n(u.map(|u| u.cookie_sync_count as f64)),
            n(u.map(|u| u.publishers_visited as f64)),
            n(u.map(|u| u.total_bytes as f64)),
            n(u.map(|u| u.total_requests as f64)),
            n(u.map(UserAggregates::avg_bytes_per_request)),
            n(u.map(|u| u.total_duration_ms as f64)),
            n(u.map(UserAggregates::avg_duration_per_request)),
        ];
        match &self.interests {
            Some(p) => {
                let mut w = [0.0f64; 26];
                for (code, weight) in &p.weights {
                    let main = code.trim_start_matches("IAB").split('-').next().unwrap_or_default();
                    if let Ok(i @ 1..=26) = main.parse::<usize>() {
                        w[i - 1] += weight;
                    }
                }
                out.extend(w.into_iter().map(Cell::Num));
            }
            None => out.extend(std::iter::repeat_n(Cell::Missing, 26)),
        }
        out.push(c(self.city.as_deref()));
        out.push(n(self.unique_locations.map(|v| v as f64)));
        out
    }
}

impl From<&CoreFeatures> for FeatureVector {
    fn from(core: &CoreFeatures) -> Self {
        let known = |s: &str| (s != OTHER).then(|| s.to_string());
        FeatureVector {
            hour_of_day: core.hour_of_day,
            day_of_week: core.day_of_week,
            tod_bucket: core.tod_bucket,
            device: DeviceProfile { device_type: core.device_type, os: core.os, interaction: core.interaction },
            url_param_count: None,
            request_bytes: None,
            request_duration_ms: None,
            ad_size: known(&core.ad_size),
            adx_id: core.adx_id.clone(),
            campaign_popularity: None,
            dsp_domain: None,
            advertiser: None,
            publisher_iab: known(&core.publisher_iab),
            user: None,
            interests: None,
            city: known(&core.city),
            unique_locations: None,
        }
    }
}

/// Lookup tables the extractor consults.
#[derive(Debug, Clone)]
pub struct ReferenceData {
    pub blacklist: Blacklist,
    pub rules: RuleSet,
    pub geo: GeoTable,
    pub iab: IabMap,
    /// Fail with [`FeatureError::MissingGeo`] instead of leaving `city` empty.
    pub require_geo: bool,
}

impl ReferenceData {
    pub fn builtin() -> Self {
        ReferenceData {
            blacklist: Blacklist::builtin(),
            rules: RuleSet::builtin(),
            geo: GeoTable::new(),
            iab: IabMap::new(),
            require_geo: false,
        }
    }
}

fn is_beacon(record: &HttpRequestRecord, category: DomainCategory) -> bool {
    if !matches!(category, DomainCategory::Advertising | DomainCategory::Analytics) || record.bytes_in > 1024 {
        return false;
    }
    let path = record
        .url
        .split_once("://")
        .map_or(record.url.as_str(), |(_, r)| r)
        .split(['?', '#'])
        .next()
        .unwrap_or_default()
        .to_ascii_lowercase();
    [".gif", ".png", ".jpg", ".jpeg", ".webp"].iter().any(|e| path.ends_with(e))
        || path.contains("pixel")
        || path.contains("beacon")
}

/// Incremental state for one user; only sees requests up to "now".
#[derive(Debug, Clone, Default)]
pub struct UserContext {
    aggregates: UserAggregates,
    publishers: HashSet<String>,
    iab_counts: BTreeMap<String, u64>,
    cities: BTreeSet<String>,
    sync: CookieSyncDetector,
    campaigns: HashMap<String, u64>,
    advertisers: HashMap<String, AdvertiserStats>,
}

impl UserContext {
    pub fn aggregates(&self) -> UserAggregates {
        UserAggregates { cookie_sync_count: self.sync.count(), ..self.aggregates }
    }

    pub fn interests(&self) -> Option<InterestProfile> {
        InterestProfile::from_counts(&self.iab_counts)
    }
}

/// A detected notification together with its features.
#[derive(Debug)]
pub struct Extracted {
    pub record_index: usize,
    pub notification: PriceNotification,
    pub features: Result<FeatureVector, FeatureError>,
}

/// Builds feature vectors from time-ordered user streams.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub refs: ReferenceData,
}

impl FeatureExtractor {
    pub fn new(refs: ReferenceData) -> Self {
        FeatureExtractor { refs }
    }

    fn city_of(&self, record: &HttpRequestRecord) -> Option<String> {
        record
            .city
            .clone()
            .filter(|c| !c.is_empty())
            .or_else(|| record.client_ip.and_then(|ip| geo_lookup(ip, &self.refs.geo)))
    }

    /// Folds one request into the context and returns the notification it
    /// carries, if any.
    pub fn observe(&self, ctx: &mut UserContext, record: &HttpRequestRecord) -> Option<PriceNotification> {
        let category = self.refs.blacklist.classify(&record.host);
        let agg = &mut ctx.aggregates;
        agg.total_requests += 1;
        agg.total_bytes += record.bytes_out + record.bytes_in;
        agg.total_duration_ms += record.duration_ms;
        if is_beacon(record, category) {
            agg.beacon_count += 1;
        }
        ctx.sync.observe(record);
        if category == DomainCategory::Rest {
            let site = registrable_domain(&record.host);
            if !ctx.publishers.contains(site) {
                ctx.publishers.insert(site.to_string());
                agg.publishers_visited += 1;
            }
            if let Some(iab) = self.refs.iab.lookup(&record.host) {
                *ctx.iab_counts.entry(iab.to_string()).or_default() += 1;
            }
        } else {
            let e = ctx.advertisers.entry(registrable_domain(&record.host).to_string()).or_default();
            e.requests += 1;
            e.bytes += record.bytes_out + record.bytes_in;
            e.total_duration_ms += record.duration_ms;
        }
        if let Some(city) = self.city_of(record) {
            if !ctx.cities.contains(&city) {
                ctx.cities.insert(city);
            }
        }
        let n = self.refs.rules.detect(record)?;
        if let Some(c) = &n.campaign_id {
            *ctx.campaigns.entry(c.clone()).or_default() += 1;
        }
        Some(n)
    }

    /// Features of `n` (carried by `record`) given everything observed so far.
    pub fn features(
        &self,
        ctx: &UserContext,
        n: &PriceNotification,
        record: &HttpRequestRecord,
    ) -> Result<FeatureVector, FeatureError> {
        let (hour, dow) = hour_and_weekday(n.timestamp_ms);
        let city = self.city_of(record);
        if city.is_none() && self.refs.require_geo {
            return Err(FeatureError::MissingGeo(n.timestamp_ms));
        }
        let advertiser_key = n
            .dsp_domain
            .as_deref()
            .and_then(host_of)
            .map(|h| registrable_domain(&h).to_string())
            .unwrap_or_else(|| registrable_domain(&record.host).to_string());
        let publisher_iab = n
            .publisher
            .as_deref()
            .and_then(host_of)
            .and_then(|h| self.refs.iab.lookup(&h).map(str::to_string))
            .or_else(|| {
                record.referer.as_deref().and_then(host_of).and_then(|h| self.refs.iab.lookup(&h).map(str::to_string))
            });
        Ok(FeatureVector {
            hour_of_day: hour,
            day_of_week: dow,
            tod_bucket: TodBucket::from_hour(hour),
            device: parse_user_agent(&record.user_agent),
            url_param_count: Some(n.url_param_count as u64),
            request_bytes: Some(record.bytes_out),
            request_duration_ms: Some(record.duration_ms),
            ad_size: n.ad_size.map(|s| s.to_string()),
            adx_id: n.adx_id.clone(),
            campaign_popularity: n.campaign_id.as_ref().map(|c| ctx.campaigns.get(c).copied().unwrap_or(0)),
            dsp_domain: n.dsp_domain.as_deref().and_then(host_of).map(|h| registrable_domain(&h).to_string()),
            advertiser: Some(ctx.advertisers.get(&advertiser_key).copied().unwrap_or_default()),
            publisher_iab,
            user: Some(ctx.aggregates()),
            interests: ctx.interests(),
            city,
            unique_locations: Some(ctx.cities.len() as u64),
        })
    }

    /// Runs one user's time-ordered stream, yielding every notification with
    /// features computed from the requests up to and including it.
    pub fn extract_user(&self, records: &[HttpRequestRecord]) -> Vec<Extracted> {
        let mut ctx = UserContext::default();
        let mut out = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if let Some(n) = self.observe(&mut ctx, r) {
                let features = self.features(&ctx, &n, r);
                out.push(Extracted { record_index: i, notification: n, features });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tod_buckets() {
        let b: Vec<_> = (0..24).map(TodBucket::from_hour).collect();
        assert!(b[..9].iter().all(|&x| x == TodBucket::Night));
        assert!(b[9..18].iter().all(|&x| x == TodBucket::Day));
        assert!(b[18..].iter().all(|&x| x == TodBucket::Evening));
        assert_eq!(serde_json::to_string(&TodBucket::Day).unwrap(), "\"9am-6pm\"");
    }

    #[test]
    fn weekday_is_utc_monday_based() {
        // 2016-01-04 was a Monday.
        let ms = chrono::NaiveDate::from_ymd_opt(2016, 1, 4)
            .unwrap()
            .and_hms_opt(23, 30, 0)
            .unwrap()
            .and_utc()
            .timestamp_millis();
        assert_eq!(hour_and_weekday(ms), (23, 0));
        assert_eq!(hour_and_weekday(ms + 3_600_000), (0, 1));
    }

    #[test]
    fn group_letters_round_trip() {
        for g in FeatureGroup::ALL {
            assert_eq!(FeatureGroup::from_letter(g.letter()), Some(g));
        }
        assert_eq!(FeatureGroup::Location.letter(), 'H');
        assert_eq!(FeatureGroup::from_letter('Z'), None);
    }

    #[test]
    fn cells_match_columns() {
        let core = CoreFeatures {
            interaction: Interaction::App,
            device_type: DeviceType::Smartphone,
            os: Os::Android,
            city: "Madrid".into(),
            tod_bucket: TodBucket::Day,
            day_of_week: 2,
            hour_of_day: 10,
            ad_size: "320x50".into(),
            publisher_iab: OTHER.into(),
            adx_id: "mopub".into(),
        };
        let fv = FeatureVector::from(&core);
        assert_eq!(fv.cells().len(), columns().len());
        assert_eq!(fv.publisher_iab, None);
        assert_eq!(fv.project(), core);
    }

    #[test]
    fn aggregates_merge_is_associative() {
        let a = UserAggregates { beacon_count: 1, total_bytes: 10, total_requests: 2, ..Default::default() };
        let b = UserAggregates { cookie_sync_count: 3, total_bytes: 5, total_requests: 1, ..Default::default() };
        let c = UserAggregates { publishers_visited: 4, total_duration_ms: 9, ..Default::default() };
        assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
        assert_eq!(a.merge(&b).avg_bytes_per_request(), 5.0);
    }
}
