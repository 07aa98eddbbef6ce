//! Synthetic RTB marketplace: simulated users browse publishers, every ad
//! slot is sold in a second-price auction, and winning prices reach the log
//! as nURLs, cleartext or sealed depending on the exchange.

mod auction;
mod sealer;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;

use ipnet::IpNet;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use auction::{run_auction, AuctionOutcome};
pub use sealer::{Sealer, TOKEN_CHARS};

use crate::features::{
    is_valid_iab, CoreFeatures, DeviceType, FeatureExtractor, GeoTable, IabMap, Interaction, Os, ReferenceData,
    TodBucket,
};
use crate::ingest::{partition_by_user, HttpRequestRecord};
use crate::model::{fit_binning, log_normalize, ModelError, PriceBinning, PriceEstimator, TrainingRow};
use crate::money::MicroCpm;
use crate::nurl::{PriceNotification, PriceValue};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("an auction needs at least two bids, got {0}")]
    TooFewBids(usize),
    #[error("bid {0} is not positive")]
    NonPositiveBid(MicroCpm),
    #[error("token {0:?} was not sealed with this key")]
    BadToken(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationPolicy {
    Cleartext,
    Encrypted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublisherSpec {
    pub domain: String,
    pub iab: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdxSpec {
    pub adx_id: String,
    pub policy: NotificationPolicy,
    /// One of [`TEMPLATES`].
    pub template: String,
    /// Relative share of ad slots sold through this exchange.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspSpec {
    pub domain: String,
    /// Multiplier on the market price this bidder is willing to pay.
    pub margin: f64,
    /// Probability of bidding on a given slot.
    pub participation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitySpec {
    pub name: String,
    pub cidr: IpNet,
}

/// Market price of a slot: base CPM times one multiplier per feature level,
/// with lognormal noise applied to each bid.
///
/// Multiplier keys are `interaction`, `os`, `device_type`, `city`, `tod`,
/// `dow` (`weekday`/`weekend`), `ad_size`, `publisher_iab` and `adx_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceLaw {
    pub base_cpm: f64,
    pub sigma: f64,
    pub multipliers: BTreeMap<String, BTreeMap<String, f64>>,
}

fn levels(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

impl Default for PriceLaw {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert("interaction".into(), levels(&[("app", 2.6), ("mobile_web", 1.0)]));
        m.insert("os".into(), levels(&[("ios", 1.15), ("android", 1.0)]));
        m.insert("device_type".into(), levels(&[("tablet", 1.05), ("smartphone", 1.0)]));
        m.insert("city".into(), levels(&[("Madrid", 2.05), ("Barcelona", 1.61), ("Valencia", 1.27), ("Sevilla", 1.0)]));
        m.insert("tod".into(), levels(&[("12am-9am", 0.9), ("9am-6pm", 1.0), ("6pm-12am", 1.12)]));
        m.insert("dow".into(), levels(&[("weekday", 1.0), ("weekend", 1.05)]));
        m.insert("ad_size".into(), levels(&[("320x50", 0.4), ("300x250", 2.7), ("320x480", 18.3)]));
        m.insert(
            "publisher_iab".into(),
            levels(&[
                ("IAB1", 0.9),
                ("IAB3", 1.12),
                ("IAB7", 1.08),
                ("IAB9", 0.95),
                ("IAB12", 0.92),
                ("IAB17", 1.02),
                ("IAB19", 1.15),
            ]),
        );
        m.insert(
            "adx_id".into(),
            levels(&[("mopub", 1.0), ("openx", 1.03), ("rubicon", 0.97), ("doubleclick", 1.06), ("pulsepoint", 0.95)]),
        );
        PriceLaw { base_cpm: 0.3, sigma: 0.3, multipliers: m }
    }
}

fn dow_level(day_of_week: u8) -> &'static str {
    if day_of_week >= 5 {
        "weekend"
    } else {
        "weekday"
    }
}

impl PriceLaw {
    /// Noise-free price for the slot.
    pub fn market_price(&self, core: &CoreFeatures) -> f64 {
        let levels = [
            ("interaction", core.interaction.as_str()),
            ("os", core.os.as_str()),
            ("device_type", core.device_type.as_str()),
            ("city", core.city.as_str()),
            ("tod", core.tod_bucket.as_str()),
            ("dow", dow_level(core.day_of_week)),
            ("ad_size", core.ad_size.as_str()),
            ("publisher_iab", core.publisher_iab.as_str()),
            ("adx_id", core.adx_id.as_str()),
        ];
        let mut p = self.base_cpm;
        for (feature, level) in levels {
            if let Some(f) = self.multipliers.get(feature).and_then(|m| m.get(level)) {
                p *= f;
            }
        }
        p
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.base_cpm > 0.0 && self.base_cpm.is_finite()) {
            return bad(format!("base_cpm {} must be positive", self.base_cpm));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be non-negative", self.sigma));
        }
        for (feature, levels) in &self.multipliers {
            for (level, f) in levels {
                if !(*f > 0.0 && f.is_finite()) {
                    return bad(format!("multiplier {feature}={level} is {f}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub n_users: usize,
    pub days: u32,
    /// Epoch milliseconds of the first simulated midnight (UTC).
    pub start_ms: i64,
    pub sessions_per_day: f64,
    pub max_slots_per_session: u32,
    pub publishers: Vec<PublisherSpec>,
    pub adxs: Vec<AdxSpec>,
    pub dsps: Vec<DspSpec>,
    pub cities: Vec<CitySpec>,
    /// `(size, weight)`.
    pub ad_sizes: Vec<(String, f64)>,
    pub price_law: PriceLaw,
}

impl Default for SimConfig {
    fn default() -> Self {
        let publishers = [
            ("artgallery.example", "IAB1"),
            ("moviebuzz.example", "IAB1"),
            ("marketwatcher.example", "IAB3"),
            ("startupdaily.example", "IAB3"),
            ("healthyliving.example", "IAB7"),
            ("craftcorner.example", "IAB9"),
            ("dailynews.example", "IAB12"),
            ("citytimes.example", "IAB12"),
            ("goalzone.example", "IAB17"),
            ("runnersworld.example", "IAB17"),
            ("gadgetlab.example", "IAB19"),
            ("devforum.example", "IAB19"),
        ]
        .into_iter()
        .map(|(d, i)| PublisherSpec { domain: d.into(), iab: i.into() })
        .collect();
        let adx = |id: &str, policy, weight| AdxSpec { adx_id: id.into(), policy, template: id.into(), weight };
        let adxs = vec![
            adx("mopub", NotificationPolicy::Cleartext, 0.5),
            adx("openx", NotificationPolicy::Encrypted, 0.15),
            adx("rubicon", NotificationPolicy::Encrypted, 0.12),
            adx("doubleclick", NotificationPolicy::Encrypted, 0.15),
            adx("pulsepoint", NotificationPolicy::Encrypted, 0.08),
        ];
        let dsp = |d: &str, margin, participation| DspSpec { domain: d.into(), margin, participation };
        let dsps = vec![
            dsp("dsp-alpha.example", 1.0, 0.9),
            dsp("dsp-beta.example", 0.96, 0.9),
            dsp("dsp-gamma.example", 0.92, 0.8),
            dsp("dsp-delta.example", 0.88, 0.7),
        ];
        let cities = [
            ("Madrid", "10.1.0.0/16"),
            ("Barcelona", "10.2.0.0/16"),
            ("Valencia", "10.3.0.0/16"),
            ("Sevilla", "10.4.0.0/16"),
        ]
        .into_iter()
        .map(|(n, c)| CitySpec { name: n.into(), cidr: c.parse().expect("valid cidr") })
        .collect();
        SimConfig {
            seed: 0,
            n_users: 200,
            days: 7,
            // 2016-01-04, a Monday.
            start_ms: 1_451_865_600_000,
            sessions_per_day: 3.0,
            max_slots_per_session: 3,
            publishers,
            adxs,
            dsps,
            cities,
            ad_sizes: vec![("320x50".into(), 1.0), ("300x250".into(), 1.0), ("320x480".into(), 1.0)],
            price_law: PriceLaw::default(),
        }
    }
}

/// Templates the simulated exchanges render nURLs from.
pub const TEMPLATES: [&str; 5] = ["mopub", "openx", "rubicon", "doubleclick", "pulsepoint"];

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.dsps.len() < 2 {
            return bad(format!("need at least 2 DSPs for second-price auctions, got {}", self.dsps.len()));
        }
        if self.n_users == 0 || self.days == 0 {
            return bad("n_users and days must be positive".into());
        }
        if !(self.sessions_per_day > 0.0 && self.sessions_per_day.is_finite()) || self.max_slots_per_session == 0 {
            return bad("sessions_per_day and max_slots_per_session must be positive".into());
        }
        if self.publishers.is_empty() || self.adxs.is_empty() || self.cities.is_empty() || self.ad_sizes.is_empty() {
            return bad("publishers, adxs, cities and ad_sizes must be non-empty".into());
        }
        for p in &self.publishers {
            if !is_valid_iab(&p.iab) {
                return bad(format!("publisher {} has invalid IAB {}", p.domain, p.iab));
            }
        }
        for a in &self.adxs {
            if !TEMPLATES.contains(&a.template.as_str()) {
                return bad(format!("adx {} references unknown template {:?}", a.adx_id, a.template));
            }
            if !(a.weight > 0.0 && a.weight.is_finite()) {
                return bad(format!("adx {} weight must be positive", a.adx_id));
            }
        }
        for d in &self.dsps {
            if !(d.margin > 0.0 && d.margin.is_finite()) || !(0.0..=1.0).contains(&d.participation) {
                return bad(format!("dsp {} has invalid margin or participation", d.domain));
            }
        }
        for (size, w) in &self.ad_sizes {
            if size.parse::<crate::nurl::AdSize>().is_err() || !(*w > 0.0 && w.is_finite()) {
                return bad(format!("bad ad size entry {size:?}"));
            }
        }
        for c in &self.cities {
            if !matches!(c.cidr, IpNet::V4(_)) || c.cidr.prefix_len() > 30 {
                return bad(format!("city {} needs an IPv4 prefix of at most /30", c.name));
            }
        }
        self.price_law.validate()
    }

    pub fn geo_table(&self) -> GeoTable {
        let mut t = GeoTable::new();
        for c in &self.cities {
            t.insert(c.cidr, c.name.clone());
        }
        t
    }

    pub fn iab_map(&self) -> IabMap {
        let mut m = IabMap::new();
        for p in &self.publishers {
            m.insert(&p.domain, &p.iab).expect("validated IAB code");
        }
        m
    }

    /// Reference tables that let the analyzer see what the simulator saw.
    pub fn reference_data(&self) -> ReferenceData {
        ReferenceData { geo: self.geo_table(), iab: self.iab_map(), ..ReferenceData::builtin() }
    }

    pub fn geo_csv(&self) -> String {
        let mut s = String::from("cidr,city\n");
        for c in &self.cities {
            s.push_str(&format!("{},{}\n", c.cidr, c.name));
        }
        s
    }

    pub fn iab_csv(&self) -> String {
        let mut s = String::from("domain,iab_code\n");
        for p in &self.publishers {
            s.push_str(&format!("{},{}\n", p.domain, p.iab));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedEntry {
    pub cpm: MicroCpm,
    /// Class under the ledger's reference binning.
    pub class: Option<usize>,
}

/// True prices behind every sealed token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SealedLedger {
    pub binning: Option<PriceBinning>,
    pub entries: BTreeMap<String, SealedEntry>,
}

impl SealedLedger {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_path(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| SimError::InvalidConfig(format!("sealed ledger: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    /// Returns the sealed price itself.
    TruePrice,
    /// Returns the representative of the sealed price's reference class.
    TrueClass,
}

/// A perfect model backed by the sealed ledger, for tests.
#[derive(Debug, Clone, Copy)]
pub struct LedgerEstimator<'a> {
    pub ledger: &'a SealedLedger,
    pub mode: LedgerMode,
}

impl PriceEstimator for LedgerEstimator<'_> {
    fn estimate(&self, n: &PriceNotification, _f: &crate::features::FeatureVector) -> Result<MicroCpm, ModelError> {
        let token = match &n.price {
            PriceValue::Cleartext { cpm, .. } => return Ok(*cpm),
            PriceValue::Encrypted { token } => token,
        };
        let entry = self.ledger.entries.get(token).ok_or_else(|| ModelError::UnknownToken(token.clone()))?;
        match (self.mode, &self.ledger.binning, entry.class) {
            (LedgerMode::TruePrice, _, _) => Ok(entry.cpm),
            (LedgerMode::TrueClass, Some(b), Some(c)) => Ok(b.representative(c)),
            (LedgerMode::TrueClass, ..) => Err(ModelError::UnknownToken(token.clone())),
        }
    }
}

/// One logged auction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionRecord {
    pub impression_id: String,
    pub adx_id: String,
    pub bids: Vec<(String, MicroCpm)>,
    pub winner: String,
    pub winning_bid: MicroCpm,
    pub charge: MicroCpm,
    pub encrypted: bool,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Every request, ordered by timestamp then user.
    pub records: Vec<HttpRequestRecord>,
    pub ledger: SealedLedger,
    /// Features as the analyzer extracts them, paired with the true charge.
    pub ground_truth: Vec<TrainingRow>,
    pub auctions: Vec<AuctionRecord>,
    pub geo_csv: String,
    pub iab_csv: String,
}

impl SimOutput {
    pub fn weblog_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_json_line());
            s.push('\n');
        }
        s
    }

    /// Writes `weblog.jsonl`, `sealed_ledger.json`, `ground_truth.jsonl`,
    /// `auctions.jsonl`, `geo.csv` and `iab_map.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("weblog.jsonl"), self.weblog_jsonl())?;
        let ledger = serde_json::to_string_pretty(&self.ledger).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("sealed_ledger.json"), ledger)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("ground_truth.jsonl"))?);
        for row in &self.ground_truth {
            serde_json::to_writer(&mut f, row).map_err(std::io::Error::other)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("auctions.jsonl"))?);
        for a in &self.auctions {
            serde_json::to_writer(&mut f, a).map_err(std::io::Error::other)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        std::fs::write(dir.join("geo.csv"), &self.geo_csv)?;
        std::fs::write(dir.join("iab_map.csv"), &self.iab_csv)?;
        Ok(())
    }
}

/// Relative activity per UTC hour.
const DIURNAL: [f64; 24] = [
    0.3, 0.2, 0.1, 0.1, 0.1, 0.2, 0.4, 0.8, 1.0, 1.1, 1.0, 1.0, 1.2, 1.1, 1.0, 1.0, 1.1, 1.2, 1.4, 1.6, 1.7, 1.6, 1.2,
    0.7,
];

fn user_agent(os: Os, tablet: bool, app: bool) -> &'static str {
    match (os, tablet, app) {
        (Os::Ios, false, true) => "MyApp/1.0 CFNetwork/711.4.6 Darwin/14.0.0",
        (Os::Ios, true, true) => {
            "Mozilla/5.0 (iPad; CPU OS 9_3_2 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Mobile/13F69"
        }
        (Os::Ios, false, false) => {
            "Mozilla/5.0 (iPhone; CPU iPhone OS 9_3_2 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Version/9.0 Mobile/13F69 Safari/601.1"
        }
        (Os::Ios, true, false) => {
            "Mozilla/5.0 (iPad; CPU OS 9_3 like Mac OS X) AppleWebKit/601.1.46 (KHTML, like Gecko) Version/9.0 Mobile/13E234 Safari/601.1"
        }
        (_, false, true) => "Dalvik/2.1.0 (Linux; U; Android 6.0.1; SM-G920F Build/MMB29K)",
        (_, true, true) => "Dalvik/2.1.0 (Linux; U; Android 5.0.2; SM-T530 Build/LRX22G)",
        (_, false, false) => {
            "Mozilla/5.0 (Linux; Android 5.1; SM-G925F Build/LMY47X) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/46.0.2490.76 Mobile Safari/537.36"
        }
        (_, true, false) => {
            "Mozilla/5.0 (Linux; Android 5.0.2; SM-T530 Build/LRX22G) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/45.0.2454.84 Safari/537.36"
        }
    }
}

struct Slot<'a> {
    price: String,
    bid: MicroCpm,
    campaign_id: String,
    impression_id: String,
    dsp: &'a str,
    publisher: &'a str,
    size: &'a str,
}

fn render_nurl(template: &str, s: &Slot<'_>, encrypted: bool) -> String {
    let (w, h) = s.size.split_once('x').unwrap_or(("0", "0"));
    let mut q = url::form_urlencoded::Serializer::new(String::new());
    let base = match template {
        "mopub" => {
            q.append_pair("ads_creative_id", &s.campaign_id);
            if !encrypted {
                q.append_pair("bid_price", &s.bid.to_string());
            }
            q.append_pair("bidder_domain", s.dsp)
                .append_pair("charge_price", &s.price)
                .append_pair("currency", "USD")
                .append_pair("mopub_id", &s.impression_id)
                .append_pair("pub_name", s.publisher)
                .append_pair("ad_size", s.size);
            "http://cpp.imp.mpx.mopub.com/imp"
        }
        "openx" => {
            q.append_pair("wp", &s.price)
                .append_pair("cid", &s.campaign_id)
                .append_pair("dsp", s.dsp)
                .append_pair("imp", &s.impression_id)
                .append_pair("pub", s.publisher)
                .append_pair("sz", s.size);
            "http://ads.openx-sim.example/w/1.0/win"
        }
        "rubicon" => {
            q.append_pair("price", &s.price)
                .append_pair("campaign", &s.campaign_id)
                .append_pair("cb", &format!("http://{}/rtb/cb", s.dsp))
                .append_pair("impid", &s.impression_id)
                .append_pair("site", s.publisher)
                .append_pair("w", w)
                .append_pair("h", h);
            "http://beacon.rubicon-sim.example/win"
        }
        "doubleclick" => {
            q.append_pair("winning_price", &s.price)
                .append_pair("adgroup", &s.campaign_id)
                .append_pair("buyer", s.dsp)
                .append_pair("iid", &s.impression_id)
                .append_pair("size", s.size)
                .append_pair("url", &format!("http://{}/", s.publisher));
            "http://ad.doubleclick-sim.example/pagead/adview"
        }
        _ => {
            q.append_pair("wp", &s.price)
                .append_pair("adsize", s.size)
                .append_pair("bidder", s.dsp)
                .append_pair("crid", &s.campaign_id)
                .append_pair("pid", &s.impression_id)
                .append_pair("pub", s.publisher);
            "http://tag.pulsepoint-sim.example/win"
        }
    };
    format!("{base}?{}", q.finish())
}

fn random_ip<R: Rng>(net: &IpNet, rng: &mut R) -> IpAddr {
    let IpNet::V4(v4) = net else { unreachable!("validated as IPv4") };
    let base = u32::from(v4.network());
    let span = 1u32 << (32 - v4.prefix_len());
    IpAddr::V4(Ipv4Addr::from(base + rng.random_range(1..span - 1)))
}

fn random_token<R: Rng>(rng: &mut R, len: usize) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    loop {
        let t: String = (0..len).map(|_| char::from(*CHARS.choose(rng).expect("non-empty"))).collect();
        if t.bytes().any(|b| b.is_ascii_digit()) && t.bytes().any(|b| b.is_ascii_alphabetic()) {
            return t;
        }
    }
}

fn weighted<'a, T, R: Rng>(items: &'a [T], weight: impl Fn(&T) -> f64, rng: &mut R) -> &'a T {
    let total: f64 = items.iter().map(&weight).sum();
    let mut x = rng.random_range(0.0..total);
    for it in items {
        let w = weight(it);
        if x < w {
            return it;
        }
        x -= w;
    }
    items.last().expect("non-empty")
}

struct Truth {
    charge: MicroCpm,
}

struct UserSim<'a> {
    cfg: &'a SimConfig,
    sealer: &'a Sealer,
    user_id: String,
    rng: ChaCha8Rng,
    records: Vec<HttpRequestRecord>,
    auctions: Vec<AuctionRecord>,
    sealed: Vec<(String, MicroCpm)>,
    truth: HashMap<String, Truth>,
}

impl UserSim<'_> {
    fn push(&mut self, ts: i64, url: String, ua: &str, referer: Option<&str>, ip: IpAddr, bytes_in: u64) {
        let mut r = HttpRequestRecord::new(ts, self.user_id.clone(), url).expect("simulator urls are valid");
        r.user_agent = ua.to_string();
        r.referer = referer.map(str::to_string);
        r.client_ip = Some(ip);
        r.bytes_out = self.rng.random_range(300..900);
        r.bytes_in = bytes_in;
        r.duration_ms = self.rng.random_range(20..400);
        self.records.push(r);
    }

    fn run(&mut self) {
        let cfg = self.cfg;
        let os = if self.rng.random_bool(0.4) { Os::Ios } else { Os::Android };
        let tablet = self.rng.random_bool(0.15);
        let app_share = self.rng.random_range(0.35..0.65);
        let home = self.rng.random_range(0..cfg.cities.len());
        let favorites: Vec<usize> = (0..2).map(|_| self.rng.random_range(0..cfg.publishers.len())).collect();
        let sessions = Poisson::new(cfg.sessions_per_day).expect("validated rate");

        let mut last_end = cfg.start_ms;
        for day in 0..cfg.days {
            let n = sessions.sample(&mut self.rng) as usize;
            let mut starts: Vec<i64> = (0..n)
                .map(|_| {
                    let hour = DIURNAL
                        .iter()
                        .enumerate()
                        .collect::<Vec<_>>()
                        .choose_weighted(&mut self.rng, |(_, w)| **w)
                        .map(|(h, _)| *h as i64)
                        .expect("positive weights");
                    cfg.start_ms + i64::from(day) * 86_400_000 + hour * 3_600_000 + self.rng.random_range(0..3_600_000)
                })
                .collect();
            starts.sort_unstable();
            for start in starts {
                let start = start.max(last_end + 1_000);
                last_end = self.session(start, os, tablet, app_share, home, &favorites);
            }
        }
    }

    fn session(&mut self, mut t: i64, os: Os, tablet: bool, app_share: f64, home: usize, favorites: &[usize]) -> i64 {
        let cfg = self.cfg;
        let app = self.rng.random_bool(app_share);
        let ua = user_agent(os, tablet, app);
        let city = if self.rng.random_bool(0.9) { home } else { self.rng.random_range(0..cfg.cities.len()) };
        let ip = random_ip(&cfg.cities[city].cidr, &mut self.rng);
        let pub_idx = if self.rng.random_bool(0.6) {
            *favorites.choose(&mut self.rng).expect("two favorites")
        } else {
            self.rng.random_range(0..cfg.publishers.len())
        };
        let publisher = &cfg.publishers[pub_idx];
        let page = if app {
            format!("http://api.{}/v1/feed?page={}", publisher.domain, self.rng.random_range(1..50))
        } else {
            format!("http://www.{}/articles/{}", publisher.domain, self.rng.random_range(1..5000))
        };
        let referer = (!app).then(|| page.clone());
        let bytes = self.rng.random_range(20_000..200_000);
        self.push(t, page, ua, None, ip, bytes);
        t += self.rng.random_range(50..300);
        let url = format!("http://cdn-sim.example/static/{}.js", self.rng.random_range(1..40));
        let bytes = self.rng.random_range(2_000..60_000);
        self.push(t, url, ua, referer.as_deref(), ip, bytes);
        t += self.rng.random_range(20..200);
        let url = format!("http://pixel.analytics-sim.example/collect/pixel.gif?v={}", self.rng.random_range(0..1000));
        self.push(t, url, ua, referer.as_deref(), ip, 43);
        if self.rng.random_bool(0.3) {
            let token = random_token(&mut self.rng, 22);
            let dsp = &cfg.dsps[self.rng.random_range(0..cfg.dsps.len())].domain;
            t += self.rng.random_range(20..200);
            self.push(t, format!("http://match.sync-sim.example/sync?uid={token}"), ua, referer.as_deref(), ip, 43);
            t += self.rng.random_range(20..200);
            self.push(t, format!("http://{dsp}/setuid?partner_uid={token}"), ua, referer.as_deref(), ip, 43);
        }

        let slots = self.rng.random_range(1..=cfg.max_slots_per_session);
        for _ in 0..slots {
            t += self.rng.random_range(100..2_000);
            let (hour, dow) = crate::features::hour_and_weekday(t);
            let size = &weighted(&cfg.ad_sizes, |s| s.1, &mut self.rng).0;
            let adx = weighted(&cfg.adxs, |a| a.weight, &mut self.rng);
            let core = CoreFeatures {
                interaction: if app { Interaction::App } else { Interaction::MobileWeb },
                device_type: if tablet { DeviceType::Tablet } else { DeviceType::Smartphone },
                os,
                city: cfg.cities[city].name.clone(),
                tod_bucket: TodBucket::from_hour(hour),
                day_of_week: dow,
                hour_of_day: hour,
                ad_size: size.clone(),
                publisher_iab: publisher.iab.clone(),
                adx_id: adx.adx_id.clone(),
            };
            let market = cfg.price_law.market_price(&core);
            let mut bidders: Vec<usize> =
                (0..cfg.dsps.len()).filter(|&i| self.rng.random_bool(cfg.dsps[i].participation)).collect();
            for i in 0..cfg.dsps.len() {
                if bidders.len() >= 2 {
                    break;
                }
                if !bidders.contains(&i) {
                    bidders.push(i);
                }
            }
            bidders.sort_unstable();
            let bids: Vec<(String, MicroCpm)> = bidders
                .iter()
                .map(|&i| {
                    let z: f64 = self.rng.sample(StandardNormal);
                    let bid = market * cfg.dsps[i].margin * (cfg.price_law.sigma * z).exp();
                    (cfg.dsps[i].domain.clone(), MicroCpm::from_cpm_f64(bid).max(MicroCpm::from_micros(1_000)))
                })
                .collect();
            let outcome = run_auction(&bids).expect("at least two positive bids");
            let dsp = bids[outcome.winner].0.as_str();
            let encrypted = adx.policy == NotificationPolicy::Encrypted;
            let price =
                if encrypted { self.sealer.seal(outcome.charge, &mut self.rng) } else { outcome.charge.to_string() };
            let dsp_short = dsp.split(['.', '-']).nth(1).unwrap_or(dsp);
            let slot = Slot {
                price,
                bid: outcome.winning_bid,
                campaign_id: format!("cmp-{dsp_short}-{}", self.rng.random_range(0..20)),
                impression_id: format!("{:016x}", self.rng.random::<u64>()),
                dsp,
                publisher: &publisher.domain,
                size,
            };
            let url = render_nurl(&adx.template, &slot, encrypted);
            if encrypted {
                self.sealed.push((slot.price.clone(), outcome.charge));
            }
            self.auctions.push(AuctionRecord {
                impression_id: slot.impression_id.clone(),
                adx_id: adx.adx_id.clone(),
                bids: bids.clone(),
                winner: dsp.to_string(),
                winning_bid: outcome.winning_bid,
                charge: outcome.charge,
                encrypted,
            });
            self.truth.insert(format!("{}|{}|{}", self.user_id, t, url), Truth { charge: outcome.charge });
            self.push(t, url, ua, referer.as_deref(), ip, 43);
            t += self.rng.random_range(30..300);
            let creative = format!("http://img.creatives-sim.example/cr/{}.jpg", slot.campaign_id);
            let bytes = self.rng.random_range(5_000..60_000);
            self.push(t, creative, ua, referer.as_deref(), ip, bytes);
        }
        t
    }
}

/// Runs the marketplace. Output depends only on `cfg`.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let sealer = Sealer::from_seed(cfg.seed);
    let mut records = Vec::new();
    let mut auctions = Vec::new();
    let mut sealed = Vec::new();
    let mut truth = HashMap::new();
    let width = cfg.n_users.to_string().len().max(4);
    for u in 0..cfg.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u as u64 + 1);
        let mut sim = UserSim {
            cfg,
            sealer: &sealer,
            user_id: format!("user-{u:0width$}"),
            rng,
            records: Vec::new(),
            auctions: Vec::new(),
            sealed: Vec::new(),
            truth: HashMap::new(),
        };
        sim.run();
        records.extend(sim.records);
        auctions.extend(sim.auctions);
        sealed.extend(sim.sealed);
        truth.extend(sim.truth);
    }
    records.sort_by(|a, b| (a.timestamp_ms, &a.user_id).cmp(&(b.timestamp_ms, &b.user_id)));

    let charges: Vec<f64> = auctions.iter().map(|a| a.charge.as_cpm_f64()).collect();
    let binning = log_normalize(&charges).ok().and_then(|logs| match fit_binning(&logs, 4) {
        Ok(b) => Some(b),
        Err(ModelError::DegenerateDistribution { fallback, .. }) => Some(*fallback),
        Err(_) => None,
    });
    let entries = sealed
        .into_iter()
        .map(|(token, cpm)| {
            let class = binning.as_ref().map(|b| b.class_of(cpm));
            (token, SealedEntry { cpm, class })
        })
        .collect();

    let extractor = FeatureExtractor::new(cfg.reference_data());
    let mut ground_truth = Vec::new();
    for (_, stream) in partition_by_user(records.iter().cloned()) {
        for ex in extractor.extract_user(&stream) {
            let Ok(features) = ex.features else { continue };
            if let Some(t) = truth.get(&ex.notification.identity()) {
                ground_truth.push(TrainingRow { features, cpm: t.charge });
            }
        }
    }

    Ok(SimOutput {
        records,
        ledger: SealedLedger { binning, entries },
        ground_truth,
        auctions,
        geo_csv: cfg.geo_csv(),
        iab_csv: cfg.iab_csv(),
    })
}
