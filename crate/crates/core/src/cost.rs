//! Per-user advertising cost ledgers, reports and cohort statistics.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{CoreFeatures, FeatureVector};
use crate::model::{ModelError, PriceEstimator};
use crate::money::MicroCpm;
use crate::nurl::{PriceNotification, PriceValue};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("encrypted price at {0} needs a price model")]
    ModelRequired(i64),
    #[error("notification at {ts} outside window [{start}, {end}]")]
    OutOfWindow { ts: i64, start: i64, end: i64 },
    #[error("notification {0} already accounted")]
    Duplicate(String),
    #[error("notification belongs to user {found:?}, ledger is for {expected:?}")]
    WrongUser { expected: String, found: String },
    #[error("time-shift ratio {0} must be positive")]
    BadRatio(f64),
    #[error("cannot compute a median of no prices")]
    EmptySample,
    #[error("ARPU factor {name} = {value} outside (0, 1]")]
    BadFactor { name: &'static str, value: f64 },
    #[error(transparent)]
    Estimation(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inclusive time window in epoch milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_ms: i64,
    pub end_ms: i64,
}

impl TimeWindow {
    pub const ALL: TimeWindow = TimeWindow { start_ms: i64::MIN, end_ms: i64::MAX };

    pub fn contains(&self, ts: i64) -> bool {
        self.start_ms <= ts && ts <= self.end_ms
    }

    pub fn days(&self) -> Option<f64> {
        (*self != Self::ALL).then(|| (self.end_ms - self.start_ms) as f64 / 86_400_000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleartextEntry {
    pub identity: String,
    pub timestamp_ms: i64,
    pub adx_id: String,
    pub cpm: MicroCpm,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub publisher_iab: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedEntry {
    pub identity: String,
    pub timestamp_ms: i64,
    pub token: String,
    pub features: CoreFeatures,
    pub estimate: MicroCpm,
}

/// Cleartext and encrypted charge prices attributed to one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCostLedger {
    pub user_id: String,
    pub window: TimeWindow,
    pub cleartext: Vec<CleartextEntry>,
    pub encrypted: Vec<EncryptedEntry>,
    #[serde(skip)]
    seen: HashSet<String>,
}

impl UserCostLedger {
    pub fn new(user_id: impl Into<String>, window: TimeWindow) -> Self {
        UserCostLedger {
            user_id: user_id.into(),
            window,
            cleartext: Vec::new(),
            encrypted: Vec::new(),
            seen: HashSet::new(),
        }
    }

    /// Records one notification: cleartext prices at face value, encrypted
    /// ones at the estimator's price.
    pub fn accumulate(
        &mut self,
        n: &PriceNotification,
        features: &FeatureVector,
        estimator: Option<&dyn PriceEstimator>,
    ) -> Result<(), CostError> {
        if n.user_id != self.user_id {
            return Err(CostError::WrongUser { expected: self.user_id.clone(), found: n.user_id.clone() });
        }
        if !self.window.contains(n.timestamp_ms) {
            return Err(CostError::OutOfWindow {
                ts: n.timestamp_ms,
                start: self.window.start_ms,
                end: self.window.end_ms,
            });
        }
        let identity = n.identity();
        if self.seen.contains(&identity) {
            return Err(CostError::Duplicate(identity));
        }
        match &n.price {
            PriceValue::Cleartext { cpm, .. } => self.cleartext.push(CleartextEntry {
                identity: identity.clone(),
                timestamp_ms: n.timestamp_ms,
                adx_id: n.adx_id.clone(),
                cpm: *cpm,
                publisher_iab: features.publisher_iab.clone(),
            }),
            PriceValue::Encrypted { token } => {
                let est = estimator.ok_or(CostError::ModelRequired(n.timestamp_ms))?;
                let estimate = est.estimate(n, features)?;
                self.encrypted.push(EncryptedEntry {
                    identity: identity.clone(),
                    timestamp_ms: n.timestamp_ms,
                    token: token.clone(),
                    features: features.project(),
                    estimate,
                });
            }
        }
        self.seen.insert(identity);
        Ok(())
    }

    /// Copy with cleartext prices (and optionally encrypted estimates)
    /// multiplied by the coefficient.
    pub fn time_shifted(&self, coeff: &TimeShiftCoefficient, include_encrypted: bool) -> UserCostLedger {
        let mut out = self.clone();
        for e in &mut out.cleartext {
            e.cpm = e.cpm.scale(coeff.ratio);
        }
        if include_encrypted {
            for e in &mut out.encrypted {
                e.estimate = e.estimate.scale(coeff.ratio);
            }
        }
        out
    }

    pub fn report(&self) -> UserCostReport {
        report(self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IabTally {
    pub impressions: u64,
    pub cpm: MicroCpm,
}

/// What advertisers paid to reach one user during a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCostReport {
    pub user_id: String,
    pub window: TimeWindow,
    pub cleartext_cpm: MicroCpm,
    pub encrypted_cpm: MicroCpm,
    pub total_cpm: MicroCpm,
    pub usd_equivalent: f64,
    pub cleartext_impressions: u64,
    pub encrypted_impressions: u64,
    pub avg_cleartext_cpm: Option<f64>,
    pub avg_encrypted_cpm: Option<f64>,
    /// Cleartext impressions and spend per publisher category.
    pub per_iab: BTreeMap<String, IabTally>,
}

pub fn report(ledger: &UserCostLedger) -> UserCostReport {
    let c: MicroCpm = ledger.cleartext.iter().map(|e| e.cpm).sum();
    let e: MicroCpm = ledger.encrypted.iter().map(|e| e.estimate).sum();
    let v = c + e;
    let avg = |sum: MicroCpm, n: usize| (n > 0).then(|| sum.as_cpm_f64() / n as f64);
    let mut per_iab: BTreeMap<String, IabTally> = BTreeMap::new();
    for entry in &ledger.cleartext {
        let key = entry.publisher_iab.clone().unwrap_or_else(|| crate::features::OTHER.to_string());
        let t = per_iab.entry(key).or_default();
        t.impressions += 1;
        t.cpm += entry.cpm;
    }
    UserCostReport {
        user_id: ledger.user_id.clone(),
        window: ledger.window,
        cleartext_cpm: c,
        encrypted_cpm: e,
        total_cpm: v,
        usd_equivalent: v.as_usd(),
        cleartext_impressions: ledger.cleartext.len() as u64,
        encrypted_impressions: ledger.encrypted.len() as u64,
        avg_cleartext_cpm: avg(c, ledger.cleartext.len()),
        avg_encrypted_cpm: avg(e, ledger.encrypted.len()),
        per_iab,
    }
}

/// Multiplier bringing historical prices to a reference period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeShiftCoefficient {
    pub ratio: f64,
    pub historical_median: f64,
    pub reference_median: f64,
}

impl TimeShiftCoefficient {
    pub fn identity() -> Self {
        TimeShiftCoefficient { ratio: 1.0, historical_median: 1.0, reference_median: 1.0 }
    }

    pub fn from_ratio(ratio: f64) -> Result<Self, CostError> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(CostError::BadRatio(ratio));
        }
        Ok(TimeShiftCoefficient { ratio, historical_median: 1.0, reference_median: ratio })
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Ratio of the reference median price to the historical median price.
pub fn time_shift_coefficient(historical: &[f64], reference: &[f64]) -> Result<TimeShiftCoefficient, CostError> {
    let h = median(historical).ok_or(CostError::EmptySample)?;
    let r = median(reference).ok_or(CostError::EmptySample)?;
    let ratio = r / h;
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(CostError::BadRatio(ratio));
    }
    Ok(TimeShiftCoefficient { ratio, historical_median: h, reference_median: r })
}

pub fn time_shift(prices: &[f64], coeff: &TimeShiftCoefficient) -> Vec<f64> {
    prices.iter().map(|p| p * coeff.ratio).collect()
}

/// Percentile levels reported for cohorts.
pub const PERCENTILES: [u8; 7] = [5, 10, 25, 50, 75, 90, 95];

/// Nearest-rank percentile of ascending `sorted`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub metric: String,
    /// `(percentile, CPM)` pairs.
    pub values: Vec<(u8, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IabRow {
    pub iab: String,
    pub users: u64,
    pub impressions: u64,
    pub total_cpm: f64,
    pub mean_cpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub user_id: String,
    pub cleartext_cpm: f64,
    pub encrypted_cpm: f64,
    pub total_cpm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub users: usize,
    pub percentiles: Vec<PercentileRow>,
    /// `(total CPM, fraction of users at or below it)`.
    pub cdf: Vec<(f64, f64)>,
    pub per_iab: Vec<IabRow>,
    pub scatter: Vec<ScatterPoint>,
}

const MAX_CDF_POINTS: usize = 200;

pub fn cohort_stats(reports: &[UserCostReport]) -> CohortSummary {
    if reports.is_empty() {
        return CohortSummary::default();
    }
    let sorted_of = |f: &dyn Fn(&UserCostReport) -> MicroCpm| {
        let mut v: Vec<f64> = reports.iter().map(|r| f(r).as_cpm_f64()).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let total = sorted_of(&|r| r.total_cpm);
    let clear = sorted_of(&|r| r.cleartext_cpm);
    let enc = sorted_of(&|r| r.encrypted_cpm);
    let row = |metric: &str, sorted: &[f64]| PercentileRow {
        metric: metric.to_string(),
        values: PERCENTILES.iter().map(|&p| (p, nearest_rank(sorted, f64::from(p)).unwrap_or(0.0))).collect(),
    };
    let n = total.len();
    let step = n.div_ceil(MAX_CDF_POINTS).max(1);
    let mut cdf: Vec<(f64, f64)> = (step - 1..n).step_by(step).map(|i| (total[i], (i + 1) as f64 / n as f64)).collect();
    if cdf.last().is_none_or(|&(_, f)| f < 1.0) {
        cdf.push((total[n - 1], 1.0));
    }

    let mut iab: BTreeMap<String, (u64, u64, MicroCpm)> = BTreeMap::new();
    for r in reports {
        for (k, t) in &r.per_iab {
            let e = iab.entry(k.clone()).or_default();
            e.0 += 1;
            e.1 += t.impressions;
            e.2 += t.cpm;
        }
    }
    let per_iab = iab
        .into_iter()
        .map(|(iab, (users, impressions, cpm))| IabRow {
            iab,
            users,
            impressions,
            total_cpm: cpm.as_cpm_f64(),
            mean_cpm: if impressions == 0 { 0.0 } else { cpm.as_cpm_f64() / impressions as f64 },
        })
        .collect();
    let scatter = reports
        .iter()
        .map(|r| ScatterPoint {
            user_id: r.user_id.clone(),
            cleartext_cpm: r.cleartext_cpm.as_cpm_f64(),
            encrypted_cpm: r.encrypted_cpm.as_cpm_f64(),
            total_cpm: r.total_cpm.as_cpm_f64(),
        })
        .collect();
    CohortSummary {
        users: n,
        percentiles: vec![row("total", &total), row("cleartext", &clear), row("encrypted", &enc)],
        cdf,
        per_iab,
        scatter,
    }
}

/// Writes `user_reports.jsonl`, `cohort.csv`, `cdf.csv`, `iab.csv` and
/// `scatter.csv` into `dir`.
pub fn write_outputs(dir: &Path, reports: &[UserCostReport], summary: &CohortSummary) -> Result<(), CostError> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("user_reports.jsonl"))?);
    for r in reports {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    let csv_err = |e: csv::Error| CostError::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(dir.join("cohort.csv")).map_err(csv_err)?;
    let mut header = vec!["metric".to_string()];
    header.extend(PERCENTILES.iter().map(|p| format!("p{p}")));
    w.write_record(&header).map_err(csv_err)?;
    for row in &summary.percentiles {
        let mut rec = vec![row.metric.clone()];
        rec.extend(row.values.iter().map(|(_, v)| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("cdf.csv")).map_err(csv_err)?;
    w.write_record(["total_cpm", "fraction"]).map_err(csv_err)?;
    for (v, frac) in &summary.cdf {
        w.write_record([v.to_string(), frac.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("iab.csv")).map_err(csv_err)?;
    for row in &summary.per_iab {
        w.serialize(row).map_err(csv_err)?;
    }
    if summary.per_iab.is_empty() {
        w.write_record(["iab", "users", "impressions", "total_cpm", "mean_cpm"]).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("scatter.csv")).map_err(csv_err)?;
    for p in &summary.scatter {
        w.serialize(p).map_err(csv_err)?;
    }
    if summary.scatter.is_empty() {
        w.write_record(["user_id", "cleartext_cpm", "encrypted_cpm", "total_cpm"]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Shares used to turn what RTB advertisers pay into a total yearly
/// revenue per user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArpuFactors {
    /// Online advertising's share of all advertising.
    pub online_share: f64,
    /// Mobile's share of online advertising.
    pub mobile_share: f64,
    /// Share of mobile ads delivered over plain HTTP.
    pub http_share: f64,
    /// What remains after management and intermediary overheads.
    pub rtb_net_share: f64,
    /// RTB's share of all ads.
    pub rtb_of_total_ads: f64,
}

impl Default for ArpuFactors {
    fn default() -> Self {
        ArpuFactors {
            online_share: 0.83,
            mobile_share: 0.51,
            http_share: 0.40,
            rtb_net_share: 0.45,
            rtb_of_total_ads: 0.20,
        }
    }
}

impl ArpuFactors {
    pub fn validate(&self) -> Result<(), CostError> {
        for (name, value) in [
            ("online_share", self.online_share),
            ("mobile_share", self.mobile_share),
            ("http_share", self.http_share),
            ("rtb_net_share", self.rtb_net_share),
            ("rtb_of_total_ads", self.rtb_of_total_ads),
        ] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(CostError::BadFactor { name, value });
            }
        }
        Ok(())
    }

    pub fn product(&self) -> f64 {
        self.online_share * self.mobile_share * self.http_share * self.rtb_net_share * self.rtb_of_total_ads
    }
}

/// Yearly USD revenue per user implied by a yearly RTB CPM sum.
pub fn extrapolate_arpu(annual_cpm_sum: f64, f: &ArpuFactors) -> Result<f64, CostError> {
    f.validate()?;
    Ok(annual_cpm_sum.max(0.0) / 1000.0 / f.product())
}
