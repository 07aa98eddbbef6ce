//! End-to-end analysis: records in, per-user cost reports and cohort
//! statistics out.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{
    cohort_stats, CohortSummary, CostError, TimeShiftCoefficient, TimeWindow, UserCostLedger, UserCostReport,
};
use crate::features::{FeatureExtractor, UserContext};
use crate::ingest::{partition_by_user, HttpRequestRecord, IngestError};
use crate::model::PriceEstimator;
use crate::money::MicroCpm;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub window: TimeWindow,
    pub time_shift: Option<TimeShiftCoefficient>,
    /// Also scale encrypted estimates by the time-shift coefficient.
    pub shift_encrypted: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions { window: TimeWindow::ALL, time_shift: None, shift_encrypted: false }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzeStats {
    pub users: u64,
    pub records: u64,
    pub notifications: u64,
    pub cleartext: u64,
    pub encrypted: u64,
    /// Notifications whose features could not be computed.
    pub feature_errors: u64,
    pub duplicates: u64,
    pub out_of_window: u64,
}

impl AnalyzeStats {
    pub fn merge(&mut self, o: &AnalyzeStats) {
        self.users += o.users;
        self.records += o.records;
        self.notifications += o.notifications;
        self.cleartext += o.cleartext;
        self.encrypted += o.encrypted;
        self.feature_errors += o.feature_errors;
        self.duplicates += o.duplicates;
        self.out_of_window += o.out_of_window;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    /// Sorted by user id.
    pub reports: Vec<UserCostReport>,
    pub summary: CohortSummary,
    pub stats: AnalyzeStats,
}

/// Running tally after a notification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub user_id: String,
    pub timestamp_ms: i64,
    pub cleartext_cpm: MicroCpm,
    pub encrypted_cpm: MicroCpm,
    pub total_cpm: MicroCpm,
}

/// Incremental state for one user.
#[derive(Debug, Clone)]
pub struct UserState {
    ctx: UserContext,
    ledger: UserCostLedger,
    stats: AnalyzeStats,
}

impl UserState {
    pub fn new(user_id: &str, window: TimeWindow) -> Self {
        UserState {
            ctx: UserContext::default(),
            ledger: UserCostLedger::new(user_id, window),
            stats: AnalyzeStats { users: 1, ..AnalyzeStats::default() },
        }
    }

    /// Folds one record in; returns whether it carried an accounted
    /// notification.
    pub fn push(
        &mut self,
        record: &HttpRequestRecord,
        extractor: &FeatureExtractor,
        estimator: Option<&dyn PriceEstimator>,
    ) -> Result<bool, CostError> {
        self.stats.records += 1;
        let Some(n) = extractor.observe(&mut self.ctx, record) else {
            return Ok(false);
        };
        self.stats.notifications += 1;
        let features = match extractor.features(&self.ctx, &n, record) {
            Ok(f) => f,
            Err(_) => {
                self.stats.feature_errors += 1;
                return Ok(false);
            }
        };
        match self.ledger.accumulate(&n, &features, estimator) {
            Ok(()) => {
                if n.price.is_encrypted() {
                    self.stats.encrypted += 1;
                } else {
                    self.stats.cleartext += 1;
                }
                Ok(true)
            }
            Err(CostError::Duplicate(_)) => {
                self.stats.duplicates += 1;
                Ok(false)
            }
            Err(CostError::OutOfWindow { .. }) => {
                self.stats.out_of_window += 1;
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    pub fn ledger(&self) -> &UserCostLedger {
        &self.ledger
    }

    pub fn report(&self, opts: &AnalyzeOptions) -> UserCostReport {
        match &opts.time_shift {
            Some(c) => self.ledger.time_shifted(c, opts.shift_encrypted).report(),
            None => self.ledger.report(),
        }
    }

    fn tally(&self, timestamp_ms: i64) -> Tally {
        let r = self.ledger.report();
        Tally {
            user_id: r.user_id,
            timestamp_ms,
            cleartext_cpm: r.cleartext_cpm,
            encrypted_cpm: r.encrypted_cpm,
            total_cpm: r.total_cpm,
        }
    }
}

/// Analyzes a batch of records. Users are processed in parallel and merged
/// in user-id order, so output does not depend on input order beyond the
/// order of same-timestamp records within a user.
pub fn analyze(
    records: impl IntoIterator<Item = HttpRequestRecord>,
    extractor: &FeatureExtractor,
    estimator: Option<&(dyn PriceEstimator + Sync)>,
    opts: &AnalyzeOptions,
) -> Result<Analysis, PipelineError> {
    let streams: Vec<(String, Vec<HttpRequestRecord>)> = partition_by_user(records).into_iter().collect();
    let per_user: Vec<Result<(UserCostReport, AnalyzeStats), CostError>> = streams
        .par_iter()
        .map(|(user, stream)| {
            let mut state = UserState::new(user, opts.window);
            for r in stream {
                state.push(r, extractor, estimator.map(|e| e as &dyn PriceEstimator))?;
            }
            Ok((state.report(opts), state.stats))
        })
        .collect();
    let mut reports = Vec::with_capacity(per_user.len());
    let mut stats = AnalyzeStats::default();
    for r in per_user {
        let (report, s) = r?;
        stats.merge(&s);
        reports.push(report);
    }
    let summary = cohort_stats(&reports);
    Ok(Analysis { reports, summary, stats })
}

/// Tallies records as they arrive. Each user's records must arrive in time
/// order.
pub struct StreamingAnalyzer<'a> {
    extractor: &'a FeatureExtractor,
    estimator: Option<&'a dyn PriceEstimator>,
    opts: AnalyzeOptions,
    users: BTreeMap<String, UserState>,
}

impl<'a> StreamingAnalyzer<'a> {
    pub fn new(
        extractor: &'a FeatureExtractor,
        estimator: Option<&'a dyn PriceEstimator>,
        opts: AnalyzeOptions,
    ) -> Self {
        StreamingAnalyzer { extractor, estimator, opts, users: BTreeMap::new() }
    }

    /// Returns the user's updated tally when the record carried a
    /// notification.
    pub fn push(&mut self, record: &HttpRequestRecord) -> Result<Option<Tally>, CostError> {
        let state = self
            .users
            .entry(record.user_id.clone())
            .or_insert_with(|| UserState::new(&record.user_id, self.opts.window));
        Ok(state.push(record, self.extractor, self.estimator)?.then(|| state.tally(record.timestamp_ms)))
    }

    pub fn finish(self) -> Analysis {
        let mut stats = AnalyzeStats::default();
        let reports: Vec<UserCostReport> = self
            .users
            .values()
            .map(|s| {
                stats.merge(&s.stats);
                s.report(&self.opts)
            })
            .collect();
        let summary = cohort_stats(&reports);
        Analysis { reports, summary, stats }
    }
}
