use std::collections::BTreeMap;

use adcost_core::features::FeatureExtractor;
use adcost_core::money::MicroCpm;
use adcost_core::nurl::{PriceValue, RuleSet};
use adcost_core::pipeline::{analyze, AnalyzeOptions};
use adcost_core::sim::{simulate, LedgerEstimator, LedgerMode, SimConfig, SimOutput};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zero_noise() -> (SimConfig, SimOutput) {
    let mut cfg = SimConfig { seed: 8, n_users: 25, days: 2, ..SimConfig::default() };
    cfg.price_law.sigma = 0.0;
    let out = simulate(&cfg).unwrap();
    (cfg, out)
}

// Per-user sealed sums straight from the ledger, keyed by the tokens each
// user's traffic carries.
fn sealed_sums(out: &SimOutput, per_token: impl Fn(&str) -> MicroCpm) -> BTreeMap<String, (MicroCpm, MicroCpm)> {
    let rules = RuleSet::builtin();
    let mut sums: BTreeMap<String, (MicroCpm, MicroCpm)> = BTreeMap::new();
    for r in &out.records {
        if let Some(n) = rules.detect(r) {
            let e = sums.entry(r.user_id.clone()).or_default();
            match &n.price {
                PriceValue::Cleartext { cpm, .. } => e.0 += *cpm,
                PriceValue::Encrypted { token } => e.1 += per_token(token),
            }
        }
    }
    sums
}

#[test]
fn true_price_ledger_reproduces_sealed_sums() {
    let (cfg, out) = zero_noise();
    let ex = FeatureExtractor::new(cfg.reference_data());
    let est = LedgerEstimator { ledger: &out.ledger, mode: LedgerMode::TruePrice };
    let a = analyze(out.records.clone(), &ex, Some(&est), &AnalyzeOptions::default()).unwrap();
    let oracle = sealed_sums(&out, |t| out.ledger.entries[t].cpm);
    assert_eq!(a.reports.len(), oracle.len());
    for r in &a.reports {
        let (c, e) = oracle[&r.user_id];
        assert_eq!(r.cleartext_cpm, c, "{}", r.user_id);
        assert_eq!(r.encrypted_cpm, e, "{}", r.user_id);
        assert_eq!(r.total_cpm, c + e);
    }
    assert!(a.reports.iter().any(|r| r.encrypted_impressions > 0));
}

#[test]
fn true_class_ledger_reproduces_sealed_class_sums() {
    let (cfg, out) = zero_noise();
    let ex = FeatureExtractor::new(cfg.reference_data());
    let binning = out.ledger.binning.clone().unwrap();
    let est = LedgerEstimator { ledger: &out.ledger, mode: LedgerMode::TrueClass };
    let a = analyze(out.records.clone(), &ex, Some(&est), &AnalyzeOptions::default()).unwrap();
    let oracle = sealed_sums(&out, |t| binning.representative(out.ledger.entries[t].class.unwrap()));
    for r in &a.reports {
        assert_eq!((r.cleartext_cpm, r.encrypted_cpm), oracle[&r.user_id]);
    }
}

#[test]
fn additivity_is_exact_under_stream_permutations() {
    let (cfg, out) = zero_noise();
    let ex = FeatureExtractor::new(cfg.reference_data());
    let est = LedgerEstimator { ledger: &out.ledger, mode: LedgerMode::TrueClass };
    let base = analyze(out.records.clone(), &ex, Some(&est), &AnalyzeOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut records = out.records.clone();
    for _ in 0..100 {
        records.shuffle(&mut rng);
        let a = analyze(records.clone(), &ex, Some(&est), &AnalyzeOptions::default()).unwrap();
        for (r, b) in a.reports.iter().zip(&base.reports) {
            assert_eq!(r.total_cpm, r.cleartext_cpm + r.encrypted_cpm);
            assert_eq!(r, b);
        }
    }
}
