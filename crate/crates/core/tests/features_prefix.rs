use adcost_core::features::FeatureExtractor;
use adcost_core::ingest::partition_by_user;
use adcost_core::sim::{simulate, SimConfig};

// Features of the i-th notification must equal those computed from the
// stream truncated right after it.
#[test]
fn features_never_look_ahead() {
    let cfg = SimConfig { seed: 21, n_users: 6, days: 2, ..SimConfig::default() };
    let out = simulate(&cfg).unwrap();
    let ex = FeatureExtractor::new(cfg.reference_data());
    let mut checked = 0;
    for (_, stream) in partition_by_user(out.records) {
        let full = ex.extract_user(&stream);
        assert!(!full.is_empty());
        for e in &full {
            let prefix = ex.extract_user(&stream[..=e.record_index]);
            let last = prefix.last().unwrap();
            assert_eq!(last.record_index, e.record_index);
            assert_eq!(last.notification, e.notification);
            assert_eq!(last.features.as_ref().ok(), e.features.as_ref().ok());
            checked += 1;
        }
    }
    assert!(checked > 50, "{checked}");
}

#[test]
fn every_notification_gets_features_on_sim_logs() {
    let cfg = SimConfig { seed: 5, n_users: 10, days: 1, ..SimConfig::default() };
    let out = simulate(&cfg).unwrap();
    let ex = FeatureExtractor::new(cfg.reference_data());
    let mut n = 0;
    for (_, stream) in partition_by_user(out.records) {
        for e in ex.extract_user(&stream) {
            let f = e.features.unwrap();
            assert!(f.city.is_some() && f.publisher_iab.is_some() && !f.adx_id.is_empty());
            n += 1;
        }
    }
    assert_eq!(n, out.auctions.len());
}
