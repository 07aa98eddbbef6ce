use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::money::MicroCpm;

/// Minimum share of training samples every class must hold.
pub const MIN_CLASS_SHARE: f64 = 0.05;

/// Fitted classes must each hold at least this fraction of an equal share
/// (`1/k`) of the samples, keeping price groups well balanced.
pub const BALANCE_FLOOR: f64 = 0.95;

/// Price classes: cut points in log-CPM space and one CPM representative
/// per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceBinning {
    pub boundaries: Vec<f64>,
    pub representatives: Vec<MicroCpm>,
}

impl PriceBinning {
    pub fn new(boundaries: Vec<f64>, representatives: Vec<MicroCpm>) -> Result<Self, ModelError> {
        let b = PriceBinning { boundaries, representatives };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::CorruptModel(format!("binning: {m}")));
        if self.representatives.len() != self.boundaries.len() + 1 {
            return bad("need exactly one more representative than boundaries");
        }
        if self.boundaries.iter().any(|b| !b.is_finite()) || self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return bad("boundaries must be finite and strictly increasing");
        }
        if self.representatives.iter().any(|r| !r.is_positive())
            || self.representatives.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("representatives must be positive and strictly increasing");
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.representatives.len()
    }

    /// Class of a log-CPM value; values equal to a boundary go to the lower
    /// class.
    pub fn class_of_log(&self, log_price: f64) -> usize {
        self.boundaries.partition_point(|&b| b < log_price)
    }

    pub fn class_of(&self, price: MicroCpm) -> usize {
        self.class_of_log(price.as_cpm_f64().ln())
    }

    pub fn representative(&self, class: usize) -> MicroCpm {
        self.representatives[class.min(self.k() - 1)]
    }

    /// CPM range `[lo, hi]` of a class given training extremes.
    pub fn class_range(&self, class: usize, min_price: f64, max_price: f64) -> (f64, f64) {
        let lo = if class == 0 { min_price } else { self.boundaries[class - 1].exp() };
        let hi = if class + 1 == self.k() { max_price } else { self.boundaries[class].exp() };
        (lo, hi)
    }
}

/// Natural log of every price.
pub fn log_normalize(prices: &[f64]) -> Result<Vec<f64>, ModelError> {
    prices
        .iter()
        .map(|&p| if p > 0.0 && p.is_finite() { Ok(p.ln()) } else { Err(ModelError::NonPositivePrice(p)) })
        .collect()
}

/// Leave-one-out log-likelihood of the histogram density with the given
/// inner cut points, outer edges at the data extremes.
///
/// `sorted` must be ascending. Bins with fewer than two points score
/// negative infinity.
pub fn loo_log_likelihood(sorted: &[f64], cuts: &[f64]) -> f64 {
    let n = sorted.len();
    if n < 2 {
        return f64::NEG_INFINITY;
    }
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(lo);
    edges.extend_from_slice(cuts);
    edges.push(hi);
    let mut score = 0.0;
    let mut start = 0usize;
    for j in 0..edges.len() - 1 {
        let end = if j + 2 == edges.len() { n } else { sorted.partition_point(|&v| v <= edges[j + 1]) };
        let count = end.saturating_sub(start);
        let width = edges[j + 1] - edges[j];
        if count < 2 || width <= 0.0 {
            return f64::NEG_INFINITY;
        }
        score += count as f64 * ((count - 1) as f64 / ((n - 1) as f64 * width)).ln();
        start = end;
    }
    score
}

struct Search<'a> {
    sorted: &'a [f64],
    /// Midpoints between consecutive distinct values.
    mids: Vec<f64>,
    min_count: usize,
}

impl Search<'_> {
    fn counts_ok(&self, cuts: &[f64]) -> bool {
        let mut prev = 0usize;
        for (j, c) in cuts.iter().enumerate() {
            if j > 0 && *c <= cuts[j - 1] {
                return false;
            }
            let idx = self.sorted.partition_point(|&v| v <= *c);
            if idx - prev < self.min_count {
                return false;
            }
            prev = idx;
        }
        self.sorted.len() - prev >= self.min_count
    }

    fn score(&self, cuts: &[f64]) -> f64 {
        if !self.counts_ok(cuts) {
            return f64::NEG_INFINITY;
        }
        loo_log_likelihood(self.sorted, cuts)
    }

    /// Nearest midpoint to an arbitrary cut position.
    fn snap(&self, x: f64) -> f64 {
        let i = self.mids.partition_point(|&m| m < x);
        match (i.checked_sub(1).map(|j| self.mids[j]), self.mids.get(i)) {
            (Some(a), Some(&b)) => {
                if x - a <= b - x {
                    a
                } else {
                    b
                }
            }
            (Some(a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => x,
        }
    }

    fn equal_width(&self, k: usize) -> Vec<f64> {
        let (lo, hi) = (self.sorted[0], self.sorted[self.sorted.len() - 1]);
        (1..k).map(|j| self.snap(lo + (hi - lo) * j as f64 / k as f64)).collect()
    }

    fn equal_frequency(&self, k: usize) -> Vec<f64> {
        let n = self.sorted.len();
        (1..k)
            .map(|j| {
                let i = (j * n / k).clamp(1, n - 1);
                self.snap((self.sorted[i - 1] + self.sorted[i]) / 2.0)
            })
            .collect()
    }

    /// Coordinate ascent where cut `j` may move to any midpoint whose rank
    /// lies within `window` (a fraction of the sample count) of its starting
    /// rank, never crossing its neighbours.
    fn refine(&self, start: Vec<f64>, window: f64) -> (Vec<f64>, f64) {
        let n = self.sorted.len();
        let reach = (window * n as f64).round() as usize;
        let bounds: Vec<(f64, f64)> = start
            .iter()
            .map(|&c| {
                let r = self.sorted.partition_point(|&v| v <= c);
                let lo = r.saturating_sub(reach).max(1);
                let hi = (r + reach).min(n - 1);
                (self.sorted[lo - 1], self.sorted[hi])
            })
            .collect();
        let mut cuts = start;
        let mut score = self.score(&cuts);
        for _ in 0..64 {
            let mut improved = false;
            for j in 0..cuts.len() {
                let lo = if j == 0 { bounds[j].0 } else { bounds[j].0.max(cuts[j - 1]) };
                let hi = if j + 1 == cuts.len() { bounds[j].1 } else { bounds[j].1.min(cuts[j + 1]) };
                let from = self.mids.partition_point(|&m| m <= lo);
                let to = self.mids.partition_point(|&m| m < hi);
                let mut trial = cuts.clone();
                for &m in &self.mids[from..to] {
                    trial[j] = m;
                    let s = self.score(&trial);
                    if s > score + 1e-12 {
                        score = s;
                        cuts[j] = m;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        (cuts, score)
    }
}

/// Fraction of the sample count a cut may move away from its grid position.
pub const PERTURBATION_WINDOW: f64 = 0.02;

/// Fits `k` price classes on log prices.
///
/// Starts from the equal-width and equal-frequency grids, lets each cut
/// move within a small rank window around its grid position, and keeps the
/// cuts with the highest leave-one-out histogram likelihood among those
/// where every class holds at least [`BALANCE_FLOOR`]` / k` of the samples.
/// Representatives are per-class median CPMs.
pub fn fit_binning(log_prices: &[f64], k: usize) -> Result<PriceBinning, ModelError> {
    if k < 2 {
        return Err(ModelError::InvalidParameter("binning needs k >= 2".into()));
    }
    if log_prices.len() < 10 * k {
        return Err(ModelError::InsufficientSamples { needed: 10 * k, got: log_prices.len() });
    }
    if let Some(&bad) = log_prices.iter().find(|v| !v.is_finite()) {
        return Err(ModelError::NonPositivePrice(bad.exp()));
    }
    let mut sorted = log_prices.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        let fallback = equal_frequency_fallback(&sorted, k);
        return Err(ModelError::DegenerateDistribution { distinct: distinct.len(), fallback: Box::new(fallback) });
    }
    let mids: Vec<f64> = distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    let share = MIN_CLASS_SHARE.max(BALANCE_FLOOR / k as f64);
    let min_count = (share * sorted.len() as f64).ceil() as usize;
    let search = Search { sorted: &sorted, mids, min_count };

    let (cuts, score) = [search.equal_width(k), search.equal_frequency(k)]
        .into_iter()
        .map(|grid| search.refine(grid, PERTURBATION_WINDOW))
        .fold((Vec::new(), f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
    let cuts = if score.is_finite() {
        cuts
    } else {
        // No candidate satisfies the share constraint: plain quantiles do
        // whenever enough distinct values exist.
        search.equal_frequency(k)
    };
    binning_from_cuts(&sorted, cuts)
}

fn median_cpm(sorted_logs: &[f64]) -> MicroCpm {
    let n = sorted_logs.len();
    let m = if n % 2 == 1 {
        sorted_logs[n / 2].exp()
    } else {
        (sorted_logs[n / 2 - 1].exp() + sorted_logs[n / 2].exp()) / 2.0
    };
    MicroCpm::from_cpm_f64(m).max(MicroCpm::from_micros(1))
}

fn binning_from_cuts(sorted: &[f64], cuts: Vec<f64>) -> Result<PriceBinning, ModelError> {
    let mut reps = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for j in 0..=cuts.len() {
        let end = if j == cuts.len() { sorted.len() } else { sorted.partition_point(|&v| v <= cuts[j]) };
        reps.push(median_cpm(&sorted[start..end]));
        start = end;
    }
    PriceBinning::new(cuts, reps)
}

/// Quantile cuts with duplicates collapsed; may yield fewer than `k`
/// classes.
fn equal_frequency_fallback(sorted: &[f64], k: usize) -> PriceBinning {
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::new();
    for j in 1..k {
        let i = (j * n / k).clamp(1, n - 1);
        if sorted[i - 1] < sorted[i] {
            let c = (sorted[i - 1] + sorted[i]) / 2.0;
            if cuts.last().is_none_or(|&l| l < c) {
                cuts.push(c);
            }
        } else {
            // Quantile falls inside a run of duplicates; cut just above it.
            let v = sorted[i];
            let up = sorted.partition_point(|&x| x <= v);
            if up < n {
                let c = (v + sorted[up]) / 2.0;
                if cuts.last().is_none_or(|&l| l < c) {
                    cuts.push(c);
                }
            }
        }
    }
    binning_from_cuts(sorted, cuts)
        .unwrap_or_else(|_| PriceBinning { boundaries: Vec::new(), representatives: vec![median_cpm(sorted)] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn log_normalize_examples() {
        assert_eq!(log_normalize(&[1.0]).unwrap(), vec![0.0]);
        assert!((log_normalize(&[std::f64::consts::E]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!(matches!(log_normalize(&[1.0, 0.0]), Err(ModelError::NonPositivePrice(_))));
        assert!(log_normalize(&[-2.0]).is_err());
    }

    #[test]
    fn identical_prices_are_degenerate() {
        let logs = vec![0.5f64.ln(); 100];
        match fit_binning(&logs, 4) {
            Err(ModelError::DegenerateDistribution { distinct, fallback }) => {
                assert_eq!(distinct, 1);
                assert_eq!(fallback.k(), 1);
                assert_eq!(fallback.representatives[0], MicroCpm::from_micros(500_000));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn few_distinct_values_collapse_classes() {
        let mut logs = vec![1.0f64.ln(); 60];
        logs.extend(vec![3.0f64.ln(); 40]);
        match fit_binning(&logs, 4) {
            Err(ModelError::DegenerateDistribution { fallback, .. }) => {
                assert_eq!(fallback.k(), 2);
                assert_eq!(
                    fallback.representatives,
                    vec![MicroCpm::from_micros(1_000_000), MicroCpm::from_micros(3_000_000)]
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(fit_binning(&[0.0, 1.0, 2.0], 4), Err(ModelError::InsufficientSamples { .. })));
    }

    #[test]
    fn uniform_log_prices_give_balanced_classes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let logs: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..100f64.ln())).collect();
        let b = fit_binning(&logs, 4).unwrap();
        let mut counts = [0usize; 4];
        for &l in &logs {
            counts[b.class_of_log(l)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 0.25).abs() <= 0.05, "{counts:?}");
        }

        // Exhaustive oracle: every cut triple within the perturbation window
        // of the equal-frequency grid.
        let mut sorted = logs.clone();
        sorted.sort_by(f64::total_cmp);
        let cut_at = |i: usize| (sorted[i - 1] + sorted[i]) / 2.0;
        let min = (BALANCE_FLOOR / 4.0 * 1000.0).ceil() as usize;
        let ok = |c: &[f64]| {
            let mut prev = 0;
            for x in c {
                let i = sorted.partition_point(|v| v <= x);
                if i - prev < min {
                    return false;
                }
                prev = i;
            }
            1000 - prev >= min
        };
        let mut best = f64::NEG_INFINITY;
        for a in 230..=270 {
            for bb in 480..=520 {
                for c in 730..=770 {
                    let cuts = [cut_at(a), cut_at(bb), cut_at(c)];
                    if ok(&cuts) {
                        best = best.max(loo_log_likelihood(&sorted, &cuts));
                    }
                }
            }
        }
        assert!(loo_log_likelihood(&sorted, &b.boundaries) >= best - 1e-9);
    }

    #[test]
    fn lognormal_classes_respect_balance_floor() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let d = Normal::new(0.0, 1.0).unwrap();
        let logs: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        let b = fit_binning(&logs, 4).unwrap();
        let mut counts = [0usize; 4];
        for &l in &logs {
            counts[b.class_of_log(l)] += 1;
        }
        for c in counts {
            assert!(c as f64 / 10_000.0 >= BALANCE_FLOOR / 4.0, "{counts:?}");
        }
    }

    #[test]
    fn bimodal_boundary_matches_brute_force_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let lo = Normal::new(0.2f64.ln(), 0.2).unwrap();
        let hi = Normal::new(4.0f64.ln(), 0.2).unwrap();
        let mut logs: Vec<f64> = (0..500).map(|_| lo.sample(&mut rng)).collect();
        logs.extend((0..500).map(|_| hi.sample(&mut rng)));
        let b = fit_binning(&logs, 2).unwrap();

        // Brute-force scan of every cut within the perturbation window of
        // the equal-width and equal-frequency positions.
        let mut sorted = logs.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let reach = 20;
        let mid_range = (sorted[0] + sorted[n - 1]) / 2.0;
        let mut starts = vec![n / 2];
        // Rank of the midpoint nearest the middle of the range.
        let mut nearest = (f64::INFINITY, 0);
        for i in 1..n {
            let m = (sorted[i - 1] + sorted[i]) / 2.0;
            if (m - mid_range).abs() < nearest.0 {
                nearest = ((m - mid_range).abs(), i);
            }
        }
        starts.push(nearest.1);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for r in starts {
            for i in r.saturating_sub(reach).max(1)..=(r + reach).min(n - 1) {
                let cut = (sorted[i - 1] + sorted[i]) / 2.0;
                let s = loo_log_likelihood(&sorted, &[cut]);
                if s > best.0 {
                    best = (s, cut);
                }
            }
        }
        assert_eq!(b.boundaries, vec![best.1]);
        assert!(b.boundaries[0] > 0.2f64.ln() && b.boundaries[0] < 4.0f64.ln());
        assert!(b.representatives[0].as_cpm_f64() < 0.3 && b.representatives[1].as_cpm_f64() > 3.0);
    }

    #[test]
    fn representatives_are_class_medians() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = Normal::new(0.0, 1.0).unwrap();
        let logs: Vec<f64> = (0..2001).map(|_| d.sample(&mut rng)).collect();
        let b = fit_binning(&logs, 4).unwrap();
        for class in 0..4 {
            let mut members: Vec<f64> = logs.iter().filter(|&&l| b.class_of_log(l) == class).map(|l| l.exp()).collect();
            members.sort_by(f64::total_cmp);
            let m = members.len();
            let median = if m % 2 == 1 { members[m / 2] } else { (members[m / 2 - 1] + members[m / 2]) / 2.0 };
            assert_eq!(b.representatives[class], MicroCpm::from_cpm_f64(median));
            assert!(m as f64 >= 0.05 * 2001.0);
        }
    }

    proptest! {
        #[test]
        fn classes_are_exhaustive_and_monotone(
            logs in proptest::collection::vec(-5.0f64..5.0, 40..300),
            probes in proptest::collection::vec(-10.0f64..10.0, 1..50),
        ) {
            let b = match fit_binning(&logs, 4) {
                Ok(b) => b,
                Err(ModelError::DegenerateDistribution { fallback, .. }) => *fallback,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert!(b.validate().is_ok());
            let mut ps = probes.clone();
            ps.sort_by(f64::total_cmp);
            let classes: Vec<usize> = ps.iter().map(|&p| b.class_of_log(p)).collect();
            prop_assert!(classes.iter().all(|&c| c < b.k()));
            prop_assert!(classes.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn log_round_trip(prices in proptest::collection::vec(1e-6f64..1e6, 1..100)) {
            let logs = log_normalize(&prices).unwrap();
            for (p, l) in prices.iter().zip(logs) {
                prop_assert!((l.exp() - p).abs() <= 1e-12 * p.max(1.0));
            }
        }
    }
}
