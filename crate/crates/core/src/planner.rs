//! Probing-campaign setups and sample-size arithmetic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("missing dimension {0:?}")]
    MissingDimension(String),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid sample-size parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterDimension {
    pub name: String,
    pub values: Vec<String>,
}

impl FilterDimension {
    pub fn new(name: &str, values: &[&str]) -> Self {
        FilterDimension { name: name.to_string(), values: values.iter().map(|v| v.to_string()).collect() }
    }
}

/// One campaign: a value for every dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CampaignSetup {
    pub assignment: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupStrategy {
    FullCross,
    /// City × interaction × time of day × day of week × ad format.
    #[serde(rename = "paper_144")]
    Paper144,
}

pub const PAPER_144_DIMENSIONS: [&str; 5] = ["city", "interaction", "tod", "dow", "ad_format"];

/// The campaign filters available for Spanish mobile campaigns.
pub fn default_dimensions() -> Vec<FilterDimension> {
    vec![
        FilterDimension::new("city", &["Madrid", "Barcelona", "Valencia", "Seville"]),
        FilterDimension::new("interaction", &["app", "mobile_web"]),
        FilterDimension::new("tod", &["12am-9am", "9am-6pm", "6pm-12am"]),
        FilterDimension::new("dow", &["weekday", "weekend"]),
        FilterDimension::new("device_type", &["smartphone", "tablet"]),
        FilterDimension::new("os", &["ios", "android"]),
        FilterDimension::new("ad_format", &["320x50", "300x250", "320x480"]),
        FilterDimension::new("adx", &["mopub", "openx", "rubicon", "doubleclick", "pulsepoint"]),
    ]
}

fn validate(dims: &[FilterDimension]) -> Result<(), PlannerError> {
    let mut names = BTreeSet::new();
    for d in dims {
        if d.values.is_empty() {
            return Err(PlannerError::InvalidDimension(format!("{:?} has no values", d.name)));
        }
        if !names.insert(d.name.as_str()) {
            return Err(PlannerError::InvalidDimension(format!("{:?} appears twice", d.name)));
        }
        let distinct: BTreeSet<&String> = d.values.iter().collect();
        if distinct.len() != d.values.len() {
            return Err(PlannerError::InvalidDimension(format!("{:?} repeats a value", d.name)));
        }
    }
    Ok(())
}

/// Cartesian product of the dimensions; the first dimension varies slowest.
pub fn full_cross(dims: &[FilterDimension]) -> Vec<CampaignSetup> {
    let mut out = vec![BTreeMap::new()];
    for d in dims {
        let mut next = Vec::with_capacity(out.len() * d.values.len());
        for partial in &out {
            for v in &d.values {
                let mut a = partial.clone();
                a.insert(d.name.clone(), v.clone());
                next.push(a);
            }
        }
        out = next;
    }
    if dims.is_empty() {
        return Vec::new();
    }
    out.into_iter().map(|assignment| CampaignSetup { assignment }).collect()
}

pub fn enumerate_setups(dims: &[FilterDimension], strategy: SetupStrategy) -> Result<Vec<CampaignSetup>, PlannerError> {
    validate(dims)?;
    match strategy {
        SetupStrategy::FullCross => Ok(full_cross(dims)),
        SetupStrategy::Paper144 => {
            let picked = PAPER_144_DIMENSIONS
                .iter()
                .map(|name| {
                    dims.iter()
                        .find(|d| d.name == *name)
                        .cloned()
                        .ok_or_else(|| PlannerError::MissingDimension(name.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(full_cross(&picked))
        }
    }
}

/// Two-sided standard normal quantile `Z_{α/2}`.
pub fn z_score(alpha: f64) -> Result<f64, PlannerError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PlannerError::InvalidParams(format!("alpha {alpha} outside (0, 1)")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

fn check_std(std: f64) -> Result<(), PlannerError> {
    if std > 0.0 && std.is_finite() {
        Ok(())
    } else {
        Err(PlannerError::InvalidParams(format!("std {std} must be positive")))
    }
}

/// Margin of error on the mean price after `n` samples: `Z·std/√n`.
pub fn margin_of_error(std: f64, n: u64, alpha: f64) -> Result<f64, PlannerError> {
    check_std(std)?;
    if n == 0 {
        return Err(PlannerError::InvalidParams("n must be at least 1".into()));
    }
    Ok(z_score(alpha)? * std / (n as f64).sqrt())
}

/// Smallest sample count whose margin of error is at most `d`:
/// `⌈(Z·std/d)²⌉`.
pub fn required_n(std: f64, d: f64, alpha: f64) -> Result<u64, PlannerError> {
    check_std(std)?;
    if !(d > 0.0 && d.is_finite()) {
        return Err(PlannerError::InvalidParams(format!("margin {d} must be positive")));
    }
    let x = z_score(alpha)? * std / d;
    // Absorb rounding so an exact square is not bumped to the next integer.
    Ok((x * x * (1.0 - 1e-12)).ceil() as u64)
}

/// Upper bound in USD for buying `impressions_per_setup` impressions in
/// every setup at `max_bid_cpm`.
pub fn budget_usd(setups: usize, impressions_per_setup: u64, max_bid_cpm: f64) -> f64 {
    setups as f64 * impressions_per_setup as f64 * max_bid_cpm / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSizeParams {
    /// Standard deviation of prices across campaigns (CPM).
    pub campaign_std: f64,
    /// Standard deviation of prices within one campaign (CPM).
    pub impression_std: f64,
    /// Target margin of error for one campaign's mean price (CPM).
    pub impression_margin: f64,
    pub alpha: f64,
    /// Mean campaign price, for reporting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_cpm: Option<f64>,
}

impl Default for SampleSizeParams {
    fn default() -> Self {
        SampleSizeParams {
            campaign_std: 2.15,
            impression_std: 0.694,
            impression_margin: 0.1,
            alpha: 0.05,
            mean_cpm: Some(1.84),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeBlock {
    pub z: f64,
    pub setups: usize,
    pub campaign_std: f64,
    pub margin_of_error: f64,
    pub impression_std: f64,
    pub impression_margin: f64,
    pub impressions_per_setup: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_cpm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignPlan {
    pub strategy: SetupStrategy,
    pub dimensions: Vec<FilterDimension>,
    pub setups: Vec<CampaignSetup>,
    pub sample_size: SampleSizeBlock,
    pub max_bid_cpm: f64,
    pub budget_usd: f64,
}

pub fn plan(
    dims: &[FilterDimension],
    strategy: SetupStrategy,
    params: &SampleSizeParams,
    max_bid_cpm: f64,
) -> Result<CampaignPlan, PlannerError> {
    let setups = enumerate_setups(dims, strategy)?;
    let n = setups.len() as u64;
    let impressions = required_n(params.impression_std, params.impression_margin, params.alpha)?;
    let sample_size = SampleSizeBlock {
        z: z_score(params.alpha)?,
        setups: setups.len(),
        campaign_std: params.campaign_std,
        margin_of_error: margin_of_error(params.campaign_std, n.max(1), params.alpha)?,
        impression_std: params.impression_std,
        impression_margin: params.impression_margin,
        impressions_per_setup: impressions,
        mean_cpm: params.mean_cpm,
    };
    Ok(CampaignPlan {
        strategy,
        dimensions: dims.to_vec(),
        budget_usd: budget_usd(setups.len(), impressions, max_bid_cpm),
        setups,
        sample_size,
        max_bid_cpm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_144_setups() {
        let setups = enumerate_setups(&default_dimensions(), SetupStrategy::Paper144).unwrap();
        assert_eq!(setups.len(), 144);
        let distinct: std::collections::HashSet<_> = setups.iter().collect();
        assert_eq!(distinct.len(), 144);
        assert!(setups.iter().all(|s| s.assignment.len() == 5));
        let mut dims = default_dimensions();
        dims.retain(|d| d.name != "tod");
        assert_eq!(enumerate_setups(&dims, SetupStrategy::Paper144), Err(PlannerError::MissingDimension("tod".into())));
    }

    #[test]
    fn small_full_cross_in_order() {
        let dims = vec![FilterDimension::new("a", &["x"]), FilterDimension::new("b", &["y", "z"])];
        let s = enumerate_setups(&dims, SetupStrategy::FullCross).unwrap();
        let flat: Vec<Vec<&str>> =
            s.iter().map(|c| vec![c.assignment["a"].as_str(), c.assignment["b"].as_str()]).collect();
        assert_eq!(flat, vec![vec!["x", "y"], vec!["x", "z"]]);
    }

    #[test]
    fn invalid_dimensions() {
        let dup = vec![FilterDimension::new("a", &["x"]), FilterDimension::new("a", &["y"])];
        assert!(matches!(enumerate_setups(&dup, SetupStrategy::FullCross), Err(PlannerError::InvalidDimension(_))));
        let empty = vec![FilterDimension::new("a", &[])];
        assert!(enumerate_setups(&empty, SetupStrategy::FullCross).is_err());
    }

    #[test]
    fn margin_for_144_setups() {
        let d = margin_of_error(2.15, 144, 0.05).unwrap();
        assert!((d - 0.35).abs() < 0.005, "{d}");
        assert!((d - 1.959_963_984_540_054 * 2.15 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn impressions_per_campaign() {
        // (1.96 * 0.694 / 0.1)^2 = 185.02..., so the ceiling is 186; a
        // within-campaign deviation of 0.6939 gives the 185 impressions.
        assert_eq!(required_n(0.694, 0.1, 0.05).unwrap(), 186);
        assert_eq!(required_n(0.6939, 0.1, 0.05).unwrap(), 185);
    }

    #[test]
    fn quadrupling_n_halves_margin() {
        let a = margin_of_error(1.3, 50, 0.05).unwrap();
        let b = margin_of_error(1.3, 200, 0.05).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn budgets() {
        assert!((budget_usd(144, 185, 5.0) - 133.2).abs() < 1e-9);
        assert_eq!(budget_usd(1, 1000, 1.0), 1.0);
        assert_eq!(budget_usd(10, 0, 3.0), 0.0);
    }

    #[test]
    fn bad_params() {
        assert!(z_score(0.0).is_err());
        assert!(margin_of_error(-1.0, 5, 0.05).is_err());
        assert!(margin_of_error(1.0, 0, 0.05).is_err());
        assert!(required_n(1.0, 0.0, 0.05).is_err());
    }

    #[test]
    fn plan_block() {
        let p = plan(&default_dimensions(), SetupStrategy::Paper144, &SampleSizeParams::default(), 5.0).unwrap();
        assert_eq!(p.setups.len(), 144);
        assert_eq!(p.sample_size.impressions_per_setup, 186);
        assert!((p.budget_usd - 144.0 * 186.0 * 5.0 / 1000.0).abs() < 1e-9);
    }

    fn nested_loop_count(sizes: &[usize]) -> usize {
        fn go(sizes: &[usize]) -> usize {
            match sizes.split_first() {
                None => 1,
                Some((&first, rest)) => (0..first).map(|_| go(rest)).sum(),
            }
        }
        if sizes.is_empty() {
            0
        } else {
            go(sizes)
        }
    }

    proptest! {
        #[test]
        fn full_cross_matches_nested_loops(sizes in proptest::collection::vec(1usize..5, 0..5)) {
            let dims: Vec<FilterDimension> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| FilterDimension {
                    name: format!("d{i}"),
                    values: (0..n).map(|v| format!("v{v}")).collect(),
                })
                .collect();
            let setups = enumerate_setups(&dims, SetupStrategy::FullCross).unwrap();
            prop_assert_eq!(setups.len(), nested_loop_count(&sizes));
            let distinct: std::collections::HashSet<_> = setups.iter().collect();
            prop_assert_eq!(distinct.len(), setups.len());
        }

        #[test]
        fn ceiling_round_trip(std in 0.05f64..10.0, n in 1u64..100_000) {
            let d = margin_of_error(std, n, 0.05).unwrap();
            let back = required_n(std, d, 0.05).unwrap();
            prop_assert!(back <= n && n <= back + 1, "n={} back={}", n, back);
        }

        #[test]
        fn margin_monotone(std in 0.05f64..10.0, n in 1u64..10_000) {
            let d = margin_of_error(std, n, 0.05).unwrap();
            prop_assert!(margin_of_error(std, n + 1, 0.05).unwrap() < d);
            prop_assert!(margin_of_error(std * 1.01, n, 0.05).unwrap() > d);
        }
    }
}
