use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, FeatureSchema};
use super::forest::ForestParams;
use super::metrics::{evaluate, EvalMetrics};
use super::ModelError;
use crate::features::{columns, FeatureGroup, FeatureVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub folds: usize,
    pub runs: usize,
    pub params: ForestParams,
    /// Rows are subsampled to at most this many before searching.
    pub max_rows: usize,
    pub precision_tolerance: f64,
    pub recall_tolerance: f64,
    /// Evaluate every subset instead of stopping at the first size that
    /// meets the tolerances.
    pub exhaustive: bool,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            folds: 3,
            runs: 1,
            params: ForestParams { n_trees: 30, ..ForestParams::default() },
            max_rows: 4000,
            precision_tolerance: 0.02,
            recall_tolerance: 0.06,
            exhaustive: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub groups: String,
    pub precision: f64,
    pub recall: f64,
    pub auc_roc: f64,
    pub precision_loss: f64,
    pub recall_loss: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelectionReport {
    /// Letter and description of every group.
    pub groups: Vec<(char, String)>,
    pub baseline: EvalMetrics,
    pub majority_rate: f64,
    pub candidates: Vec<SubsetResult>,
    pub chosen: Vec<FeatureGroup>,
    pub chosen_label: String,
    /// Why the full set was kept, when it was.
    pub fallback_reason: Option<String>,
}

fn label(groups: &BTreeSet<FeatureGroup>) -> String {
    groups.iter().map(|g| g.letter()).collect()
}

/// All non-empty subsets of `groups` of the given size, in lexicographic
/// order.
fn subsets_of_size(groups: &[FeatureGroup], size: usize) -> Vec<BTreeSet<FeatureGroup>> {
    let n = groups.len();
    let mut out = Vec::new();
    for mask in 1u32..(1 << n) {
        if mask.count_ones() as usize == size {
            out.push((0..n).filter(|i| mask & (1 << i) != 0).map(|i| groups[i]).collect());
        }
    }
    out.sort_by_key(label);
    out
}

/// Picks the smallest set of feature groups whose cross-validated precision
/// and recall stay within tolerance of the full set.
///
/// Subsets are tried by increasing size. When the full set itself predicts
/// no better than always answering the majority class (within 5 points),
/// there is nothing to preserve and the full set is kept.
pub fn select_features(
    rows: &[FeatureVector],
    labels: &[usize],
    n_classes: usize,
    cfg: &SelectionConfig,
) -> Result<FeatureSelectionReport, ModelError> {
    if rows.len() != labels.len() {
        return Err(ModelError::InvalidParameter("rows and labels differ in length".into()));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    order.truncate(cfg.max_rows.max(1));
    order.sort_unstable();
    let rows: Vec<FeatureVector> = order.iter().map(|&i| rows[i].clone()).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

    let all: BTreeSet<FeatureGroup> = FeatureGroup::ALL.into_iter().collect();
    let schema = FeatureSchema::fit(&rows, &all);
    let encoder = schema.encoder()?;
    let data = Dataset::new(encoder.encode_all(&rows), encoder.len(), labels, n_classes)?;
    let defs = columns();
    let group_of: Vec<FeatureGroup> = schema
        .columns
        .iter()
        .map(|c| defs.iter().find(|d| d.name == c.source).map_or(FeatureGroup::Time, |d| d.group))
        .collect();
    let present: Vec<FeatureGroup> = FeatureGroup::ALL.into_iter().filter(|g| group_of.contains(g)).collect();

    let eval = |groups: &BTreeSet<FeatureGroup>| -> Result<EvalMetrics, ModelError> {
        let cols: Vec<usize> = (0..group_of.len()).filter(|&c| groups.contains(&group_of[c])).collect();
        evaluate(&data.select_columns(&cols), cfg.params, cfg.folds, cfg.runs, cfg.seed)
    };

    let full: BTreeSet<FeatureGroup> = present.iter().copied().collect();
    let baseline = eval(&full)?;
    let majority_rate = data.class_counts().into_iter().max().unwrap_or(0) as f64 / data.len().max(1) as f64;
    let mut report = FeatureSelectionReport {
        groups: FeatureGroup::ALL.iter().map(|g| (g.letter(), g.description().to_string())).collect(),
        baseline: baseline.clone(),
        majority_rate,
        candidates: Vec::new(),
        chosen: full.iter().copied().collect(),
        chosen_label: label(&full),
        fallback_reason: None,
    };
    if baseline.accuracy <= majority_rate + 0.05 {
        report.fallback_reason = Some(format!(
            "full set accuracy {:.3} does not beat the majority rate {:.3}; no signal to preserve",
            baseline.accuracy, majority_rate
        ));
        return Ok(report);
    }

    let mut best: Option<(BTreeSet<FeatureGroup>, SubsetResult)> = None;
    for size in 1..present.len() {
        for subset in subsets_of_size(&present, size) {
            let m = eval(&subset)?;
            let precision_loss = baseline.precision - m.precision;
            let recall_loss = baseline.recall - m.recall;
            let result = SubsetResult {
                groups: label(&subset),
                precision: m.precision,
                recall: m.recall,
                auc_roc: m.auc_roc,
                precision_loss,
                recall_loss,
                within_tolerance: precision_loss < cfg.precision_tolerance && recall_loss < cfg.recall_tolerance,
            };
            let better = |b: &SubsetResult| {
                subset.len() < b.groups.len() || (subset.len() == b.groups.len() && result.precision > b.precision)
            };
            if result.within_tolerance && best.as_ref().is_none_or(|(_, b)| better(b)) {
                best = Some((subset.clone(), result.clone()));
            }
            report.candidates.push(result);
        }
        if best.is_some() && !cfg.exhaustive {
            break;
        }
    }
    match best {
        Some((groups, _)) => {
            report.chosen_label = label(&groups);
            report.chosen = groups.into_iter().collect();
        }
        None => {
            report.fallback_reason = Some("no proper subset stays within the loss tolerances".into());
        }
    }
    Ok(report)
}
