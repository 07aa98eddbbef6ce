use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::forest::{Forest, ForestMode, ForestParams};
use super::ModelError;

/// Classification quality, averaged over classes weighted by support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tp_rate: f64,
    pub fp_rate: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc_roc: f64,
    pub oob_error: f64,
    pub accuracy: f64,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Support-weighted metrics from a confusion matrix alone (AUC and OOB
/// error left at zero).
pub fn metrics_from_confusion(confusion: &[Vec<u64>]) -> EvalMetrics {
    let k = confusion.len();
    let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<u64> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    let total: u64 = support.iter().sum();
    let mut m = EvalMetrics {
        tp_rate: 0.0,
        fp_rate: 0.0,
        precision: 0.0,
        recall: 0.0,
        auc_roc: 0.0,
        oob_error: 0.0,
        accuracy: 0.0,
        confusion: confusion.to_vec(),
    };
    if total == 0 {
        return m;
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    for c in 0..k {
        let w = support[c] as f64 / total as f64;
        let tp = confusion[c][c];
        let fp = predicted[c] - tp;
        m.precision += w * ratio(tp, predicted[c]);
        m.recall += w * ratio(tp, support[c]);
        m.fp_rate += w * ratio(fp, total - support[c]);
    }
    m.tp_rate = m.recall;
    m.accuracy = ratio((0..k).map(|c| confusion[c][c]).sum(), total);
    m
}

/// Mann-Whitney AUC of `scores` for separating positives from negatives;
/// tied scores count half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (average) ranks of positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC per class, averaged with support weights.
pub fn weighted_auc(labels: &[usize], probas: &[Vec<f64>], k: usize) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut weight = 0.0;
    for c in 0..k {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let scores: Vec<f64> = probas.iter().map(|p| p[c]).collect();
        if let Some(a) = binary_auc(&scores, &positive) {
            let w = positive.iter().filter(|&&p| p).count() as f64;
            total += w * a;
            weight += w;
        }
    }
    if weight == 0.0 {
        0.0
    } else {
        total / weight
    }
}

/// Metrics for a set of predictions.
pub fn score_predictions(labels: &[usize], predicted: &[usize], probas: &[Vec<f64>], k: usize) -> EvalMetrics {
    let mut confusion = vec![vec![0u64; k]; k];
    for (&a, &p) in labels.iter().zip(predicted) {
        confusion[a][p] += 1;
    }
    let mut m = metrics_from_confusion(&confusion);
    m.auc_roc = weighted_auc(labels, probas, k);
    m
}

/// Assigns every row to one of `folds` folds, class by class, after a
/// shuffle.
pub fn stratified_folds(labels: &[usize], k: usize, folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut fold_of = vec![0; labels.len()];
    let mut offset = 0;
    for c in 0..k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        for (j, &i) in members.iter().enumerate() {
            fold_of[i] = (offset + j) % folds;
        }
        offset += members.len();
    }
    fold_of
}

/// Stratified k-fold cross-validation repeated `runs` times.
///
/// Held-out predictions from every fold and run are pooled into one
/// confusion matrix, so each class's support is `runs` times its count.
/// The OOB error is the mean over the fitted forests.
pub fn evaluate(
    data: &Dataset,
    params: ForestParams,
    folds: usize,
    runs: usize,
    seed: u64,
) -> Result<EvalMetrics, ModelError> {
    if folds < 2 || runs == 0 {
        return Err(ModelError::InvalidParameter("need folds >= 2 and runs >= 1".into()));
    }
    let counts = data.class_counts();
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < folds) {
        return Err(ModelError::InsufficientClassSupport { class, count, folds });
    }
    let k = data.n_classes;
    let mut labels = Vec::new();
    let mut predicted = Vec::new();
    let mut probas = Vec::new();
    let mut oob = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for run in 0..runs {
        let fold_of = stratified_folds(&data.labels, k, folds, &mut rng);
        for fold in 0..folds {
            let train: Vec<usize> = (0..data.len()).filter(|&i| fold_of[i] != fold).collect();
            let test: Vec<usize> = (0..data.len()).filter(|&i| fold_of[i] == fold).collect();
            let forest_seed = seed.wrapping_add((run * folds + fold) as u64 + 1);
            let forest = Forest::fit(&data.subset(&train), params, ForestMode::Classification, forest_seed)?;
            oob.push(forest.oob_error);
            for &i in &test {
                let x = data.row(i);
                labels.push(data.labels[i]);
                predicted.push(forest.predict_class(x));
                probas.push(forest.predict_proba(x));
            }
        }
    }
    let mut m = score_predictions(&labels, &predicted, &probas, k);
    m.oob_error = oob.iter().sum::<f64>() / oob.len() as f64;
    Ok(m)
}
