//! Price classes, random-forest training and evaluation, feature-group
//! selection and the model file format.

mod binning;
mod dataset;
mod forest;
mod metrics;
mod selection;
mod variance;
mod wire;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binning::{fit_binning, log_normalize, loo_log_likelihood, PriceBinning, BALANCE_FLOOR, MIN_CLASS_SHARE};
pub use dataset::{Dataset, Encoder, FeatureSchema, SchemaColumn, MISSING_NUMERIC};
pub use forest::{Forest, ForestMode, ForestParams, Node, Tree};
pub use metrics::{
    binary_auc, evaluate, metrics_from_confusion, score_predictions, stratified_folds, weighted_auc, EvalMetrics,
};
pub use selection::{select_features, FeatureSelectionReport, SelectionConfig, SubsetResult};
pub use variance::variance_filter;
pub use wire::{export_model, import_model, model_checksum, MODEL_SCHEMA_VERSION};

use crate::features::{FeatureGroup, FeatureVector};
use crate::money::MicroCpm;
use crate::nurl::PriceNotification;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("price {0} is not positive")]
    NonPositivePrice(f64),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("only {distinct} distinct prices; too few for the requested classes")]
    DegenerateDistribution { distinct: usize, fallback: Box<PriceBinning> },
    #[error("training data holds a single class")]
    SingleClassData,
    #[error("class {class} has {count} samples, fewer than {folds} folds")]
    InsufficientClassSupport { class: usize, count: usize, folds: usize },
    #[error("input does not match model schema: {0}")]
    SchemaMismatch(String),
    #[error("model schema version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no price known for token {0:?}")]
    UnknownToken(String),
}

/// A feature vector with its observed charge price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub features: FeatureVector,
    pub cpm: MicroCpm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub classes: usize,
    pub params: ForestParams,
    pub mode: ForestMode,
    /// Feature groups to train on; `None` uses all of them.
    pub groups: Option<BTreeSet<FeatureGroup>>,
    pub variance_filter: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            classes: 4,
            params: ForestParams::default(),
            mode: ForestMode::Classification,
            groups: None,
            variance_filter: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub samples: usize,
    pub class_counts: Vec<usize>,
    pub groups: Vec<FeatureGroup>,
    pub dropped_columns: usize,
    pub oob_error: f64,
    pub min_cpm: f64,
    pub max_cpm: f64,
    /// Set when the prices had too few distinct values for the requested
    /// class count and fewer classes were used.
    pub collapsed_classes: bool,
}

/// A trained price model: feature encoding, price classes and forest.
#[derive(Debug, Clone)]
pub struct PriceModel {
    pub schema: FeatureSchema,
    pub binning: PriceBinning,
    pub forest: Forest,
    pub training_meta: TrainingMeta,
    encoder: Encoder,
}

impl PartialEq for PriceModel {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.binning == other.binning
            && self.forest == other.forest
            && self.training_meta == other.training_meta
    }
}

/// Price classes for the given rows, falling back to collapsed classes when
/// prices are too uniform.
pub fn fit_row_binning(rows: &[TrainingRow], classes: usize) -> Result<(PriceBinning, bool), ModelError> {
    let prices: Vec<f64> = rows.iter().map(|r| r.cpm.as_cpm_f64()).collect();
    let logs = log_normalize(&prices)?;
    match fit_binning(&logs, classes) {
        Ok(b) => Ok((b, false)),
        Err(ModelError::DegenerateDistribution { fallback, .. }) if fallback.k() >= 2 => Ok((*fallback, true)),
        Err(e) => Err(e),
    }
}

/// Encoded training data under a fixed binning.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub schema: FeatureSchema,
    pub data: Dataset,
    pub groups: BTreeSet<FeatureGroup>,
    /// Columns removed by the variance filter.
    pub dropped: usize,
}

pub fn prepare_dataset(
    rows: &[TrainingRow],
    binning: &PriceBinning,
    cfg: &TrainConfig,
) -> Result<PreparedDataset, ModelError> {
    let prices: Vec<f64> = rows.iter().map(|r| r.cpm.as_cpm_f64()).collect();
    let logs = log_normalize(&prices)?;
    let labels: Vec<usize> = logs.iter().map(|&l| binning.class_of_log(l)).collect();
    let groups = cfg.groups.clone().unwrap_or_else(|| FeatureGroup::ALL.into_iter().collect());
    let features: Vec<FeatureVector> = rows.iter().map(|r| r.features.clone()).collect();
    let mut schema = FeatureSchema::fit(&features, &groups);
    if schema.is_empty() {
        return Err(ModelError::InvalidParameter("selected feature groups produce no columns".into()));
    }
    let encoder = schema.encoder()?;
    let mut data = Dataset::with_targets(encoder.encode_all(&features), encoder.len(), labels, binning.k(), logs)?;
    let mut dropped = 0;
    if cfg.variance_filter {
        let keep = variance_filter(&data);
        if !keep.is_empty() && keep.len() < schema.len() {
            dropped = schema.len() - keep.len();
            schema = schema.retain(&keep);
            data = data.select_columns(&keep);
        }
    }
    Ok(PreparedDataset { schema, data, groups, dropped })
}

/// Stratified k-fold cross-validation, repeated `runs` times, with price
/// classes fitted on all rows.
pub fn cross_validate(
    rows: &[TrainingRow],
    cfg: &TrainConfig,
    folds: usize,
    runs: usize,
) -> Result<EvalMetrics, ModelError> {
    let (binning, _) = fit_row_binning(rows, cfg.classes)?;
    let prepared = prepare_dataset(rows, &binning, cfg)?;
    evaluate(&prepared.data, cfg.params, folds, runs, cfg.seed)
}

/// Trains on a seeded random split and scores the held-out share. Price
/// classes come from the training part only.
pub fn holdout_eval(rows: &[TrainingRow], cfg: &TrainConfig, test_share: f64) -> Result<EvalMetrics, ModelError> {
    if !(test_share > 0.0 && test_share < 1.0) {
        return Err(ModelError::InvalidParameter(format!("test share {test_share} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = ((rows.len() as f64 * test_share).round() as usize).clamp(1, rows.len().saturating_sub(1).max(1));
    let (test, train) = idx.split_at(n_test);
    let train_rows: Vec<TrainingRow> = train.iter().map(|&i| rows[i].clone()).collect();
    let model = PriceModel::train(&train_rows, cfg)?;
    let k = model.binning.k();
    let mut labels = Vec::with_capacity(test.len());
    let mut predicted = Vec::with_capacity(test.len());
    let mut probas = Vec::with_capacity(test.len());
    for &i in test {
        let fv = &rows[i].features;
        let p = model.predict_class(fv);
        labels.push(model.binning.class_of(rows[i].cpm));
        predicted.push(p);
        probas.push(match model.forest.mode {
            ForestMode::Classification => model.predict_proba(fv),
            ForestMode::Regression => (0..k).map(|c| if c == p { 1.0 } else { 0.0 }).collect(),
        });
    }
    let mut m = score_predictions(&labels, &predicted, &probas, k);
    m.oob_error = model.forest.oob_error;
    Ok(m)
}

impl PriceModel {
    pub fn assemble(
        schema: FeatureSchema,
        binning: PriceBinning,
        forest: Forest,
        training_meta: TrainingMeta,
    ) -> Result<Self, ModelError> {
        let encoder = schema.encoder()?;
        if encoder.len() != forest.n_features {
            return Err(ModelError::CorruptModel(format!(
                "schema has {} columns, forest expects {}",
                encoder.len(),
                forest.n_features
            )));
        }
        if forest.mode == ForestMode::Classification && forest.n_classes != binning.k() {
            return Err(ModelError::CorruptModel("forest and binning disagree on class count".into()));
        }
        Ok(PriceModel { schema, binning, forest, training_meta, encoder })
    }

    pub fn train(rows: &[TrainingRow], cfg: &TrainConfig) -> Result<Self, ModelError> {
        let (binning, collapsed) = fit_row_binning(rows, cfg.classes)?;
        Self::train_with_binning(rows, binning, collapsed, cfg)
    }

    pub fn train_with_binning(
        rows: &[TrainingRow],
        binning: PriceBinning,
        collapsed_classes: bool,
        cfg: &TrainConfig,
    ) -> Result<Self, ModelError> {
        let prepared = prepare_dataset(rows, &binning, cfg)?;
        let forest = Forest::fit(&prepared.data, cfg.params, cfg.mode, cfg.seed)?;
        let prices: Vec<f64> = rows.iter().map(|r| r.cpm.as_cpm_f64()).collect();
        let meta = TrainingMeta {
            samples: rows.len(),
            class_counts: prepared.data.class_counts(),
            groups: prepared.groups.into_iter().collect(),
            dropped_columns: prepared.dropped,
            oob_error: forest.oob_error,
            min_cpm: prices.iter().copied().fold(f64::INFINITY, f64::min),
            max_cpm: prices.iter().copied().fold(0.0, f64::max),
            collapsed_classes,
        };
        Self::assemble(prepared.schema, binning, forest, meta)
    }

    pub fn encode(&self, fv: &FeatureVector) -> Vec<f32> {
        self.encoder.encode(fv)
    }

    pub fn predict_class(&self, fv: &FeatureVector) -> usize {
        match self.forest.mode {
            ForestMode::Classification => self.forest.predict_class(&self.encode(fv)),
            ForestMode::Regression => self.binning.class_of_log(self.forest.predict_value(&self.encode(fv))),
        }
    }

    pub fn predict_proba(&self, fv: &FeatureVector) -> Vec<f64> {
        self.forest.predict_proba(&self.encode(fv))
    }

    /// Estimated charge price: the representative of the predicted class,
    /// or the back-transformed mean log price in regression mode.
    pub fn estimate_price(&self, fv: &FeatureVector) -> MicroCpm {
        match self.forest.mode {
            ForestMode::Classification => self.binning.representative(self.predict_class(fv)),
            ForestMode::Regression => {
                MicroCpm::from_cpm_f64(self.forest.predict_value(&self.encode(fv)).exp()).max(MicroCpm::from_micros(1))
            }
        }
    }
}

/// Anything that can price an encrypted notification.
pub trait PriceEstimator {
    fn estimate(&self, n: &PriceNotification, features: &FeatureVector) -> Result<MicroCpm, ModelError>;
}

impl PriceEstimator for PriceModel {
    fn estimate(&self, _n: &PriceNotification, features: &FeatureVector) -> Result<MicroCpm, ModelError> {
        Ok(self.estimate_price(features))
    }
}

/// Fixed-price estimator.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEstimator(pub MicroCpm);

impl PriceEstimator for ConstantEstimator {
    fn estimate(&self, _n: &PriceNotification, _f: &FeatureVector) -> Result<MicroCpm, ModelError> {
        Ok(self.0)
    }
}
