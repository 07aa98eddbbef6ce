use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::binning::PriceBinning;
use super::dataset::FeatureSchema;
use super::forest::{Forest, ForestMode, ForestParams, Tree};
use super::{ModelError, PriceModel, TrainingMeta};

pub const MODEL_SCHEMA_VERSION: u64 = 1;

#[derive(Serialize)]
struct ModelFileRef<'a> {
    schema_version: u64,
    feature_schema: &'a FeatureSchema,
    binning: &'a PriceBinning,
    mode: ForestMode,
    params: ForestParams,
    seed: u64,
    trees: &'a [Tree],
    training_meta: &'a TrainingMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[allow(dead_code)]
    schema_version: u64,
    feature_schema: FeatureSchema,
    binning: PriceBinning,
    mode: ForestMode,
    params: ForestParams,
    seed: u64,
    trees: Vec<Tree>,
    training_meta: TrainingMeta,
}

/// Serializes a model as a single JSON document.
pub fn export_model(model: &PriceModel) -> Vec<u8> {
    let file = ModelFileRef {
        schema_version: MODEL_SCHEMA_VERSION,
        feature_schema: &model.schema,
        binning: &model.binning,
        mode: model.forest.mode,
        params: model.forest.params,
        seed: model.forest.seed,
        trees: &model.forest.trees,
        training_meta: &model.training_meta,
    };
    serde_json::to_vec(&file).unwrap_or_default()
}

/// Parses and validates a model document.
pub fn import_model(bytes: &[u8]) -> Result<PriceModel, ModelError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| ModelError::CorruptModel(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| ModelError::CorruptModel("missing schema_version".into()))?;
    if version != MODEL_SCHEMA_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: MODEL_SCHEMA_VERSION });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| ModelError::CorruptModel(e.to_string()))?;
    file.binning.validate()?;
    let forest = Forest {
        mode: file.mode,
        params: file.params,
        n_features: file.feature_schema.len(),
        n_classes: file.binning.k(),
        seed: file.seed,
        trees: file.trees,
        oob_error: file.training_meta.oob_error,
    };
    forest.validate()?;
    PriceModel::assemble(file.feature_schema, file.binning, forest, file.training_meta).map_err(|e| match e {
        ModelError::SchemaMismatch(m) => ModelError::CorruptModel(m),
        other => other,
    })
}

/// Hex SHA-256 of a serialized model.
pub fn model_checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
