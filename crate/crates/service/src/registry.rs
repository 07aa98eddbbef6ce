use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use adcost_core::model::{import_model, model_checksum, ModelError};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("no model published")]
    NoModel,
    #[error("unknown model version {0}")]
    UnknownVersion(u64),
    #[error("stored model v{0} does not match its checksum")]
    ChecksumMismatch(u64),
    #[error("invalid model: {0}")]
    InvalidModel(#[from] ModelError),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One published model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: u64,
    pub created_at: DateTime<Utc>,
    /// SHA-256 of the model's training metadata.
    pub meta_digest: String,
    /// SHA-256 of the model file.
    pub checksum: String,
    pub file: String,
}

/// Directory of immutable model files plus a manifest listing them in
/// version order.
#[derive(Debug)]
pub struct ModelRegistry {
    dir: PathBuf,
    publish_lock: Mutex<()>,
}

impl ModelRegistry {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let reg = ModelRegistry { dir, publish_lock: Mutex::new(()) };
        reg.manifests()?;
        Ok(reg)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifests(&self) -> Result<Vec<ModelManifest>, RegistryError> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let list: Vec<ModelManifest> =
            serde_json::from_str(&text).map_err(|e| RegistryError::Manifest(e.to_string()))?;
        if list.windows(2).any(|w| w[0].version >= w[1].version) {
            return Err(RegistryError::Manifest("versions not strictly increasing".into()));
        }
        Ok(list)
    }

    /// Validates `bytes` as a model and stores it under the next version.
    pub fn publish(&self, bytes: &[u8], created_at: DateTime<Utc>) -> Result<ModelManifest, RegistryError> {
        let model = import_model(bytes)?;
        let meta = serde_json::to_vec(&model.training_meta).map_err(|e| RegistryError::Manifest(e.to_string()))?;
        let _guard = self.publish_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut list = self.manifests()?;
        let version = list.last().map_or(1, |m| m.version + 1);
        let file = format!("model-v{version}.json");
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(self.dir.join(&file))?;
        f.write_all(bytes)?;
        f.sync_all()?;
        let manifest = ModelManifest {
            version,
            created_at,
            meta_digest: model_checksum(&meta),
            checksum: model_checksum(bytes),
            file,
        };
        list.push(manifest.clone());
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&list).map_err(|e| RegistryError::Manifest(e.to_string()))?;
        fs::write(&tmp, text)?;
        fs::rename(&tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Reads a model and checks it against its manifest; `None` means latest.
    pub fn fetch(&self, version: Option<u64>) -> Result<(ModelManifest, Vec<u8>), RegistryError> {
        let list = self.manifests()?;
        let manifest = match version {
            None => list.last().cloned().ok_or(RegistryError::NoModel)?,
            Some(v) => list.into_iter().find(|m| m.version == v).ok_or(RegistryError::UnknownVersion(v))?,
        };
        let bytes = fs::read(self.dir.join(&manifest.file))?;
        if model_checksum(&bytes) != manifest.checksum {
            return Err(RegistryError::ChecksumMismatch(manifest.version));
        }
        Ok((manifest, bytes))
    }
}
