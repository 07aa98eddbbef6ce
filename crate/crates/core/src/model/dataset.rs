use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::{columns, Cell, ColumnKind, FeatureGroup, FeatureVector};

/// Stand-in for a missing numeric value; every real numeric feature is
/// non-negative.
pub const MISSING_NUMERIC: f32 = -1.0;

/// Dense row-major matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f32>,
    pub n_features: usize,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Log prices, used by regression mode.
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f32>, n_features: usize, labels: Vec<usize>, n_classes: usize) -> Result<Self, ModelError> {
        let targets = labels.iter().map(|&l| l as f64).collect();
        Self::with_targets(x, n_features, labels, n_classes, targets)
    }

    pub fn with_targets(
        x: Vec<f32>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
        targets: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if n_features == 0 || x.len() != n_features * labels.len() || targets.len() != labels.len() {
            return Err(ModelError::InvalidParameter(format!(
                "matrix of {} values does not fit {} rows x {} features",
                x.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(ModelError::InvalidParameter(format!("label {l} >= class count {n_classes}")));
        }
        Ok(Dataset { x, n_features, labels, n_classes, targets })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            x.extend_from_slice(self.row(r));
        }
        Dataset {
            x,
            n_features: self.n_features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            n_classes: self.n_classes,
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
        }
    }

    /// Keeps only the given feature columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(self.len() * cols.len());
        for i in 0..self.len() {
            let row = self.row(i);
            x.extend(cols.iter().map(|&c| row[c]));
        }
        Dataset { x, n_features: cols.len(), ..self.clone() }
    }
}

/// One encoded model input: a numeric column or one level of a categorical
/// column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaColumn {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
}

/// Ordered encoding of feature vectors into model inputs. Categorical
/// columns are one-hot encoded over the levels seen in training; unseen
/// levels encode as all zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub columns: Vec<SchemaColumn>,
}

impl FeatureSchema {
    /// Builds the encoding from training vectors, restricted to `groups`.
    pub fn fit(rows: &[FeatureVector], groups: &BTreeSet<FeatureGroup>) -> FeatureSchema {
        let defs = columns();
        let mut levels: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for row in rows {
            for (i, cell) in row.cells().into_iter().enumerate() {
                if let Cell::Cat(v) = cell {
                    levels.entry(i).or_default().insert(v);
                }
            }
        }
        let mut out = Vec::new();
        for (i, def) in defs.iter().enumerate() {
            if !groups.contains(&def.group) {
                continue;
            }
            match def.kind {
                ColumnKind::Numeric => out.push(SchemaColumn { source: def.name.to_string(), level: None }),
                ColumnKind::Categorical => {
                    for level in levels.get(&i).into_iter().flatten() {
                        out.push(SchemaColumn { source: def.name.to_string(), level: Some(level.clone()) });
                    }
                }
            }
        }
        FeatureSchema { columns: out }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn retain(&self, keep: &[usize]) -> FeatureSchema {
        FeatureSchema { columns: keep.iter().map(|&i| self.columns[i].clone()).collect() }
    }

    pub fn groups(&self) -> BTreeSet<FeatureGroup> {
        let defs = columns();
        self.columns.iter().filter_map(|c| defs.iter().find(|d| d.name == c.source).map(|d| d.group)).collect()
    }

    pub fn encoder(&self) -> Result<Encoder, ModelError> {
        let defs = columns();
        let mut slots = Vec::with_capacity(self.columns.len());
        for c in &self.columns {
            let idx = defs
                .iter()
                .position(|d| d.name == c.source)
                .ok_or_else(|| ModelError::SchemaMismatch(format!("unknown feature {:?}", c.source)))?;
            let kind = defs[idx].kind;
            match (kind, &c.level) {
                (ColumnKind::Numeric, None) | (ColumnKind::Categorical, Some(_)) => {}
                _ => return Err(ModelError::SchemaMismatch(format!("feature {:?} has wrong encoding", c.source))),
            }
            slots.push((idx, c.level.clone()));
        }
        Ok(Encoder { slots })
    }
}

/// Resolved form of a [`FeatureSchema`].
#[derive(Debug, Clone)]
pub struct Encoder {
    slots: Vec<(usize, Option<String>)>,
}

impl Encoder {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn encode_into(&self, fv: &FeatureVector, out: &mut Vec<f32>) {
        let cells = fv.cells();
        for (idx, level) in &self.slots {
            let v = match (&cells[*idx], level) {
                (Cell::Num(x), None) => *x as f32,
                (Cell::Missing, None) => MISSING_NUMERIC,
                (Cell::Cat(v), Some(l)) => f32::from(u8::from(v == l)),
                _ => 0.0,
            };
            out.push(v);
        }
    }

    pub fn encode(&self, fv: &FeatureVector) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len());
        self.encode_into(fv, &mut out);
        out
    }

    pub fn encode_all(&self, rows: &[FeatureVector]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * rows.len());
        for r in rows {
            self.encode_into(r, &mut out);
        }
        out
    }
}
