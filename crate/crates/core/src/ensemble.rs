//! Weighted average of per-checkpoint predictions.
//!
//! A spec is a TOML file:
//!
//! ```toml
//! normalizer = 1.0
//!
//! [[entry]]
//! label = "graphormer fold 0"    # optional
//! checkpoint = "g0.ckpt"         # relative to the spec file
//! weight = 0.5
//! ```
//!
//! Predictions are written as `id<TAB>value` lines.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::featurize::{featurize_all, FeatureError, FeaturizedGraph, RbfConfig, SpatialMode};
use crate::graph::MolecularGraph;
use crate::model::{Checkpoint, ModelConfig, ModelError};
use crate::train::predict_all;

/// Allowed gap between the normalizer and the sum of weights.
pub const NORMALIZER_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("ensemble spec has no entries")]
    Empty,
    #[error("entry {index}: weight {weight} must be positive and finite")]
    Weight { index: usize, weight: f64 },
    #[error("normalizer {normalizer} differs from the weight sum {sum}")]
    Normalizer { normalizer: f64, sum: f64 },
    #[error("{rows} prediction rows for {entries} entries")]
    Rows { rows: usize, entries: usize },
    #[error("prediction row {row} has {len} values, expected {expected}")]
    Columns { row: usize, len: usize, expected: usize },
    #[error("prediction row {row}, column {col} is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("entry {index} ({path}): {source}")]
    Entry {
        index: usize,
        path: String,
        #[source]
        source: ModelError,
    },
    #[error("entry {index}: {source}")]
    Featurize {
        index: usize,
        #[source]
        source: FeatureError,
    },
    #[error("ensemble spec: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("ensemble I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub checkpoint: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub normalizer: f64,
    #[serde(rename = "entry", default)]
    pub entries: Vec<EnsembleEntry>,
}

impl EnsembleSpec {
    pub fn from_toml(text: &str) -> Result<Self, EnsembleError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads and validates a spec; relative checkpoint paths are resolved
    /// against the spec's directory.
    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        let mut spec = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut spec.entries {
            if e.checkpoint.is_relative() {
                e.checkpoint = base.join(&e.checkpoint);
            }
        }
        validate_spec(spec)
    }

    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }
}

pub fn validate_spec(spec: EnsembleSpec) -> Result<EnsembleSpec, EnsembleError> {
    if spec.entries.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if let Some((index, e)) = spec
        .entries
        .iter()
        .enumerate()
        .find(|(_, e)| !(e.weight > 0.0 && e.weight.is_finite()))
    {
        return Err(EnsembleError::Weight { index, weight: e.weight });
    }
    let sum = spec.weight_sum();
    // written so that a NaN sum is rejected
    let close = (sum - spec.normalizer).abs() <= NORMALIZER_TOLERANCE;
    if !close {
        return Err(EnsembleError::Normalizer {
            normalizer: spec.normalizer,
            sum,
        });
    }
    Ok(spec)
}

/// Correctly rounded sum of `xs`, independent of their order.
fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    // Shewchuk's partials
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let mut hi = 0.0;
    while let Some(x) = partials.pop() {
        let prev = hi;
        hi = prev + x;
        let lo = x - (hi - prev);
        if lo != 0.0 {
            if let Some(&next) = partials.last() {
                if (lo < 0.0) == (next < 0.0) {
                    let y = lo * 2.0;
                    let t = hi + y;
                    if y == t - hi {
                        hi = t;
                    }
                }
            }
            break;
        }
    }
    hi
}

/// `out_j = Σ_i w_i pred[i][j] / normalizer`.
///
/// Evaluated as `m_j + Σ_i w_i (pred[i][j] − m_j) / normalizer` with `m_j` the
/// column minimum and an exactly rounded sum, then bounded by the column
/// maximum. Constant columns therefore come back unchanged and the result does
/// not depend on entry order.
pub fn ensemble_predict(preds: &[Vec<f64>], spec: &EnsembleSpec) -> Result<Vec<f64>, EnsembleError> {
    if preds.len() != spec.entries.len() {
        return Err(EnsembleError::Rows {
            rows: preds.len(),
            entries: spec.entries.len(),
        });
    }
    let n = preds.first().map_or(0, Vec::len);
    for (row, p) in preds.iter().enumerate() {
        if p.len() != n {
            return Err(EnsembleError::Columns {
                row,
                len: p.len(),
                expected: n,
            });
        }
        if let Some(col) = p.iter().position(|x| !x.is_finite()) {
            return Err(EnsembleError::NonFinite { row, col });
        }
    }
    Ok((0..n)
        .map(|j| {
            let (lo, hi) = preds
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[j]), hi.max(p[j])));
            let spread = exact_sum(preds.iter().zip(&spec.entries).map(|(p, e)| e.weight * (p[j] - lo)));
            (lo + spread / spec.normalizer).min(hi)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub value: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct FeatureKey {
    mode: SpatialMode,
    rbf: RbfConfig,
}

fn feature_key(cfg: &ModelConfig) -> FeatureKey {
    match cfg {
        ModelConfig::Graphormer(c) => FeatureKey {
            mode: c.spatial_mode,
            rbf: c.rbf,
        },
        // distances are unused; hop mode skips the pair expansion
        ModelConfig::Expc(_) => FeatureKey {
            mode: SpatialMode::Hop,
            rbf: RbfConfig::with_kernels(1),
        },
    }
}

/// Per-checkpoint eval-mode predictions for every molecule, one row per entry.
pub fn entry_predictions(
    spec: &EnsembleSpec,
    graphs: &[MolecularGraph],
    workers: usize,
) -> Result<Vec<Vec<f64>>, EnsembleError> {
    let mut featurized: Vec<(FeatureKey, crate::graph::Schema, Vec<FeaturizedGraph>)> = Vec::new();
    let mut cache: HashMap<PathBuf, Vec<f64>> = HashMap::new();
    let mut rows = Vec::with_capacity(spec.entries.len());
    for (index, e) in spec.entries.iter().enumerate() {
        if let Some(p) = cache.get(&e.checkpoint) {
            rows.push(p.clone());
            continue;
        }
        let entry_err = |source: ModelError| EnsembleError::Entry {
            index,
            path: e.checkpoint.display().to_string(),
            source,
        };
        let ckpt = Checkpoint::load(&e.checkpoint).map_err(entry_err)?;
        let model = ckpt.model().map_err(entry_err)?;
        let key = feature_key(&ckpt.config);
        let schema = match &ckpt.config {
            ModelConfig::Graphormer(c) => c.schema.clone(),
            ModelConfig::Expc(c) => c.schema.clone(),
        };
        let slot = match featurized.iter().position(|(k, s, _)| *k == key && *s == schema) {
            Some(i) => i,
            None => {
                let fgs = featurize_all(graphs, &schema, &key.rbf, key.mode, workers)
                    .map_err(|source| EnsembleError::Featurize { index, source })?;
                featurized.push((key, schema, fgs));
                featurized.len() - 1
            }
        };
        let p = predict_all(&model, &ckpt.params, &featurized[slot].2, workers).map_err(entry_err)?;
        cache.insert(e.checkpoint.clone(), p.clone());
        rows.push(p);
    }
    Ok(rows)
}

/// Ensemble prediction for every molecule, in input order.
pub fn run_inference(
    spec: &EnsembleSpec,
    graphs: &[MolecularGraph],
    workers: usize,
) -> Result<Vec<Prediction>, EnsembleError> {
    let rows = entry_predictions(spec, graphs, workers)?;
    let out = ensemble_predict(&rows, spec)?;
    Ok(graphs
        .iter()
        .zip(out)
        .map(|(g, value)| Prediction {
            id: g.id.clone(),
            value,
        })
        .collect())
}

pub fn write_predictions(w: &mut impl Write, preds: &[Prediction]) -> std::io::Result<()> {
    for p in preds {
        writeln!(w, "{}\t{}", p.id, p.value)?;
    }
    Ok(())
}
