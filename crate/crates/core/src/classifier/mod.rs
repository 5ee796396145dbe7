//! Edge propensity model: pairwise features, a bagged-tree classifier, its
//! trainer, and training-data sampling from reviewer feedback.

pub mod features;
pub mod forest;
pub mod sampling;

use std::io;
use std::path::Path;

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribute::{AttributeRecord, AttributeSchema, UserId};
use crate::edges::{CandidateSet, Edge, EdgeKind, RecordLookup, MODEL_FEATURE};
pub use features::{build_features, EdgeFeatureVector, FeatureError};
pub use forest::{DecisionTree, ForestParams};
pub use sampling::{sample_training_data, FeedbackStore};

pub const MODEL_FORMAT: &str = "ringwatch-edge-forest/1";
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ManualValidation,
    NegativeSample,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEdgeSample {
    #[serde(flatten)]
    pub vector: EdgeFeatureVector,
    pub label: u8,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub trained_at: i64,
    pub positives: usize,
    pub negatives: usize,
    pub threshold: f64,
    pub oob_accuracy: Option<f64>,
    pub params: ForestParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeClassifier {
    pub format: String,
    pub schema_version: u32,
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("feature vector has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature vector schema v{vector} does not match model schema v{model}")]
    SchemaVersion { model: u32, vector: u32 },
    #[error("training data contains a single class")]
    SingleClass,
    #[error("training sample {0} has a non-finite feature")]
    NonFinite(String),
    #[error("training sample {0} has a non-binary label")]
    BadLabel(String),
    #[error("training samples have inconsistent dimension or schema version")]
    Inconsistent,
    #[error("edge threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("unsupported model format {0:?}")]
    Format(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EdgeClassifier {
    /// Fraction of trees voting "edge present".
    pub fn predict(&self, fv: &EdgeFeatureVector) -> Result<f64, ClassifierError> {
        if fv.schema_version != self.schema_version {
            return Err(ClassifierError::SchemaVersion {
                model: self.schema_version,
                vector: fv.schema_version,
            });
        }
        self.predict_raw(&fv.features)
    }

    pub fn predict_raw(&self, x: &[f64]) -> Result<f64, ClassifierError> {
        if x.len() != self.n_features {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        if self.trees.is_empty() {
            return Ok(0.0);
        }
        let votes: usize = self.trees.iter().map(|t| t.vote(x) as usize).sum();
        Ok(votes as f64 / self.trees.len() as f64)
    }

    /// Short content hash used as the model version.
    pub fn model_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        hex::encode(&Sha256::digest(bytes)[..6])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ClassifierError> {
        let model: EdgeClassifier = serde_json::from_str(text)?;
        if model.format != MODEL_FORMAT {
            return Err(ClassifierError::Format(model.format));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Trains a forest. The same samples and parameters always give the same
/// model, byte for byte.
pub fn train(
    samples: &[LabeledEdgeSample],
    params: &ForestParams,
    threshold: f64,
    trained_at: i64,
) -> Result<EdgeClassifier, ClassifierError> {
    let first = samples.first().ok_or(ClassifierError::SingleClass)?;
    let q = first.vector.features.len();
    let version = first.vector.schema_version;
    let mut x = Vec::with_capacity(samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for s in samples {
        if s.vector.features.len() != q || s.vector.schema_version != version {
            return Err(ClassifierError::Inconsistent);
        }
        if s.label > 1 {
            return Err(ClassifierError::BadLabel(s.vector.edge_id.clone()));
        }
        if s.vector.features.iter().any(|f| !f.is_finite()) {
            return Err(ClassifierError::NonFinite(s.vector.edge_id.clone()));
        }
        x.push(s.vector.features.clone());
        y.push(s.label);
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    let negatives = y.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ClassifierError::SingleClass);
    }
    let fitted = forest::fit(&x, &y, params);
    Ok(EdgeClassifier {
        format: MODEL_FORMAT.to_string(),
        schema_version: version,
        n_features: q,
        trees: fitted.trees,
        metadata: TrainingMetadata {
            trained_at,
            positives,
            negatives,
            threshold,
            oob_accuracy: fitted.oob_accuracy,
            params: params.clone(),
        },
    })
}

/// Model edges from `new` to every candidate whose propensity is strictly
/// above `threshold`. Candidates in `skip` (already joined by a heuristic
/// edge) and candidates without a stored record are not scored.
pub fn emit_model_edges(
    new: &AttributeRecord,
    candidates: &CandidateSet,
    records: &impl RecordLookup,
    schema: &AttributeSchema,
    model: &EdgeClassifier,
    threshold: f64,
    skip: &FxHashSet<UserId>,
) -> Result<Vec<Edge>, ClassifierError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ClassifierError::Threshold(threshold));
    }
    let mut edges = Vec::new();
    for cand in candidates.users() {
        if skip.contains(&cand) {
            continue;
        }
        let Some(old) = records.record(cand) else {
            continue;
        };
        let fv = build_features(new, old, schema)?;
        let p = model.predict(&fv)?;
        if p > threshold {
            let edge = Edge::new(new.user_id, cand, EdgeKind::Model, p, new.registered_at, MODEL_FEATURE)
                .expect("candidate differs from new user and p in [0,1]");
            edges.push(edge);
        }
    }
    Ok(edges)
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = pairs.iter().filter(|p| p.1 == 1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * pairs[i..j].iter().filter(|p| p.1 == 1).count() as f64;
        i = j;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}
