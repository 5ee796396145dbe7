//! Training pairs from reviewer feedback.
//!
//! Positives are all pairs inside clusters confirmed as one person. Negatives
//! come from the cross join of users validated as unique.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use super::{build_features, ClassifierError, LabeledEdgeSample, Provenance};
use crate::attribute::{AttributeSchema, UserId};
use crate::edges::RecordLookup;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStore {
    pub confirmed: Vec<BTreeSet<UserId>>,
    pub rejected_clusters: usize,
    pub unique: BTreeSet<UserId>,
}

impl FeedbackStore {
    pub fn confirm(&mut self, members: impl IntoIterator<Item = UserId>) {
        self.confirmed.push(members.into_iter().collect());
    }

    pub fn reject(&mut self, members: impl IntoIterator<Item = UserId>) {
        self.rejected_clusters += 1;
        self.unique.extend(members);
    }

    pub fn positive_pairs(&self) -> BTreeSet<(UserId, UserId)> {
        let mut pairs = BTreeSet::new();
        for group in &self.confirmed {
            let members: Vec<_> = group.iter().copied().collect();
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    pairs.insert((a, b));
                }
            }
        }
        pairs
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("feedback needs at least one confirmed and one rejected cluster; bootstrap the model from synthetic samples instead")]
    InsufficientFeedback,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// `negatives_per_positive` negatives are drawn without replacement for every
/// positive; fewer are returned if the unique cross join is smaller.
pub fn sample_training_data(
    feedback: &FeedbackStore,
    records: &impl RecordLookup,
    schema: &AttributeSchema,
    negatives_per_positive: f64,
    seed: u64,
) -> Result<Vec<LabeledEdgeSample>, SamplingError> {
    if feedback.confirmed.is_empty() || feedback.rejected_clusters == 0 || feedback.unique.len() < 2 {
        return Err(SamplingError::InsufficientFeedback);
    }
    let positives = feedback.positive_pairs();
    let mut out = Vec::new();
    for &(lo, hi) in &positives {
        if let Some(s) = labeled(records, schema, lo, hi, 1, Provenance::ManualValidation)? {
            out.push(s);
        }
    }

    let unique: Vec<UserId> = feedback.unique.iter().copied().collect();
    let total_pairs = unique.len() * (unique.len() - 1) / 2;
    let wanted = (out.len() as f64 * negatives_per_positive).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = FxHashSet::default();
    // Pair index k enumerates (i, j), i < j, row by row.
    let picks = index::sample(&mut rng, total_pairs, wanted.min(total_pairs));
    for k in picks.iter() {
        let (i, j) = unrank_pair(k, unique.len());
        let pair = (unique[i], unique[j]);
        if positives.contains(&pair) || !taken.insert(pair) {
            continue;
        }
        if let Some(s) = labeled(records, schema, pair.0, pair.1, 0, Provenance::NegativeSample)? {
            out.push(s);
        }
    }
    if wanted > total_pairs {
        tracing::warn!(wanted, available = total_pairs, "not enough validated-unique pairs for requested ratio");
    }
    Ok(out)
}

fn labeled(
    records: &impl RecordLookup,
    schema: &AttributeSchema,
    lo: UserId,
    hi: UserId,
    label: u8,
    provenance: Provenance,
) -> Result<Option<LabeledEdgeSample>, ClassifierError> {
    let (Some(old), Some(new)) = (records.record(lo), records.record(hi)) else {
        return Ok(None);
    };
    Ok(Some(LabeledEdgeSample {
        vector: build_features(new, old, schema)?,
        label,
        provenance,
    }))
}

fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::{AttributeRecord, RawRegistrationEvent};
    use rustc_hash::FxHashMap;

    fn uid(n: u64) -> UserId {
        UserId::new(n).unwrap()
    }

    fn records(ids: impl IntoIterator<Item = u64>) -> FxHashMap<UserId, AttributeRecord> {
        let schema = AttributeSchema::default_schema();
        ids.into_iter()
            .map(|id| {
                let r = schema
                    .normalize(&RawRegistrationEvent { user_id: UserId::new(id), registered_at: 0, attributes: Default::default() })
                    .unwrap();
                (uid(id), r)
            })
            .collect()
    }

    #[test]
    fn confirmed_cluster_gives_all_internal_pairs() {
        let mut fb = FeedbackStore::default();
        fb.confirm([uid(3), uid(9), uid(11)]);
        fb.reject([uid(5), uid(6)]);
        let recs = records([3, 9, 11, 5, 6]);
        let samples = sample_training_data(&fb, &recs, &AttributeSchema::default_schema(), 0.0, 1).unwrap();
        let ids: Vec<_> = samples.iter().map(|s| s.vector.edge_id.clone()).collect();
        assert_eq!(ids, vec!["9_3", "11_3", "11_9"]);
        assert!(samples.iter().all(|s| s.label == 1 && s.provenance == Provenance::ManualValidation));
    }

    #[test]
    fn unique_users_form_negative_pair() {
        let mut fb = FeedbackStore::default();
        fb.confirm([uid(3), uid(9)]);
        fb.reject([uid(5), uid(6)]);
        let samples = sample_training_data(&fb, &records([3, 9, 5, 6]), &AttributeSchema::default_schema(), 1.0, 1).unwrap();
        let neg: Vec<_> = samples.iter().filter(|s| s.label == 0).map(|s| s.vector.edge_id.clone()).collect();
        assert_eq!(neg, vec!["6_5"]);
    }

    #[test]
    fn ratio_one_to_three() {
        let mut fb = FeedbackStore::default();
        // 5 members -> 10 positive pairs
        fb.confirm((1..=5).map(uid));
        fb.reject((100..140).map(uid));
        let recs = records((1..=5).chain(100..140));
        let samples = sample_training_data(&fb, &recs, &AttributeSchema::default_schema(), 3.0, 9).unwrap();
        let pos = samples.iter().filter(|s| s.label == 1).count();
        let neg: BTreeSet<_> = samples.iter().filter(|s| s.label == 0).map(|s| s.vector.edge_id.clone()).collect();
        assert_eq!(pos, 10);
        assert_eq!(neg.len(), 30);
    }

    #[test]
    fn no_pair_in_both_classes() {
        let mut fb = FeedbackStore::default();
        fb.confirm([uid(1), uid(2)]);
        fb.reject([uid(1), uid(2), uid(3)]);
        let samples = sample_training_data(&fb, &records(1..=3), &AttributeSchema::default_schema(), 5.0, 3).unwrap();
        let neg: Vec<_> = samples.iter().filter(|s| s.label == 0).map(|s| s.vector.edge_id.as_str()).collect();
        assert!(!neg.contains(&"2_1"));
        assert_eq!(neg.len(), 2);
    }

    #[test]
    fn insufficient_feedback() {
        let mut fb = FeedbackStore::default();
        fb.reject([uid(1), uid(2)]);
        let err = sample_training_data(&fb, &records(1..=2), &AttributeSchema::default_schema(), 1.0, 0).unwrap_err();
        assert!(err.to_string().contains("synthetic"));
    }

    #[test]
    fn unrank_covers_all_pairs() {
        let n = 6;
        let pairs: Vec<_> = (0..n * (n - 1) / 2).map(|k| unrank_pair(k, n)).collect();
        let mut expected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expected.push((i, j));
            }
        }
        assert_eq!(pairs, expected);
    }
}
