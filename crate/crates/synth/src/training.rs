//! Labeled edge samples drawn from a generated population, for bootstrapping
//! the edge classifier before any reviewer feedback exists.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringwatch_core::attribute::{AttributeRecord, AttributeSchema, NormalizeError, UserId};
use ringwatch_core::classifier::{
    build_features, train, ClassifierError, EdgeClassifier, ForestParams, LabeledEdgeSample, Provenance,
};
use ringwatch_core::edges::BlockingIndex;
use rustc_hash::FxHashSet;
use thiserror::Error;

use crate::generate::{generate, Population};
use crate::spec::{PopulationSpec, SpecError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("normalizing generated event: {0}")]
    Normalize(#[from] NormalizeError),
    #[error("building features: {0}")]
    Features(#[from] ringwatch_core::classifier::FeatureError),
    #[error("population has no ring pairs to learn from")]
    NoPositives,
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("training: {0}")]
    Classifier(#[from] ClassifierError),
}

#[derive(Clone, Debug)]
pub struct SampleParams {
    pub negatives_per_positive: f64,
    /// Cap on positive pairs taken from any one ring.
    pub max_pairs_per_ring: usize,
    /// Share of negatives drawn from blocking candidates rather than at random.
    pub hard_negative_share: f64,
    pub seed: u64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            negatives_per_positive: 3.0,
            max_pairs_per_ring: 200,
            hard_negative_share: 0.7,
            seed: 0,
        }
    }
}

pub fn normalize_all(pop: &Population, schema: &AttributeSchema) -> Result<Vec<AttributeRecord>, NormalizeError> {
    pop.events.iter().map(|e| schema.normalize(e)).collect()
}

/// Every pair sharing a blocking key, as `(later, earlier)` in registration order.
pub fn candidate_pairs(records: &[AttributeRecord], schema: &AttributeSchema) -> Vec<(UserId, UserId)> {
    let mut index = BlockingIndex::new(schema);
    let mut out = Vec::new();
    for r in records {
        out.extend(index.candidates(r).users().map(|c| (r.user_id, c)));
        index.insert(r);
    }
    out
}

fn sample(
    records: &[AttributeRecord],
    schema: &AttributeSchema,
    a: UserId,
    b: UserId,
    label: u8,
) -> Result<LabeledEdgeSample, TrainingError> {
    let (new, old) = if a > b { (a, b) } else { (b, a) };
    let vector = build_features(&records[new.get() as usize - 1], &records[old.get() as usize - 1], schema)?;
    Ok(LabeledEdgeSample {
        vector,
        label,
        provenance: Provenance::Synthetic,
    })
}

pub fn labeled_samples(
    pop: &Population,
    schema: &AttributeSchema,
    params: &SampleParams,
) -> Result<Vec<LabeledEdgeSample>, TrainingError> {
    let records = normalize_all(pop, schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut out = Vec::new();
    for members in pop.truth.ring_members().values() {
        let n = members.len();
        let total = n * (n - 1) / 2;
        let take = index::sample(&mut rng, total, total.min(params.max_pairs_per_ring));
        for k in take.iter() {
            let (i, j) = pair_at(k, n);
            out.push(sample(&records, schema, members[i], members[j], 1)?);
        }
    }
    if out.is_empty() {
        return Err(TrainingError::NoPositives);
    }
    let wanted = (out.len() as f64 * params.negatives_per_positive).round() as usize;
    let same_ring = |a: UserId, b: UserId| {
        let ra = pop.truth.ring_of(a);
        ra.is_some() && ra == pop.truth.ring_of(b)
    };

    let hard: Vec<(UserId, UserId)> = candidate_pairs(&records, schema)
        .into_iter()
        .filter(|&(a, b)| !same_ring(a, b))
        .collect();
    let hard_wanted = ((wanted as f64 * params.hard_negative_share).round() as usize).min(hard.len());
    let mut seen: FxHashSet<(UserId, UserId)> = FxHashSet::default();
    for k in index::sample(&mut rng, hard.len(), hard_wanted).iter() {
        let (a, b) = hard[k];
        seen.insert((a.min(b), a.max(b)));
        out.push(sample(&records, schema, a, b, 0)?);
    }
    let users = records.len() as u64;
    let mut tries = 0;
    while seen.len() < wanted && tries < wanted * 20 && users >= 2 {
        tries += 1;
        let a = UserId::new(rng.gen_range(1..=users)).expect("nonzero");
        let b = UserId::new(rng.gen_range(1..=users)).expect("nonzero");
        if a == b || same_ring(a, b) || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        out.push(sample(&records, schema, a, b, 0)?);
    }
    Ok(out)
}

/// Maps `k` in `0..n(n-1)/2` to the k-th pair `(i, j)`, `i < j`, row by row.
fn pair_at(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// Labeled candidate pairs: what the classifier actually sees online.
pub fn candidate_samples(pop: &Population, schema: &AttributeSchema) -> Result<Vec<LabeledEdgeSample>, TrainingError> {
    let records = normalize_all(pop, schema)?;
    candidate_pairs(&records, schema)
        .into_iter()
        .map(|(a, b)| {
            let ra = pop.truth.ring_of(a);
            let label = u8::from(ra.is_some() && ra == pop.truth.ring_of(b));
            sample(&records, schema, a, b, label)
        })
        .collect()
}

/// A smaller population from its own seed, used only to train the bootstrap model.
pub fn training_spec(seed: u64) -> PopulationSpec {
    PopulationSpec {
        users: 20_000,
        rings: 200,
        seed,
        ..PopulationSpec::default()
    }
}

pub fn bootstrap_model(
    spec: &PopulationSpec,
    schema: &AttributeSchema,
    sampling: &SampleParams,
    forest: &ForestParams,
    threshold: f64,
) -> Result<EdgeClassifier, TrainingError> {
    let pop = generate(spec)?;
    let samples = labeled_samples(&pop, schema, sampling)?;
    Ok(train(&samples, forest, threshold, spec.start_ms)?)
}
