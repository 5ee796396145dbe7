//! Candidate generation and heuristic edges.
//!
//! Candidates come from an inverted index over the blocking attributes: a new
//! user is paired only with earlier users sharing at least one blocking-key
//! value. Heuristic edges are exact matches on the configured priority list.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribute::{AttributeRecord, AttributeSchema, UserId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Heuristic,
    Model,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Heuristic => "heuristic",
            EdgeKind::Model => "model",
        }
    }
}

impl std::str::FromStr for EdgeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heuristic" => Ok(EdgeKind::Heuristic),
            "model" => Ok(EdgeKind::Model),
            other => Err(format!("unknown edge kind {other:?}")),
        }
    }
}

/// Source feature recorded on model edges.
pub const MODEL_FEATURE: &str = "model";

/// Undirected association between two users, stored with `lo < hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub lo: UserId,
    pub hi: UserId,
    pub kind: EdgeKind,
    pub score: f64,
    pub created_at: i64,
    pub source_feature: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum EdgeError {
    #[error("self edge on user {0}")]
    SelfEdge(UserId),
    #[error("edge score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

impl Edge {
    pub fn new(
        a: UserId,
        b: UserId,
        kind: EdgeKind,
        score: f64,
        created_at: i64,
        source_feature: impl Into<String>,
    ) -> Result<Edge, EdgeError> {
        if a == b {
            return Err(EdgeError::SelfEdge(a));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(EdgeError::ScoreOutOfRange(score));
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        Ok(Edge {
            lo,
            hi,
            kind,
            score,
            created_at,
            source_feature: source_feature.into(),
        })
    }

    pub fn heuristic(a: UserId, b: UserId, created_at: i64, feature: &str) -> Result<Edge, EdgeError> {
        Edge::new(a, b, EdgeKind::Heuristic, 1.0, created_at, feature)
    }

    pub fn pair(&self) -> (UserId, UserId) {
        (self.lo, self.hi)
    }

    pub fn other(&self, u: UserId) -> UserId {
        if self.lo == u {
            self.hi
        } else {
            self.lo
        }
    }
}

/// Earlier users sharing a blocking key with `new_user`, with the attribute
/// names that matched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub new_user: Option<UserId>,
    pub candidates: BTreeMap<UserId, BTreeSet<String>>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.candidates.keys().copied()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BlockingError {
    /// The index could not be read in time; the caller should re-queue.
    #[error("blocking index unavailable")]
    Unavailable,
}

/// Inverted index: (attribute, key) -> users in insertion order.
#[derive(Debug, Default, Clone)]
pub struct BlockingIndex {
    attributes: Vec<String>,
    postings: FxHashMap<(u16, String), Vec<UserId>>,
    registered: FxHashMap<UserId, i64>,
    excluded: FxHashSet<UserId>,
}

impl BlockingIndex {
    pub fn new(schema: &AttributeSchema) -> Self {
        BlockingIndex {
            attributes: schema.blocking_attributes().map(|a| a.name.clone()).collect(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.registered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registered.is_empty()
    }

    pub fn contains(&self, user: UserId) -> bool {
        self.registered.contains_key(&user)
    }

    /// Indexes `record` under each of its present blocking values. Re-inserting
    /// a user is a no-op.
    pub fn insert(&mut self, record: &AttributeRecord) {
        if self.registered.contains_key(&record.user_id) {
            return;
        }
        self.registered.insert(record.user_id, record.registered_at);
        for (slot, name) in self.attributes.iter().enumerate() {
            for key in record.get(name).blocking_keys() {
                self.postings.entry((slot as u16, key)).or_default().push(record.user_id);
            }
        }
    }

    /// Stops `user` from being returned as a candidate. The user stays indexed.
    pub fn exclude(&mut self, user: UserId) {
        self.excluded.insert(user);
    }

    pub fn include(&mut self, user: UserId) {
        self.excluded.remove(&user);
    }

    pub fn is_excluded(&self, user: UserId) -> bool {
        self.excluded.contains(&user)
    }

    /// Users registered strictly before `record` (by time, then id) sharing at
    /// least one blocking value with it.
    pub fn candidates(&self, record: &AttributeRecord) -> CandidateSet {
        let me = (record.registered_at, record.user_id);
        let mut out: BTreeMap<UserId, BTreeSet<String>> = BTreeMap::new();
        for (slot, name) in self.attributes.iter().enumerate() {
            for key in record.get(name).blocking_keys() {
                let Some(users) = self.postings.get(&(slot as u16, key)) else {
                    continue;
                };
                for &u in users {
                    if u == record.user_id || self.excluded.contains(&u) {
                        continue;
                    }
                    let at = self.registered[&u];
                    if (at, u) < me {
                        out.entry(u).or_default().insert(name.clone());
                    }
                }
            }
        }
        CandidateSet {
            new_user: Some(record.user_id),
            candidates: out,
        }
    }
}

/// Index shared between one writer and many readers.
#[derive(Debug, Clone)]
pub struct SharedBlockingIndex {
    inner: Arc<RwLock<BlockingIndex>>,
    read_timeout: Duration,
}

impl SharedBlockingIndex {
    pub fn new(index: BlockingIndex, read_timeout: Duration) -> Self {
        SharedBlockingIndex {
            inner: Arc::new(RwLock::new(index)),
            read_timeout,
        }
    }

    pub fn generate_candidates(&self, record: &AttributeRecord) -> Result<CandidateSet, BlockingError> {
        let guard = self
            .inner
            .try_read_for(self.read_timeout)
            .ok_or(BlockingError::Unavailable)?;
        Ok(guard.candidates(record))
    }

    pub fn update(&self, record: &AttributeRecord) {
        self.inner.write().insert(record);
    }

    pub fn write(&self) -> parking_lot::RwLockWriteGuard<'_, BlockingIndex> {
        self.inner.write()
    }
}

/// Looks up stored records by user.
pub trait RecordLookup {
    fn record(&self, user: UserId) -> Option<&AttributeRecord>;
}

impl RecordLookup for FxHashMap<UserId, AttributeRecord> {
    fn record(&self, user: UserId) -> Option<&AttributeRecord> {
        self.get(&user)
    }
}

impl RecordLookup for std::collections::HashMap<UserId, AttributeRecord> {
    fn record(&self, user: UserId) -> Option<&AttributeRecord> {
        self.get(&user)
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct HeuristicOutcome {
    pub edges: Vec<Edge>,
    /// Candidates without a stored record; left for the batch flow.
    pub missing: Vec<UserId>,
}

/// One heuristic edge per candidate that equals the new user on any priority
/// feature, labelled with the highest-priority match.
pub fn heuristic_edges(
    record: &AttributeRecord,
    candidates: &CandidateSet,
    records: &impl RecordLookup,
    priority: &[String],
) -> HeuristicOutcome {
    let mut out = HeuristicOutcome::default();
    for cand in candidates.users() {
        let Some(other) = records.record(cand) else {
            tracing::warn!(user = %record.user_id, candidate = %cand, "candidate has no stored record; skipped");
            out.missing.push(cand);
            continue;
        };
        let hit = priority
            .iter()
            .find(|feature| record.get(feature).matches(other.get(feature)));
        if let Some(feature) = hit {
            if let Ok(edge) = Edge::heuristic(record.user_id, cand, record.registered_at, feature) {
                out.edges.push(edge);
            }
        }
    }
    out
}
