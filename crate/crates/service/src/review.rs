use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringwatch_core::attribute::UserId;
use ringwatch_core::detector::{ClusterId, ClusterScore};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, SAMPLE_RATE_MAX, SAMPLE_RATE_MIN};
use crate::policy::{Action, ActionRecord, Flow};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    ConfirmedMi,
    Rejected,
    Split { subsets: Vec<Vec<UserId>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub cluster: ClusterId,
    /// The queued action this verdict answers.
    pub action_id: u64,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub reviewer: String,
    pub decided_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueOrigin {
    Realtime,
    Batch,
    MonitoringSample,
}

impl QueueOrigin {
    pub fn of(record: &ActionRecord) -> QueueOrigin {
        match (record.action, record.flow) {
            (Action::AutoBlock, _) => QueueOrigin::MonitoringSample,
            (_, Flow::Realtime) => QueueOrigin::Realtime,
            (_, Flow::Batch) => QueueOrigin::Batch,
        }
    }

    /// Monitoring samples measure the automated flow; everything else in the
    /// queue is the manual flow.
    pub fn is_automated(self) -> bool {
        self == QueueOrigin::MonitoringSample
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub cluster: ClusterId,
    pub action_id: u64,
    pub score: f64,
    pub breakdown: ClusterScore,
    pub members: u64,
    pub origin: QueueOrigin,
    pub enqueued_at: i64,
}

type QueueKey = (u64, i64, u64);

fn key(e: &QueueEntry) -> QueueKey {
    // score descending, then oldest first
    (u64::MAX - e.score.max(0.0).to_bits(), e.enqueued_at, e.action_id)
}

/// Undecided review items, at most one per cluster.
#[derive(Clone, Debug, Default)]
pub struct ReviewQueue {
    items: BTreeMap<QueueKey, QueueEntry>,
    by_cluster: BTreeMap<ClusterId, QueueKey>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueuePage {
    pub items: Vec<QueueEntry>,
    pub next_cursor: Option<String>,
    /// Set when the supplied cursor could not be read and paging restarted.
    pub cursor_reset: bool,
}

impl ReviewQueue {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Inserts or replaces the cluster's entry; returns the replaced one.
    pub fn upsert(&mut self, entry: QueueEntry) -> Option<QueueEntry> {
        let old = self.remove(entry.cluster);
        let k = key(&entry);
        self.by_cluster.insert(entry.cluster, k);
        self.items.insert(k, entry);
        old
    }

    pub fn remove(&mut self, cluster: ClusterId) -> Option<QueueEntry> {
        let k = self.by_cluster.remove(&cluster)?;
        self.items.remove(&k)
    }

    pub fn get(&self, cluster: ClusterId) -> Option<&QueueEntry> {
        self.by_cluster.get(&cluster).and_then(|k| self.items.get(k))
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.items.values()
    }

    pub fn page(&self, limit: usize, cursor: Option<&str>, origin: Option<QueueOrigin>) -> QueuePage {
        let (start, cursor_reset) = match cursor.map(decode_cursor) {
            None => (None, false),
            Some(Some(k)) => (Some(k), false),
            Some(None) => (None, true),
        };
        let range = match start {
            Some(k) => self.items.range((std::ops::Bound::Excluded(k), std::ops::Bound::Unbounded)),
            None => self.items.range(..),
        };
        let mut items = Vec::new();
        let mut last = None;
        let mut more = false;
        for (k, e) in range {
            if origin.is_some_and(|o| o != e.origin) {
                continue;
            }
            if items.len() == limit {
                more = true;
                break;
            }
            items.push(e.clone());
            last = Some(*k);
        }
        QueuePage {
            items,
            next_cursor: if more { last.map(encode_cursor) } else { None },
            cursor_reset,
        }
    }
}

fn encode_cursor(k: QueueKey) -> String {
    format!("{:016x}.{:x}.{:x}", k.0, k.1, k.2)
}

fn decode_cursor(s: &str) -> Option<QueueKey> {
    let mut parts = s.split('.');
    let a = u64::from_str_radix(parts.next()?, 16).ok()?;
    let b = i64::from_str_radix(parts.next()?, 16).ok()?;
    let c = u64::from_str_radix(parts.next()?, 16).ok()?;
    parts.next().is_none().then_some((a, b, c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitoringSample {
    pub cluster: ClusterId,
    pub action_id: u64,
    pub day: i64,
    pub sampled_at: i64,
    pub rate: f64,
}

pub const DAY_MS: i64 = 86_400_000;

/// Seeded Bernoulli draw over one day's highlights; the same seed and day
/// always pick the same highlights.
pub fn sample_for_monitoring(
    highlights: &[&ActionRecord],
    rate: f64,
    seed: u64,
    day: i64,
    sampled_at: i64,
) -> Result<Vec<MonitoringSample>, ConfigError> {
    if !(SAMPLE_RATE_MIN..=SAMPLE_RATE_MAX).contains(&rate) {
        return Err(ConfigError::SampleRate(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (day as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Ok(highlights
        .iter()
        .filter(|_| rng.gen::<f64>() < rate)
        .map(|h| MonitoringSample {
            cluster: h.cluster,
            action_id: h.action_id,
            day,
            sampled_at,
            rate,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct VerdictCounts {
    pub confirmed: u64,
    pub rejected: u64,
    pub split: u64,
}

impl VerdictCounts {
    pub fn add(&mut self, v: &Verdict) {
        match v {
            Verdict::ConfirmedMi => self.confirmed += 1,
            Verdict::Rejected => self.rejected += 1,
            Verdict::Split { .. } => self.split += 1,
        }
    }

    /// confirmed / (confirmed + rejected); absent until something is reviewed.
    pub fn precision(&self) -> Option<f64> {
        let n = self.confirmed + self.rejected;
        (n > 0).then(|| self.confirmed as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(n: u64) -> ClusterId {
        ClusterId(UserId::new(n).unwrap())
    }

    fn entry(c: u64, score: f64, at: i64) -> QueueEntry {
        QueueEntry {
            cluster: cid(c),
            action_id: c,
            score,
            breakdown: ClusterScore::default(),
            members: 2,
            origin: if c % 2 == 0 { QueueOrigin::Batch } else { QueueOrigin::Realtime },
            enqueued_at: at,
        }
    }

    #[test]
    fn orders_by_score_then_age_and_pages_stably() {
        let mut q = ReviewQueue::default();
        q.upsert(entry(1, 0.6, 10));
        q.upsert(entry(2, 0.9, 30));
        q.upsert(entry(3, 0.9, 20));
        q.upsert(entry(4, 0.7, 0));
        let first = q.page(2, None, None);
        let ids: Vec<u64> = first.items.iter().map(|e| e.cluster.0.get()).collect();
        assert_eq!(ids, vec![3, 2]);
        // an item ahead of the cursor disappears between pages
        q.remove(cid(3));
        let second = q.page(2, first.next_cursor.as_deref(), None);
        let ids: Vec<u64> = second.items.iter().map(|e| e.cluster.0.get()).collect();
        assert_eq!(ids, vec![4, 1]);
        assert!(second.next_cursor.is_none());
        let batch = q.page(10, None, Some(QueueOrigin::Batch));
        assert!(batch.items.iter().all(|e| e.origin == QueueOrigin::Batch));
        assert_eq!(batch.items.len(), 2);
    }

    #[test]
    fn bad_cursor_restarts() {
        let mut q = ReviewQueue::default();
        q.upsert(entry(1, 0.6, 10));
        let p = q.page(5, Some("garbage"), None);
        assert!(p.cursor_reset);
        assert_eq!(p.items.len(), 1);
        assert!(ReviewQueue::default().page(5, None, None).items.is_empty());
    }

    #[test]
    fn upsert_replaces_cluster_entry() {
        let mut q = ReviewQueue::default();
        q.upsert(entry(1, 0.6, 10));
        let old = q.upsert(QueueEntry { score: 0.8, ..entry(1, 0.6, 10) });
        assert_eq!(old.unwrap().score, 0.6);
        assert_eq!(q.len(), 1);
        assert_eq!(q.get(cid(1)).unwrap().score, 0.8);
    }

    fn record(id: u64) -> ActionRecord {
        ActionRecord {
            action_id: id,
            cluster: cid(id),
            action: Action::AutoBlock,
            score: 0.99,
            breakdown: ClusterScore::default(),
            members: 25,
            decided_at: 0,
            flow: Flow::Realtime,
            trigger: None,
            supersedes: None,
            model_id: None,
        }
    }

    #[test]
    fn sampling_is_reproducible_and_near_rate() {
        let records: Vec<ActionRecord> = (1..=1000).map(record).collect();
        let refs: Vec<&ActionRecord> = records.iter().collect();
        let a = sample_for_monitoring(&refs, 0.05, 42, 3, 0).unwrap();
        let b = sample_for_monitoring(&refs, 0.05, 42, 3, 0).unwrap();
        assert_eq!(a, b);
        // independent replay of the draw
        let mut rng = ChaCha8Rng::seed_from_u64(42 ^ 3u64.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let oracle: Vec<u64> = (1..=1000u64).filter(|_| rng.gen::<f64>() < 0.05).collect();
        assert_eq!(a.iter().map(|s| s.action_id).collect::<Vec<_>>(), oracle);
        // binomial(1000, 0.05): sd ~ 6.9; allow 4 sd
        assert!((a.len() as i64 - 50).abs() <= 28, "{}", a.len());
        let other_day = sample_for_monitoring(&refs, 0.05, 42, 4, 0).unwrap();
        assert_ne!(a, other_day);
    }

    #[test]
    fn sampling_rate_band() {
        assert!(sample_for_monitoring(&[], 0.0, 1, 0, 0).is_err());
        assert!(sample_for_monitoring(&[], 0.10, 1, 0, 0).is_ok());
        assert!(sample_for_monitoring(&[], 0.11, 1, 0, 0).is_err());
    }

    #[test]
    fn precision_examples() {
        assert_eq!(VerdictCounts::default().precision(), None);
        let c = VerdictCounts {
            confirmed: 29,
            rejected: 1,
            split: 3,
        };
        assert!((c.precision().unwrap() - 0.967).abs() < 5e-4);
    }

    #[test]
    fn decision_wire_format() {
        let d = ReviewDecision {
            cluster: cid(4),
            action_id: 9,
            verdict: Verdict::Split {
                subsets: vec![vec![UserId::new(4).unwrap()], vec![UserId::new(5).unwrap()]],
            },
            reviewer: "r1".into(),
            decided_at: 5,
            notes: None,
        };
        let json = serde_json::to_value(&d).unwrap();
        assert_eq!(json["verdict"], "split");
        assert_eq!(json["subsets"][1][0], 5);
        let back: ReviewDecision = serde_json::from_value(json).unwrap();
        assert_eq!(back, d);
    }
}
