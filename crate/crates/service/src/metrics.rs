use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::review::VerdictCounts;

/// Wall time spent in each pipeline stage of one registration, microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageLatency {
    pub normalize_us: u64,
    pub journal_us: u64,
    pub candidates_us: u64,
    pub heuristic_us: u64,
    pub model_us: u64,
    pub graph_us: u64,
    /// Includes rescoring the assigned cluster.
    pub assign_us: u64,
    pub decide_us: u64,
    pub total_us: u64,
}

impl StageLatency {
    fn stages(&self) -> [(&'static str, u64); 9] {
        [
            ("normalize", self.normalize_us),
            ("journal", self.journal_us),
            ("candidates", self.candidates_us),
            ("heuristic", self.heuristic_us),
            ("model", self.model_us),
            ("graph", self.graph_us),
            ("assign", self.assign_us),
            ("decide", self.decide_us),
            ("total", self.total_us),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Percentiles {
    pub count: usize,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Percentiles {
    pub fn of(values: impl IntoIterator<Item = u64>) -> Percentiles {
        let mut v: Vec<u64> = values.into_iter().collect();
        v.sort_unstable();
        Percentiles {
            count: v.len(),
            p50_us: percentile(&v, 50.0),
            p95_us: percentile(&v, 95.0),
            p99_us: percentile(&v, 99.0),
            max_us: v.last().copied().unwrap_or(0),
        }
    }
}

/// Sliding window over the most recent registrations.
#[derive(Clone, Debug)]
pub struct LatencyWindow {
    cap: usize,
    samples: VecDeque<StageLatency>,
}

impl LatencyWindow {
    pub fn new(cap: usize) -> Self {
        LatencyWindow {
            cap,
            samples: VecDeque::with_capacity(cap.min(4096)),
        }
    }

    pub fn record(&mut self, l: StageLatency) {
        if self.samples.len() == self.cap {
            self.samples.pop_front();
        }
        self.samples.push_back(l);
    }

    pub fn summary(&self) -> BTreeMap<&'static str, Percentiles> {
        let names = StageLatency::default().stages().map(|(n, _)| n);
        names
            .iter()
            .enumerate()
            .map(|(i, &name)| (name, Percentiles::of(self.samples.iter().map(|s| s.stages()[i].1))))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlowPrecision {
    pub automated: Option<f64>,
    pub manual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub precision: FlowPrecision,
    pub reviews_automated: VerdictCounts,
    pub reviews_manual: VerdictCounts,
    pub queue_depth: usize,
    pub queued_total: u64,
    pub decided_total: u64,
    pub superseded_total: u64,
    pub auto_blocks: u64,
    pub blocked_users: usize,
    pub monitoring_samples: usize,
    pub pending_merge_tickets: usize,
    pub latency: BTreeMap<&'static str, Percentiles>,
    pub model_version: Option<String>,
    pub registrations: u64,
    pub duplicates: u64,
    pub dead_lettered: u64,
    pub clusters: usize,
    pub journal_seq: u64,
}
