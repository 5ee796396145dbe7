//! The detection pipeline and actioning state behind the HTTP API.
//!
//! All mutations go through [`Service`] on one writer. A registration is
//! normalized, journaled, and only then applied, so everything acknowledged
//! is in the journal. Reconciliation, the batch flow, and monitoring draws
//! fire at event-time checkpoints; replaying the journal therefore repeats
//! them at the same points and rebuilds the same action history.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use ringwatch_core::attribute::{
    keyed_digest, AttributeRecord, AttributeSchema, NormalizedValue, RawRegistrationEvent, UserId,
};
use ringwatch_core::classifier::{emit_model_edges, EdgeClassifier, FeedbackStore};
use ringwatch_core::detector::{
    ClusterAggregates, ClusterCache, ClusterId, ClusterScore, DetectorError, MergeReport, ReconcileScope,
};
use ringwatch_core::edges::{heuristic_edges, BlockingIndex, EdgeKind};
use ringwatch_core::graph::{Graph, GraphError};
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::journal::{ControlOp, DeadLetter, Entry, Journal, JournalError};
use crate::metrics::{FlowPrecision, LatencyWindow, MetricsSnapshot, StageLatency};
use crate::policy::{Action, ActionRecord, Flow, Policy};
use crate::review::{
    sample_for_monitoring, MonitoringSample, QueueEntry, QueueOrigin, QueuePage, ReviewDecision, ReviewQueue, Verdict,
    VerdictCounts, DAY_MS,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineResult {
    pub seq: u64,
    pub user: UserId,
    pub cluster: ClusterId,
    pub members: u64,
    pub score: ClusterScore,
    pub action: Action,
    pub action_id: Option<u64>,
    pub merge_ticket: Option<u64>,
    pub candidates: usize,
    pub heuristic_edges: usize,
    pub model_edges: usize,
    /// The user was already registered; nothing was applied.
    pub duplicate: bool,
    pub latency: StageLatency,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("poisoned event: {0}")]
    Poisoned(String),
    #[error("temporarily unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("pipeline failure: {0}")]
    Internal(String),
}

impl From<GraphError> for IngestError {
    fn from(e: GraphError) -> Self {
        IngestError::Internal(e.to_string())
    }
}

impl From<DetectorError> for IngestError {
    fn from(e: DetectorError) -> Self {
        IngestError::Internal(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("replaying seq {seq}: {reason}")]
    Replay { seq: u64, reason: String },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct DecisionRequest {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub reviewer: String,
    #[serde(default)]
    pub notes: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecisionOutcome {
    pub decision: ReviewDecision,
    pub blocked: usize,
    pub released: usize,
    pub new_clusters: Vec<ClusterId>,
}

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("cluster {0} is not queued for review")]
    NotQueued(ClusterId),
    #[error("cluster {} already decided", .existing.cluster)]
    Duplicate { existing: Box<ReviewDecision> },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("{0}")]
    Internal(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserClusterView {
    pub user: UserId,
    pub cluster: ClusterId,
    pub members: u64,
    pub score: ClusterScore,
    pub blocked: bool,
    pub active_action: Option<ActionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemberView {
    pub user: UserId,
    pub registered_at: i64,
    pub blocked: bool,
    pub attributes: BTreeMap<String, NormalizedValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeView {
    pub lo: UserId,
    pub hi: UserId,
    pub kind: EdgeKind,
    pub score: f64,
    pub source_feature: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterDetail {
    pub cluster: ClusterId,
    pub score: ClusterScore,
    pub aggregates: ClusterAggregates,
    pub members: Vec<MemberView>,
    pub edges: Vec<EdgeView>,
    /// Member or edge lists were cut at the configured limit.
    pub truncated: bool,
    pub active_action: Option<ActionRecord>,
    pub queued: Option<QueueEntry>,
}

const DETAIL_MEMBER_LIMIT: usize = 2_000;
const DETAIL_EDGE_LIMIT: usize = 10_000;

#[derive(Clone, Copy, Debug, Default)]
struct Counters {
    registrations: u64,
    duplicates: u64,
    dead_lettered: u64,
    queued_total: u64,
    superseded_total: u64,
    auto_blocks: u64,
}

pub struct Service {
    cfg: ServiceConfig,
    schema: AttributeSchema,
    policy: Policy,
    index: BlockingIndex,
    records: FxHashMap<UserId, AttributeRecord>,
    graph: Graph,
    cache: ClusterCache,
    model: Option<EdgeClassifier>,
    model_id: Option<String>,
    actions: Vec<ActionRecord>,
    active: FxHashMap<ClusterId, usize>,
    queue: ReviewQueue,
    decisions: Vec<ReviewDecision>,
    decided_actions: FxHashMap<u64, usize>,
    last_decision: FxHashMap<ClusterId, usize>,
    reviews_automated: VerdictCounts,
    reviews_manual: VerdictCounts,
    feedback: FeedbackStore,
    blocked: FxHashSet<UserId>,
    samples: Vec<MonitoringSample>,
    journal: Option<Journal>,
    dead_letter: Option<DeadLetter>,
    seq: u64,
    clock: Option<i64>,
    last_reconcile_at: i64,
    last_batch_at: i64,
    current_day: i64,
    latency: LatencyWindow,
    counters: Counters,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("seq", &self.seq)
            .field("users", &self.records.len())
            .field("clusters", &self.cache.cluster_count())
            .field("journal", &self.journal)
            .finish()
    }
}

fn micros(since: Instant) -> u64 {
    since.elapsed().as_micros() as u64
}

impl Service {
    /// Loads schema and model from the configured paths, then starts.
    pub fn open(cfg: ServiceConfig) -> Result<Service, StartupError> {
        let schema = match &cfg.schema_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| StartupError::Schema(format!("{}: {e}", p.display())))?;
                AttributeSchema::from_json(&text).map_err(|e| StartupError::Schema(e.to_string()))?
            }
            None => AttributeSchema::default_schema(),
        };
        let model = match &cfg.model_path {
            Some(p) => Some(EdgeClassifier::load(p).map_err(|e| StartupError::Model(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Service::new(cfg, schema, model)
    }

    /// Starts from the given schema and model, replaying the journal if the
    /// config names a data directory.
    pub fn new(cfg: ServiceConfig, schema: AttributeSchema, model: Option<EdgeClassifier>) -> Result<Service, StartupError> {
        cfg.validate().map_err(|e| StartupError::Schema(e.to_string()))?;
        if let Err(violations) = schema.validate() {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(StartupError::Schema(text.join("; ")));
        }
        if let Some(m) = &model {
            if m.schema_version != schema.version {
                return Err(StartupError::Model(format!(
                    "model trained for schema version {}, schema is version {}",
                    m.schema_version, schema.version
                )));
            }
        } else {
            tracing::warn!("no edge model configured; only heuristic edges will be built");
        }
        let (journal, recovered) = match &cfg.data_dir {
            Some(dir) => {
                let (j, r) = Journal::open(dir, cfg.sync)?;
                (Some(j), Some(r))
            }
            None => (None, None),
        };
        let mut svc = Service {
            policy: Policy::from(&cfg.thresholds),
            index: BlockingIndex::new(&schema),
            records: FxHashMap::default(),
            graph: Graph::new(),
            cache: ClusterCache::new(cfg.scoring.clone()),
            model_id: model.as_ref().map(|m| m.model_id()),
            model,
            actions: Vec::new(),
            active: FxHashMap::default(),
            queue: ReviewQueue::default(),
            decisions: Vec::new(),
            decided_actions: FxHashMap::default(),
            last_decision: FxHashMap::default(),
            reviews_automated: VerdictCounts::default(),
            reviews_manual: VerdictCounts::default(),
            feedback: FeedbackStore::default(),
            blocked: FxHashSet::default(),
            samples: Vec::new(),
            dead_letter: cfg.data_dir.as_deref().map(DeadLetter::new),
            journal: None,
            seq: 0,
            clock: None,
            last_reconcile_at: 0,
            last_batch_at: 0,
            current_day: 0,
            latency: LatencyWindow::new(cfg.latency_window),
            counters: Counters::default(),
            schema,
            cfg,
        };
        if let Some(rec) = recovered {
            let n = rec.entries.len();
            for (seq, entry) in rec.entries {
                svc.seq = seq;
                svc.replay(seq, entry)?;
            }
            tracing::info!(entries = n, seq = svc.seq, torn_bytes = rec.torn_bytes, "journal replayed");
        }
        svc.journal = journal;
        Ok(svc)
    }

    fn replay(&mut self, seq: u64, entry: Entry) -> Result<(), StartupError> {
        match entry {
            Entry::Event(ev) => {
                let record = self.schema.normalize(&ev).map_err(|e| StartupError::Replay {
                    seq,
                    reason: e.to_string(),
                })?;
                let mut lat = StageLatency::default();
                self.process(seq, record, &mut lat, Instant::now())
                    .map_err(|e| StartupError::Replay {
                        seq,
                        reason: e.to_string(),
                    })?;
            }
            Entry::Control(op) => self.apply_control(&op).map_err(|reason| StartupError::Replay { seq, reason })?,
        }
        Ok(())
    }

    fn apply_control(&mut self, op: &ControlOp) -> Result<(), String> {
        match op {
            ControlOp::Review { decision } => self.apply_decision(decision).map(|_| ()).map_err(|e| e.to_string()),
            ControlOp::BatchRun { at } => self.batch_run(*at).map_err(|e| e.to_string()),
            ControlOp::Reconcile { at } => self.reconcile(ReconcileScope::Full, *at).map_err(|e| e.to_string()),
            ControlOp::SampleDay { day } => self.sample_day(*day).map_err(|e| e.to_string()),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn cache(&self) -> &ClusterCache {
        &self.cache
    }

    pub fn records(&self) -> &FxHashMap<UserId, AttributeRecord> {
        &self.records
    }

    pub fn actions(&self) -> &[ActionRecord] {
        &self.actions
    }

    pub fn decisions(&self) -> &[ReviewDecision] {
        &self.decisions
    }

    pub fn samples(&self) -> &[MonitoringSample] {
        &self.samples
    }

    pub fn feedback(&self) -> &FeedbackStore {
        &self.feedback
    }

    pub fn queue(&self) -> &ReviewQueue {
        &self.queue
    }

    pub fn is_blocked(&self, u: UserId) -> bool {
        self.blocked.contains(&u)
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// Latest event time seen.
    pub fn clock(&self) -> Option<i64> {
        self.clock
    }

    pub fn is_registered(&self, u: UserId) -> bool {
        self.records.contains_key(&u)
    }

    /// Registers one event, retrying transient failures with backoff.
    pub fn ingest(&mut self, event: &RawRegistrationEvent) -> Result<PipelineResult, IngestError> {
        let mut attempt = 0;
        loop {
            match self.try_ingest(event) {
                Err(IngestError::Unavailable(reason)) if attempt < self.cfg.retry_attempts => {
                    let wait = self.cfg.retry_backoff_ms << attempt;
                    tracing::warn!(%reason, attempt, wait_ms = wait, "retrying registration");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(IngestError::Poisoned(reason)) => {
                    let payload = serde_json::to_string(event).unwrap_or_default();
                    self.poison(&reason, &payload);
                    return Err(IngestError::Poisoned(reason));
                }
                other => return other,
            }
        }
    }

    /// Records an input that could not be parsed at all.
    pub fn poison(&mut self, reason: &str, payload: &str) {
        self.counters.dead_lettered += 1;
        tracing::warn!(reason, "dead-lettering registration");
        if let Some(dl) = &self.dead_letter {
            if let Err(e) = dl.push(reason, payload) {
                tracing::error!(error = %e, "dead-letter write failed");
            }
        }
    }

    fn try_ingest(&mut self, event: &RawRegistrationEvent) -> Result<PipelineResult, IngestError> {
        let start = Instant::now();
        let mut lat = StageLatency::default();
        let record = self
            .schema
            .normalize(event)
            .map_err(|e| IngestError::Poisoned(e.to_string()))?;
        lat.normalize_us = micros(start);

        if self.records.contains_key(&record.user_id) {
            self.counters.duplicates += 1;
            return Ok(self.duplicate_result(record.user_id, lat));
        }

        let t = Instant::now();
        let seq = self.seq + 1;
        if let Some(j) = &mut self.journal {
            j.append_event(seq, event).map_err(|e| match e {
                JournalError::Io { ref source, .. }
                    if matches!(
                        source.kind(),
                        std::io::ErrorKind::Interrupted | std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                    ) =>
                {
                    IngestError::Unavailable(e.to_string())
                }
                e => IngestError::Journal(e),
            })?;
        }
        self.seq = seq;
        lat.journal_us = micros(t);
        self.process(seq, record, &mut lat, start)
    }

    fn duplicate_result(&self, user: UserId, latency: StageLatency) -> PipelineResult {
        let cluster = self.cache.cluster_of(user).unwrap_or(ClusterId(user));
        let state = self.cache.cluster(cluster);
        PipelineResult {
            seq: self.seq,
            user,
            cluster,
            members: state.map_or(1, |s| s.aggregates.members),
            score: state.map(|s| s.score).unwrap_or_default(),
            action: Action::NoAction,
            action_id: None,
            merge_ticket: None,
            candidates: 0,
            heuristic_edges: 0,
            model_edges: 0,
            duplicate: true,
            latency,
        }
    }

    fn process(
        &mut self,
        seq: u64,
        record: AttributeRecord,
        lat: &mut StageLatency,
        start: Instant,
    ) -> Result<PipelineResult, IngestError> {
        let at = record.registered_at;
        let user = record.user_id;
        self.advance_clock(at)?;
        self.counters.registrations += 1;

        let t = Instant::now();
        let candidates = self.index.candidates(&record);
        lat.candidates_us = micros(t);

        let t = Instant::now();
        let heuristic = heuristic_edges(&record, &candidates, &self.records, &self.schema.heuristic_priority);
        lat.heuristic_us = micros(t);

        let t = Instant::now();
        let model_edges = match &self.model {
            Some(model) => {
                let skip: FxHashSet<UserId> = heuristic.edges.iter().map(|e| e.other(user)).collect();
                emit_model_edges(
                    &record,
                    &candidates,
                    &self.records,
                    &self.schema,
                    model,
                    self.cfg.thresholds.edge_threshold,
                    &skip,
                )
                .map_err(|e| IngestError::Internal(e.to_string()))?
            }
            None => Vec::new(),
        };
        lat.model_us = micros(t);

        let t = Instant::now();
        self.graph.add_vertex(user, at)?;
        let n_heuristic = heuristic.edges.len();
        let n_model = model_edges.len();
        for e in heuristic.edges.into_iter().chain(model_edges) {
            self.graph.add_edge(e)?;
        }
        self.index.insert(&record);
        self.records.insert(user, record);
        lat.graph_us = micros(t);

        let t = Instant::now();
        let outcome = self.cache.assign_on_registration(user, &self.graph, at)?;
        lat.assign_us = micros(t);

        let t = Instant::now();
        let (action, action_id) = self.act(outcome.cluster, Flow::Realtime, Some(user), at);
        lat.decide_us = micros(t);
        lat.total_us = micros(start);
        self.latency.record(*lat);

        let state = self.cache.cluster(outcome.cluster).expect("assigned cluster exists");
        Ok(PipelineResult {
            seq,
            user,
            cluster: outcome.cluster,
            members: state.aggregates.members,
            score: state.score,
            action,
            action_id,
            merge_ticket: outcome.ticket.map(|t| t.id),
            candidates: candidates.len(),
            heuristic_edges: n_heuristic,
            model_edges: n_model,
            duplicate: false,
            latency: *lat,
        })
    }

    /// Fires whatever event-time checkpoints `at` has passed.
    fn advance_clock(&mut self, at: i64) -> Result<(), IngestError> {
        let Some(prev) = self.clock else {
            self.clock = Some(at);
            self.last_reconcile_at = at;
            self.last_batch_at = at;
            self.current_day = at.div_euclid(DAY_MS);
            return Ok(());
        };
        let now = prev.max(at);
        self.clock = Some(now);
        let day = now.div_euclid(DAY_MS);
        if self.cfg.cadence.sample_daily && day > self.current_day {
            self.sample_day(self.current_day).map_err(|e| IngestError::Internal(e.to_string()))?;
            self.current_day = day;
        }
        let batch = self.cfg.cadence.batch_interval_ms;
        if batch > 0 && now - self.last_batch_at >= batch {
            self.batch_run(now)?;
        }
        if now - self.last_reconcile_at >= self.cfg.cadence.reconcile_interval_ms
            || self.cache.pending_tickets() >= self.cfg.cadence.max_pending_tickets
        {
            self.reconcile(self.cfg.cadence.reconcile_scope, now)?;
        }
        Ok(())
    }

    fn reconcile(&mut self, scope: ReconcileScope, at: i64) -> Result<(), DetectorError> {
        let report = self.cache.reconcile(&self.graph, scope, at)?;
        self.last_reconcile_at = at;
        self.follow_merges(&report, at);
        Ok(())
    }

    /// Moves review state onto the clusters that survived a reconciliation.
    fn follow_merges(&mut self, report: &MergeReport, at: i64) {
        for &(old, new) in &report.renamed {
            if let Some(i) = self.active.remove(&old) {
                self.active.insert(new, i);
            }
            if let Some(mut e) = self.queue.remove(old) {
                e.cluster = new;
                self.queue.upsert(e);
            }
        }
        for (survivor, absorbed) in &report.merges {
            let mut had_highlight = self.active.contains_key(survivor);
            for a in absorbed {
                had_highlight |= self.active.remove(a).is_some();
                if self.queue.remove(*a).is_some() {
                    self.counters.superseded_total += 1;
                }
            }
            if had_highlight {
                // grown by a merge the real-time path never saw: manual flow
                self.act(*survivor, Flow::Batch, None, at);
            }
        }
    }

    fn batch_run(&mut self, at: i64) -> Result<(), DetectorError> {
        self.reconcile(ReconcileScope::Full, at)?;
        self.last_batch_at = at;
        let floor = self.cfg.thresholds.manual_floor;
        for h in self.cache.unhighlighted(floor) {
            self.act(h.cluster, Flow::Batch, None, at);
        }
        Ok(())
    }

    fn sample_day(&mut self, day: i64) -> Result<(), crate::config::ConfigError> {
        let range = day * DAY_MS..(day + 1) * DAY_MS;
        let mut todays: Vec<&ActionRecord> = self
            .active
            .values()
            .map(|&i| &self.actions[i])
            .filter(|a| range.contains(&a.decided_at))
            .collect();
        todays.sort_unstable_by_key(|a| a.action_id);
        let at = self.clock.unwrap_or(range.end);
        let picked = sample_for_monitoring(
            &todays,
            self.cfg.thresholds.sample_rate,
            self.cfg.monitoring_seed,
            day,
            at,
        )?;
        for s in picked {
            let record = &self.actions[self.active[&s.cluster]];
            if record.action == Action::AutoBlock && !self.decided_actions.contains_key(&record.action_id) {
                let entry = queue_entry(record, QueueOrigin::MonitoringSample, at);
                self.queue.upsert(entry);
            }
            self.samples.push(s);
        }
        Ok(())
    }

    /// Applies the policy to a cluster's current score and records the
    /// outcome if it is a highlight.
    fn act(&mut self, cluster: ClusterId, flow: Flow, trigger: Option<UserId>, at: i64) -> (Action, Option<u64>) {
        let Some(state) = self.cache.cluster(cluster) else {
            return (Action::NoAction, None);
        };
        let action = self.policy.decide(state.score.value, flow);
        if action == Action::NoAction {
            return (action, None);
        }
        assert!(
            action != Action::AutoBlock || state.score.value > self.policy.auto_block,
            "auto-block at score {}",
            state.score.value
        );
        let action_id = self.actions.len() as u64 + 1;
        let record = ActionRecord {
            action_id,
            cluster,
            action,
            score: state.score.value,
            breakdown: state.score,
            members: state.aggregates.members,
            decided_at: at,
            flow,
            trigger,
            supersedes: self.active.get(&cluster).map(|&i| self.actions[i].action_id),
            model_id: self.model_id.clone(),
        };
        let members = state.members.clone();
        match action {
            Action::AutoBlock => {
                self.counters.auto_blocks += 1;
                if self.queue.remove(cluster).is_some() {
                    self.counters.superseded_total += 1;
                }
                for u in members {
                    self.block(u);
                }
            }
            Action::QueuedManual => {
                self.counters.queued_total += 1;
                if self.queue.upsert(queue_entry(&record, QueueOrigin::of(&record), at)).is_some() {
                    self.counters.superseded_total += 1;
                }
            }
            Action::NoAction => unreachable!(),
        }
        self.cache.mark_highlighted(cluster);
        self.active.insert(cluster, self.actions.len());
        self.actions.push(record);
        (action, Some(action_id))
    }

    fn block(&mut self, u: UserId) {
        if self.blocked.insert(u) && self.cfg.exclude_blocked_candidates {
            self.index.exclude(u);
        }
    }

    fn release(&mut self, u: UserId) -> bool {
        let was = self.blocked.remove(&u);
        if was {
            self.index.include(u);
        }
        was
    }

    /// Validates and records a reviewer verdict for a queued cluster.
    pub fn record_decision(
        &mut self,
        cluster: ClusterId,
        req: DecisionRequest,
        decided_at: i64,
    ) -> Result<DecisionOutcome, DecisionError> {
        let decision = ReviewDecision {
            cluster,
            action_id: 0,
            verdict: req.verdict,
            reviewer: req.reviewer,
            decided_at,
            notes: req.notes,
        };
        let decision = self.validate_decision(decision)?;
        let seq = self.seq + 1;
        let op = ControlOp::Review { decision };
        if let Some(j) = &mut self.journal {
            j.append_control(seq, &op)?;
        }
        self.seq = seq;
        let ControlOp::Review { decision } = op else { unreachable!() };
        self.apply_decision(&decision)
    }

    fn validate_decision(&self, mut d: ReviewDecision) -> Result<ReviewDecision, DecisionError> {
        let Some(entry) = self.queue.get(d.cluster) else {
            return Err(match self.last_decision.get(&d.cluster) {
                Some(&i) => DecisionError::Duplicate {
                    existing: Box::new(self.decisions[i].clone()),
                },
                None => DecisionError::NotQueued(d.cluster),
            });
        };
        if let Some(&i) = self.decided_actions.get(&entry.action_id) {
            return Err(DecisionError::Duplicate {
                existing: Box::new(self.decisions[i].clone()),
            });
        }
        d.action_id = entry.action_id;
        if let Verdict::Split { subsets } = &d.verdict {
            let members: BTreeSet<UserId> = self
                .cache
                .cluster(d.cluster)
                .map(|s| s.members.iter().copied().collect())
                .unwrap_or_default();
            if subsets.len() < 2 {
                return Err(DecisionError::InvalidSplit("need at least two subsets".into()));
            }
            let mut seen = BTreeSet::new();
            for s in subsets {
                if s.is_empty() {
                    return Err(DecisionError::InvalidSplit("empty subset".into()));
                }
                for u in s {
                    if !members.contains(u) {
                        return Err(DecisionError::InvalidSplit(format!("{u} is not a member")));
                    }
                    if !seen.insert(*u) {
                        return Err(DecisionError::InvalidSplit(format!("{u} appears twice")));
                    }
                }
            }
            if seen.len() != members.len() {
                return Err(DecisionError::InvalidSplit(format!(
                    "subsets cover {} of {} members",
                    seen.len(),
                    members.len()
                )));
            }
        }
        Ok(d)
    }

    fn apply_decision(&mut self, decision: &ReviewDecision) -> Result<DecisionOutcome, DecisionError> {
        let decision = self.validate_decision(decision.clone())?;
        let entry = self.queue.remove(decision.cluster).expect("validated");
        if entry.origin.is_automated() {
            self.reviews_automated.add(&decision.verdict);
        } else {
            self.reviews_manual.add(&decision.verdict);
        }
        let members: Vec<UserId> = self
            .cache
            .cluster(decision.cluster)
            .map(|s| s.members.clone())
            .unwrap_or_default();
        let mut outcome = DecisionOutcome {
            decision: decision.clone(),
            blocked: 0,
            released: 0,
            new_clusters: Vec::new(),
        };
        match &decision.verdict {
            Verdict::ConfirmedMi => {
                for &u in &members {
                    outcome.blocked += !self.blocked.contains(&u) as usize;
                    self.block(u);
                }
                self.feedback.confirm(members);
            }
            Verdict::Rejected => {
                for &u in &members {
                    outcome.released += self.release(u) as usize;
                }
                self.feedback.reject(members);
            }
            Verdict::Split { subsets } => {
                let at = decision.decided_at;
                outcome.new_clusters = self
                    .cache
                    .split(decision.cluster, subsets, &self.graph, at)
                    .map_err(|e| DecisionError::Internal(e.to_string()))?;
                // the answered action stays in history; sub-clusters start clean
                self.active.remove(&decision.cluster);
            }
        }
        let idx = self.decisions.len();
        self.decided_actions.insert(decision.action_id, idx);
        self.last_decision.insert(decision.cluster, idx);
        self.decisions.push(decision);
        Ok(outcome)
    }

    /// Runs a journaled operator trigger (batch flow, full reconcile, or a
    /// monitoring draw).
    pub fn control(&mut self, op: ControlOp) -> Result<(), IngestError> {
        if matches!(op, ControlOp::Review { .. }) {
            return Err(IngestError::Internal("reviews go through record_decision".into()));
        }
        let seq = self.seq + 1;
        if let Some(j) = &mut self.journal {
            j.append_control(seq, &op)?;
        }
        self.seq = seq;
        self.apply_control(&op).map_err(IngestError::Internal)
    }

    pub fn queue_page(&self, limit: usize, cursor: Option<&str>, origin: Option<QueueOrigin>) -> QueuePage {
        self.queue.page(limit, cursor, origin)
    }

    pub fn user_cluster(&self, u: UserId) -> Option<UserClusterView> {
        let cluster = self.cache.cluster_of(u)?;
        let state = self.cache.cluster(cluster)?;
        Some(UserClusterView {
            user: u,
            cluster,
            members: state.aggregates.members,
            score: state.score,
            blocked: self.blocked.contains(&u),
            active_action: self.active.get(&cluster).map(|&i| self.actions[i].clone()),
        })
    }

    pub fn cluster_detail(&self, id: ClusterId) -> Option<ClusterDetail> {
        let state = self.cache.cluster(id)?;
        let in_cluster: FxHashSet<UserId> = state.members.iter().copied().collect();
        let mut truncated = state.members.len() > DETAIL_MEMBER_LIMIT;
        let members = state
            .members
            .iter()
            .take(DETAIL_MEMBER_LIMIT)
            .map(|&u| MemberView {
                user: u,
                registered_at: self.records.get(&u).map_or(0, |r| r.registered_at),
                blocked: self.blocked.contains(&u),
                attributes: self.records.get(&u).map(|r| self.redacted(r)).unwrap_or_default(),
            })
            .collect();
        let mut edges = Vec::new();
        'outer: for &u in &state.members {
            for n in self.graph.neighbors(u).unwrap_or(&[]) {
                if u < n.user && in_cluster.contains(&n.user) {
                    if edges.len() == DETAIL_EDGE_LIMIT {
                        truncated = true;
                        break 'outer;
                    }
                    edges.push(EdgeView {
                        lo: u,
                        hi: n.user,
                        kind: n.kind,
                        score: n.score,
                        source_feature: n.source_feature.to_string(),
                    });
                }
            }
        }
        Some(ClusterDetail {
            cluster: id,
            score: state.score,
            aggregates: state.aggregates,
            members,
            edges,
            truncated,
            active_action: self.active.get(&id).map(|&i| self.actions[i].clone()),
            queued: self.queue.get(id).cloned(),
        })
    }

    fn redacted(&self, r: &AttributeRecord) -> BTreeMap<String, NormalizedValue> {
        r.attrs
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    NormalizedValue::Exact(s) if self.cfg.redact_attributes.contains(k) => {
                        NormalizedValue::Hashed(keyed_digest(&self.schema.hash_key, s))
                    }
                    other => other.clone(),
                };
                (k.clone(), v)
            })
            .collect()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            precision: FlowPrecision {
                automated: self.reviews_automated.precision(),
                manual: self.reviews_manual.precision(),
            },
            reviews_automated: self.reviews_automated,
            reviews_manual: self.reviews_manual,
            queue_depth: self.queue.len(),
            queued_total: self.counters.queued_total,
            decided_total: self.decisions.len() as u64,
            superseded_total: self.counters.superseded_total,
            auto_blocks: self.counters.auto_blocks,
            blocked_users: self.blocked.len(),
            monitoring_samples: self.samples.len(),
            pending_merge_tickets: self.cache.pending_tickets(),
            latency: self.latency.summary(),
            model_version: self.model_id.clone(),
            registrations: self.counters.registrations,
            duplicates: self.counters.duplicates,
            dead_lettered: self.counters.dead_lettered,
            clusters: self.cache.cluster_count(),
            journal_seq: self.seq,
        }
    }

    /// user, cluster pairs sorted by user.
    pub fn assignments(&self) -> Vec<(UserId, ClusterId)> {
        let mut out: Vec<(UserId, ClusterId)> = self
            .records
            .keys()
            .filter_map(|&u| self.cache.cluster_of(u).map(|c| (u, c)))
            .collect();
        out.sort_unstable();
        out
    }
}

fn queue_entry(record: &ActionRecord, origin: QueueOrigin, at: i64) -> QueueEntry {
    QueueEntry {
        cluster: record.cluster,
        action_id: record.action_id,
        score: record.score,
        breakdown: record.breakdown,
        members: record.members,
        origin,
        enqueued_at: at,
    }
}
