//! Cache-backed incremental cluster assignment.
//!
//! The cache maps every user to a cluster and keeps per-cluster aggregates so
//! that a registration only touches the new user's 1-degree neighbourhood.
//! A registration that bridges clusters joins the largest one and leaves a
//! [`MergeTicket`]; reconciliation recomputes components over a graph snapshot
//! and makes the cache agree with them again.
//!
//! Reconciliation comes in two scopes. `Full` recomputes every component.
//! `Affected` recomputes only the region reachable from users assigned since
//! the last reconciliation, closed over whole cached clusters; because the
//! graph is add-only, every edge outside that region is already internal to a
//! cached cluster.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribute::UserId;
use crate::cc::{self, EdgeSet, Labeling};
use crate::edges::EdgeKind;
use crate::graph::{Graph, GraphError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub UserId);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::str::FromStr for ClusterId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(ClusterId)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBand {
    /// Inclusive upper bound on member count; `None` for the open top band.
    pub up_to: Option<u64>,
    pub base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub size_bands: Vec<SizeBand>,
    pub density_weight: f64,
    pub heuristic_weight: f64,
    pub family_weight: f64,
    pub family_max_members: u64,
    /// Heuristic source features that indicate a shared device.
    pub device_features: Vec<String>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        let band = |up_to, base| SizeBand { up_to, base };
        ScoringConfig {
            size_bands: vec![
                band(Some(1), 0.0),
                band(Some(2), 0.50),
                band(Some(5), 0.70),
                band(Some(20), 0.85),
                band(None, 0.95),
            ],
            density_weight: 0.10,
            heuristic_weight: 0.10,
            family_weight: 0.20,
            family_max_members: 3,
            device_features: vec!["device_id".to_string()],
        }
    }
}

impl ScoringConfig {
    pub fn size_base(&self, members: u64) -> f64 {
        self.size_bands
            .iter()
            .find(|b| b.up_to.is_none_or(|max| members <= max))
            .map_or(0.0, |b| b.base)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAggregates {
    pub members: u64,
    pub internal_edges: u64,
    pub heuristic_edges: u64,
    pub model_edges: u64,
    /// Heuristic edges sourced from a device feature.
    pub device_edges: u64,
}

impl ClusterAggregates {
    fn count_edge(&mut self, kind: EdgeKind, device: bool) {
        self.internal_edges += 1;
        match kind {
            EdgeKind::Heuristic => {
                self.heuristic_edges += 1;
                if device {
                    self.device_edges += 1;
                }
            }
            EdgeKind::Model => self.model_edges += 1,
        }
    }

    pub fn distinct_device_only(&self) -> bool {
        self.internal_edges > 0 && self.device_edges == self.internal_edges
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub value: f64,
    pub size_term: f64,
    pub density_term: f64,
    pub heuristic_term: f64,
    pub family_discount: f64,
}

pub fn score_cluster(aggs: &ClusterAggregates, cfg: &ScoringConfig) -> ClusterScore {
    let m = aggs.members;
    let size_term = cfg.size_base(m);
    let density = if m >= 2 {
        (aggs.internal_edges as f64 / (m * (m - 1) / 2) as f64).min(1.0)
    } else {
        0.0
    };
    let heuristic_fraction = if aggs.internal_edges > 0 {
        aggs.heuristic_edges as f64 / aggs.internal_edges as f64
    } else {
        0.0
    };
    let family = m <= cfg.family_max_members && aggs.distinct_device_only();
    let density_term = cfg.density_weight * density;
    let heuristic_term = cfg.heuristic_weight * heuristic_fraction;
    let family_discount = if family { cfg.family_weight } else { 0.0 };
    // snap to 1e-9 so sums like 0.5 + 0.1 + 0.1 - 0.2 land on the band edge
    let raw = size_term + density_term + heuristic_term - family_discount;
    ClusterScore {
        value: ((raw * 1e9).round() / 1e9).clamp(0.0, 1.0),
        size_term,
        density_term,
        heuristic_term,
        family_discount,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub id: ClusterId,
    pub members: Vec<UserId>,
    pub aggregates: ClusterAggregates,
    pub score: ClusterScore,
    pub last_scored_at: i64,
    /// Member count when the cluster was last highlighted by any flow.
    pub last_highlight_size: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Pending,
    Reconciled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeTicket {
    pub id: u64,
    pub clusters: Vec<ClusterId>,
    pub trigger: UserId,
    pub created_at: i64,
    pub status: TicketStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignOutcome {
    pub cluster: ClusterId,
    pub score: ClusterScore,
    pub ticket: Option<MergeTicket>,
    pub cache_misses: Vec<UserId>,
    /// True when the user was already assigned (replayed registration).
    pub already_assigned: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    pub neighbor_lookups: u64,
    pub adjacency_reads: u64,
    pub cache_reads: u64,
    pub cache_writes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconcileScope {
    Full,
    Affected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcEngine {
    Alternating,
    UnionFind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MergeReport {
    pub snapshot_seq: u64,
    /// (surviving cluster, absorbed clusters)
    pub merges: Vec<(ClusterId, Vec<ClusterId>)>,
    pub renamed: Vec<(ClusterId, ClusterId)>,
    pub rescored: Vec<ClusterId>,
    pub tickets_reconciled: usize,
    pub region_nodes: usize,
    pub rounds: usize,
}

impl MergeReport {
    pub fn is_empty(&self) -> bool {
        self.merges.is_empty() && self.renamed.is_empty() && self.rescored.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Highlight {
    pub cluster: ClusterId,
    pub members: u64,
    pub score: ClusterScore,
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("label given for user {0} which is not in the graph")]
    UnknownUser(UserId),
    #[error("graph vertex {0} has no label")]
    Unlabeled(UserId),
    #[error("snapshot at seq {snapshot} is older than the cache high-water mark {high_water}")]
    StaleSnapshot { snapshot: u64, high_water: u64 },
    #[error("sidecar is for graph seq {sidecar}, graph is at {graph}")]
    SidecarMismatch { sidecar: u64, graph: u64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cc(#[from] cc::CcError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Inputs of a reconciliation, gathered under the graph read lock.
#[derive(Clone, Debug)]
pub struct ReconcileJob {
    pub snapshot_seq: u64,
    pub scope: ReconcileScope,
    nodes: Vec<UserId>,
    edges: Vec<(UserId, UserId, EdgeKind, bool)>,
    /// Cluster ids held by region members when the job was prepared.
    previous: FxHashMap<UserId, ClusterId>,
    dirty_taken: usize,
}

/// Result of running a job's component computation.
#[derive(Clone, Debug)]
pub struct ReconcilePlan {
    job: ReconcileJob,
    labels: Labeling,
    rounds: usize,
}

#[derive(Clone, Debug)]
pub struct ClusterCache {
    scoring: ScoringConfig,
    assignment: FxHashMap<UserId, ClusterId>,
    clusters: FxHashMap<ClusterId, ClusterState>,
    /// Users whose neighbourhood may cross clusters, in registration order,
    /// with the graph seq their assignment observed.
    dirty: Vec<(UserId, u64)>,
    tickets: Vec<MergeTicket>,
    next_ticket: u64,
    high_water: u64,
    severed: FxHashSet<(UserId, UserId)>,
    engine: CcEngine,
    counters: OpCounters,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    graph_seq: u64,
    scoring: ScoringConfig,
    clusters: Vec<ClusterState>,
    tickets: Vec<MergeTicket>,
    next_ticket: u64,
    severed: Vec<(UserId, UserId)>,
}

impl ClusterCache {
    pub fn new(scoring: ScoringConfig) -> Self {
        ClusterCache {
            scoring,
            assignment: FxHashMap::default(),
            clusters: FxHashMap::default(),
            dirty: Vec::new(),
            tickets: Vec::new(),
            next_ticket: 1,
            high_water: 0,
            severed: FxHashSet::default(),
            engine: CcEngine::Alternating,
            counters: OpCounters::default(),
        }
    }

    pub fn with_engine(mut self, engine: CcEngine) -> Self {
        self.engine = engine;
        self
    }

    /// Builds the cache from component labels over `graph`.
    pub fn bootstrap(labels: &Labeling, graph: &Graph, scoring: ScoringConfig, at: i64) -> Result<Self, DetectorError> {
        for (u, _) in labels.iter() {
            if !graph.contains(u) {
                return Err(DetectorError::UnknownUser(u));
            }
        }
        if let Some(&u) = graph.vertices().iter().find(|u| labels.label(**u).is_none()) {
            return Err(DetectorError::Unlabeled(u));
        }
        let mut cache = ClusterCache::new(scoring);
        let device: FxHashSet<String> = cache.scoring.device_features.iter().cloned().collect();
        let mut states: BTreeMap<ClusterId, ClusterState> = BTreeMap::new();
        for &u in graph.vertices() {
            let c = ClusterId(labels.label(u).expect("checked above"));
            states.entry(c).or_insert_with(|| empty_state(c)).members.push(u);
            cache.assignment.insert(u, c);
        }
        for e in graph.edges() {
            let c = cache.assignment[&e.edge.lo];
            let dev = device.contains(e.edge.source_feature.as_str());
            states.get_mut(&c).expect("labelled").aggregates.count_edge(e.edge.kind, dev);
        }
        for (id, mut state) in states {
            state.members.sort_unstable();
            state.aggregates.members = state.members.len() as u64;
            state.score = score_cluster(&state.aggregates, &cache.scoring);
            state.last_scored_at = at;
            cache.clusters.insert(id, state);
        }
        cache.high_water = graph.seq();
        Ok(cache)
    }

    fn device_set(&self) -> FxHashSet<&str> {
        self.scoring.device_features.iter().map(String::as_str).collect()
    }

    pub fn scoring(&self) -> &ScoringConfig {
        &self.scoring
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = OpCounters::default();
    }

    pub fn high_water(&self) -> u64 {
        self.high_water
    }

    pub fn cluster_of(&self, u: UserId) -> Option<ClusterId> {
        self.assignment.get(&u).copied().filter(|c| self.clusters.contains_key(c))
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&ClusterState> {
        self.clusters.get(&id)
    }

    pub fn clusters(&self) -> impl Iterator<Item = &ClusterState> {
        self.clusters.values()
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn user_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn pending_tickets(&self) -> usize {
        self.tickets.iter().filter(|t| t.status == TicketStatus::Pending).count()
    }

    pub fn tickets(&self) -> &[MergeTicket] {
        &self.tickets
    }

    pub fn dirty_len(&self) -> usize {
        self.dirty.len()
    }

    /// user -> cluster, as a component labelling comparable with cc output.
    pub fn labeling(&self) -> Labeling {
        self.assignment
            .iter()
            .filter(|(_, c)| self.clusters.contains_key(c))
            .map(|(&u, &c)| (u, c.0))
            .collect()
    }

    /// Partition induced by the cache, as sorted member lists.
    pub fn partition(&self) -> Vec<Vec<UserId>> {
        let mut out: Vec<Vec<UserId>> = self
            .clusters
            .values()
            .map(|s| {
                let mut m = s.members.clone();
                m.sort_unstable();
                m
            })
            .collect();
        out.sort_unstable_by_key(|m| m[0]);
        out
    }

    pub fn mark_highlighted(&mut self, id: ClusterId) {
        if let Some(state) = self.clusters.get_mut(&id) {
            state.last_highlight_size = Some(state.aggregates.members);
        }
    }

    fn new_singleton(&mut self, u: UserId, at: i64) -> ClusterId {
        let id = ClusterId(u);
        let mut state = empty_state(id);
        state.members.push(u);
        state.aggregates.members = 1;
        state.score = score_cluster(&state.aggregates, &self.scoring);
        state.last_scored_at = at;
        self.clusters.insert(id, state);
        self.assignment.insert(u, id);
        self.counters.cache_writes += 1;
        id
    }

    /// Places a newly registered user whose edges are already in `graph`.
    pub fn assign_on_registration(&mut self, new_user: UserId, graph: &Graph, at: i64) -> Result<AssignOutcome, DetectorError> {
        self.counters.cache_reads += 1;
        if let Some(c) = self.cluster_of(new_user) {
            return Ok(AssignOutcome {
                cluster: c,
                score: self.clusters[&c].score,
                ticket: None,
                cache_misses: Vec::new(),
                already_assigned: true,
            });
        }
        let neighbors = graph.neighbors(new_user)?;
        self.counters.neighbor_lookups += 1;
        self.counters.adjacency_reads += neighbors.len() as u64;

        let mut misses = Vec::new();
        let mut observed: Vec<(ClusterId, u64)> = Vec::new();
        let mut neighbor_clusters = Vec::with_capacity(neighbors.len());
        for n in neighbors {
            self.counters.cache_reads += 1;
            let c = match self.cluster_of(n.user) {
                Some(c) => c,
                None => {
                    tracing::debug!(user = %new_user, neighbor = %n.user, "cache miss; neighbour treated as singleton");
                    misses.push(n.user);
                    self.new_singleton(n.user, at)
                }
            };
            neighbor_clusters.push(c);
            if !observed.iter().any(|(id, _)| *id == c) {
                observed.push((c, self.clusters[&c].aggregates.members));
            }
        }

        let seq = graph.seq();
        self.dirty.push((new_user, seq));
        for &m in &misses {
            self.dirty.push((m, seq));
        }

        let Some(&(target, _)) = observed
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        else {
            let c = self.new_singleton(new_user, at);
            return Ok(AssignOutcome {
                cluster: c,
                score: self.clusters[&c].score,
                ticket: None,
                cache_misses: misses,
                already_assigned: false,
            });
        };

        let device: FxHashSet<String> = self.scoring.device_features.iter().cloned().collect();
        let state = self.clusters.get_mut(&target).expect("observed cluster exists");
        state.members.push(new_user);
        state.aggregates.members += 1;
        for (n, c) in neighbors.iter().zip(&neighbor_clusters) {
            if *c == target {
                state.aggregates.count_edge(n.kind, device.contains(&*n.source_feature));
            }
        }
        state.score = score_cluster(&state.aggregates, &self.scoring);
        state.last_scored_at = at;
        let score = state.score;
        self.assignment.insert(new_user, target);
        self.counters.cache_writes += 1;

        let ticket = (observed.len() >= 2).then(|| {
            let mut clusters: Vec<ClusterId> = observed.iter().map(|(c, _)| *c).collect();
            clusters.sort_unstable();
            let t = MergeTicket {
                id: self.next_ticket,
                clusters,
                trigger: new_user,
                created_at: at,
                status: TicketStatus::Pending,
            };
            self.next_ticket += 1;
            self.tickets.push(t.clone());
            t
        });
        Ok(AssignOutcome {
            cluster: target,
            score,
            ticket,
            cache_misses: misses,
            already_assigned: false,
        })
    }

    /// Collects what a reconciliation at `snapshot_seq` needs from the graph.
    pub fn prepare(&self, graph: &Graph, snapshot_seq: u64, scope: ReconcileScope) -> Result<ReconcileJob, DetectorError> {
        if snapshot_seq < self.high_water {
            return Err(DetectorError::StaleSnapshot {
                snapshot: snapshot_seq,
                high_water: self.high_water,
            });
        }
        let visible = |u: &UserId| graph.vertex(*u).is_some_and(|m| m.seq <= snapshot_seq);
        let dirty_taken = self.dirty.partition_point(|&(_, s)| s <= snapshot_seq);
        let nodes: Vec<UserId> = match scope {
            ReconcileScope::Full => graph.vertices().iter().copied().filter(visible).collect(),
            ReconcileScope::Affected => {
                let mut region: FxHashSet<UserId> = FxHashSet::default();
                let mut done_clusters: FxHashSet<ClusterId> = FxHashSet::default();
                let mut frontier: Vec<UserId> = Vec::new();
                let add = |u: UserId, region: &mut FxHashSet<UserId>, frontier: &mut Vec<UserId>| {
                    if visible(&u) && region.insert(u) {
                        frontier.push(u);
                    }
                };
                for &(u, _) in &self.dirty[..dirty_taken] {
                    add(u, &mut region, &mut frontier);
                }
                while let Some(u) = frontier.pop() {
                    if let Some(c) = self.cluster_of(u) {
                        if done_clusters.insert(c) {
                            for &m in &self.clusters[&c].members {
                                add(m, &mut region, &mut frontier);
                            }
                        }
                    }
                    for n in graph.neighbors(u)? {
                        if n.seq <= snapshot_seq {
                            add(n.user, &mut region, &mut frontier);
                        }
                    }
                }
                let mut nodes: Vec<UserId> = region.into_iter().collect();
                nodes.sort_unstable();
                nodes
            }
        };
        let device = self.device_set();
        let mut edges = Vec::new();
        let in_region: Option<FxHashSet<UserId>> = match scope {
            ReconcileScope::Full => None,
            ReconcileScope::Affected => Some(nodes.iter().copied().collect()),
        };
        match &in_region {
            None => {
                for e in graph.edges() {
                    if e.seq > snapshot_seq {
                        break;
                    }
                    if !self.severed.contains(&e.edge.pair()) {
                        edges.push((e.edge.lo, e.edge.hi, e.edge.kind, device.contains(e.edge.source_feature.as_str())));
                    }
                }
            }
            Some(region) => {
                for &u in &nodes {
                    for n in graph.neighbors(u)? {
                        if n.seq <= snapshot_seq && u < n.user && !self.severed.contains(&(u, n.user)) {
                            debug_assert!(region.contains(&n.user));
                            edges.push((u, n.user, n.kind, device.contains(&*n.source_feature)));
                        }
                    }
                }
            }
        }
        let previous = nodes
            .iter()
            .filter_map(|&u| self.cluster_of(u).map(|c| (u, c)))
            .collect();
        Ok(ReconcileJob {
            snapshot_seq,
            scope,
            nodes,
            edges,
            previous,
            dirty_taken,
        })
    }

    /// Publishes a computed plan, then re-places any user registered after
    /// the plan's snapshot. Returns the merge report.
    pub fn publish(&mut self, plan: ReconcilePlan, graph: &Graph, at: i64) -> Result<MergeReport, DetectorError> {
        let ReconcilePlan { job, labels, rounds } = plan;
        if job.snapshot_seq < self.high_water {
            return Err(DetectorError::StaleSnapshot {
                snapshot: job.snapshot_seq,
                high_water: self.high_water,
            });
        }
        let mut report = MergeReport {
            snapshot_seq: job.snapshot_seq,
            region_nodes: job.nodes.len(),
            rounds,
            ..Default::default()
        };

        let mut states: BTreeMap<ClusterId, ClusterState> = BTreeMap::new();
        for &u in &job.nodes {
            let c = ClusterId(labels.label(u).unwrap_or(u));
            states.entry(c).or_insert_with(|| empty_state(c)).members.push(u);
        }
        for &(lo, _, kind, device) in &job.edges {
            let c = ClusterId(labels.label(lo).unwrap_or(lo));
            states.get_mut(&c).expect("edge endpoints are region nodes").aggregates.count_edge(kind, device);
        }

        // Users registered after the snapshot are re-placed afterwards.
        let late: Vec<(UserId, u64)> = self.dirty[job.dirty_taken..].to_vec();
        let late_set: FxHashSet<UserId> = late.iter().map(|(u, _)| *u).collect();

        let old_ids: FxHashSet<ClusterId> = match job.scope {
            ReconcileScope::Full => self.clusters.keys().copied().collect(),
            ReconcileScope::Affected => job.previous.values().copied().collect(),
        };
        let mut old_states: FxHashMap<ClusterId, ClusterState> = FxHashMap::default();
        for id in &old_ids {
            if let Some(s) = self.clusters.remove(id) {
                old_states.insert(*id, s);
            }
        }
        for s in old_states.values() {
            for m in &s.members {
                if self.assignment.get(m) == Some(&s.id) {
                    self.assignment.remove(m);
                }
            }
        }
        for u in &late_set {
            if let Some(c) = self.assignment.remove(u) {
                // late user still counted in a cluster outside the region
                if let Some(s) = self.clusters.remove(&c) {
                    for m in &s.members {
                        if self.assignment.get(m) == Some(&c) {
                            self.assignment.remove(m);
                        }
                    }
                    // its pre-snapshot members need recomputing too
                    for m in &s.members {
                        if !late_set.contains(m) {
                            self.dirty.push((*m, job.snapshot_seq));
                        }
                    }
                }
            }
        }

        for (id, mut state) in states {
            state.members.sort_unstable();
            state.aggregates.members = state.members.len() as u64;
            state.score = score_cluster(&state.aggregates, &self.scoring);
            state.last_scored_at = at;
            let mut sources: Vec<ClusterId> = state
                .members
                .iter()
                .filter_map(|m| job.previous.get(m).copied())
                .collect();
            sources.sort_unstable();
            sources.dedup();
            if let Some(old) = old_states.get(&id) {
                if old.aggregates.members == state.aggregates.members {
                    state.last_highlight_size = old.last_highlight_size;
                }
                if old.score != state.score {
                    report.rescored.push(id);
                }
            } else {
                report.rescored.push(id);
            }
            match sources.as_slice() {
                [] => {}
                [single] if *single == id => {}
                [single] => report.renamed.push((*single, id)),
                many => report.merges.push((id, many.iter().copied().filter(|c| *c != id).collect())),
            }
            for &m in &state.members {
                self.assignment.insert(m, id);
            }
            self.clusters.insert(id, state);
        }

        let mut consumed = 0;
        for t in &mut self.tickets {
            if t.status == TicketStatus::Pending && graph.vertex(t.trigger).is_some_and(|m| m.seq <= job.snapshot_seq) {
                t.status = TicketStatus::Reconciled;
                consumed += 1;
            }
        }
        report.tickets_reconciled = consumed;
        self.tickets.retain(|t| t.status == TicketStatus::Pending);

        let extra: Vec<(UserId, u64)> = self.dirty.drain(job.dirty_taken..).collect();
        self.dirty.clear();
        self.high_water = job.snapshot_seq;

        // Re-place late users, then fold their region back in.
        if !late.is_empty() {
            for (u, seq) in &late {
                self.assign_bounded(*u, *seq, graph, at)?;
            }
            let requeued: Vec<(UserId, u64)> = extra
                .into_iter()
                .filter(|(u, _)| !late_set.contains(u))
                .map(|(u, _)| (u, job.snapshot_seq))
                .collect();
            self.dirty.splice(0..0, requeued);
            let follow = self.reconcile(graph, ReconcileScope::Affected, at)?;
            report.merges.extend(follow.merges);
            report.renamed.extend(follow.renamed);
            report.rescored.extend(follow.rescored);
            report.tickets_reconciled += follow.tickets_reconciled;
        }
        Ok(report)
    }

    /// Assignment that only sees edges up to `seq`, used when replaying users
    /// registered after a snapshot.
    fn assign_bounded(&mut self, u: UserId, seq: u64, graph: &Graph, at: i64) -> Result<(), DetectorError> {
        if self.cluster_of(u).is_some() {
            return Ok(());
        }
        self.dirty.push((u, seq));
        let mut best: Option<(ClusterId, u64)> = None;
        for n in graph.neighbors(u)? {
            if n.seq > seq {
                continue;
            }
            let c = match self.cluster_of(n.user) {
                Some(c) => c,
                None => continue,
            };
            let size = self.clusters[&c].aggregates.members;
            if best.is_none_or(|(bc, bs)| size > bs || (size == bs && c < bc)) {
                best = Some((c, size));
            }
        }
        match best {
            None => {
                self.new_singleton(u, at);
            }
            Some((c, _)) => {
                let state = self.clusters.get_mut(&c).expect("exists");
                state.members.push(u);
                state.aggregates.members += 1;
                self.assignment.insert(u, c);
            }
        }
        Ok(())
    }

    /// Runs a prepared job's component computation. Needs no cache or graph
    /// access and may run on a background thread.
    pub fn compute(job: ReconcileJob, engine: CcEngine) -> Result<ReconcilePlan, DetectorError> {
        let (labels, rounds) = match engine {
            CcEngine::Alternating => {
                let edges = EdgeSet::from_pairs(job.edges.iter().map(|&(a, b, _, _)| (a, b)));
                let r = cc::alternating_cc(&edges, &job.nodes, cc::DEFAULT_MAX_ROUNDS)?;
                (r.labels, r.rounds)
            }
            CcEngine::UnionFind => {
                let pairs: Vec<_> = job.edges.iter().map(|&(a, b, _, _)| (a, b)).collect();
                (cc::union_find_cc(&pairs, &job.nodes), 0)
            }
        };
        Ok(ReconcilePlan { job, labels, rounds })
    }

    pub fn engine(&self) -> CcEngine {
        self.engine
    }

    /// Prepare, compute, and publish against the current graph state.
    pub fn reconcile(&mut self, graph: &Graph, scope: ReconcileScope, at: i64) -> Result<MergeReport, DetectorError> {
        self.reconcile_at(graph, graph.seq(), scope, at)
    }

    pub fn reconcile_at(&mut self, graph: &Graph, seq: u64, scope: ReconcileScope, at: i64) -> Result<MergeReport, DetectorError> {
        let job = self.prepare(graph, seq, scope)?;
        let plan = Self::compute(job, self.engine)?;
        self.publish(plan, graph, at)
    }

    /// Full recomputation, then every cluster at or above `floor` whose
    /// current composition was never highlighted.
    pub fn batch_flow(&mut self, graph: &Graph, floor: f64, at: i64) -> Result<Vec<Highlight>, DetectorError> {
        self.reconcile(graph, ReconcileScope::Full, at)?;
        Ok(self.unhighlighted(floor))
    }

    /// Clusters at or above `floor` whose current member count was never
    /// highlighted, marked as highlighted now.
    pub fn unhighlighted(&mut self, floor: f64) -> Vec<Highlight> {
        let mut ids: Vec<ClusterId> = self.clusters.keys().copied().collect();
        ids.sort_unstable();
        let mut out = Vec::new();
        for id in ids {
            let state = self.clusters.get_mut(&id).expect("listed");
            if state.score.value >= floor && state.last_highlight_size != Some(state.aggregates.members) {
                state.last_highlight_size = Some(state.aggregates.members);
                out.push(Highlight {
                    cluster: id,
                    members: state.aggregates.members,
                    score: state.score,
                });
            }
        }
        out
    }

    /// Replaces one cluster by the given member subsets, cutting every edge
    /// between different subsets out of future recomputations.
    pub fn split(&mut self, id: ClusterId, subsets: &[Vec<UserId>], graph: &Graph, at: i64) -> Result<Vec<ClusterId>, DetectorError> {
        let old = self.clusters.remove(&id).ok_or(DetectorError::UnknownUser(id.0))?;
        let device = self.device_set();
        let mut part_of: FxHashMap<UserId, usize> = FxHashMap::default();
        for (i, s) in subsets.iter().enumerate() {
            for &u in s {
                part_of.insert(u, i);
            }
        }
        let mut severed = Vec::new();
        let mut states: Vec<ClusterState> = subsets
            .iter()
            .map(|s| {
                let c = ClusterId(*s.iter().min().expect("non-empty subset"));
                let mut st = empty_state(c);
                st.members = s.clone();
                st.members.sort_unstable();
                st.aggregates.members = s.len() as u64;
                st
            })
            .collect();
        for &u in &old.members {
            for n in graph.neighbors(u)? {
                if u >= n.user || self.severed.contains(&(u, n.user)) {
                    continue;
                }
                match (part_of.get(&u), part_of.get(&n.user)) {
                    (Some(a), Some(b)) if a == b => {
                        states[*a].aggregates.count_edge(n.kind, device.contains(&*n.source_feature))
                    }
                    (Some(_), Some(_)) => severed.push((u, n.user)),
                    _ => {}
                }
            }
        }
        self.severed.extend(severed);
        let mut ids = Vec::new();
        for mut st in states {
            st.score = score_cluster(&st.aggregates, &self.scoring);
            st.last_scored_at = at;
            st.last_highlight_size = Some(st.aggregates.members);
            for &m in &st.members {
                self.assignment.insert(m, st.id);
            }
            ids.push(st.id);
            self.clusters.insert(st.id, st);
        }
        Ok(ids)
    }

    pub fn save_sidecar(&self, path: &Path, graph_seq: u64) -> Result<(), DetectorError> {
        let mut clusters: Vec<ClusterState> = self.clusters.values().cloned().collect();
        clusters.sort_unstable_by_key(|c| c.id);
        let mut severed: Vec<_> = self.severed.iter().copied().collect();
        severed.sort_unstable();
        let sidecar = Sidecar {
            graph_seq,
            scoring: self.scoring.clone(),
            clusters,
            tickets: self.tickets.clone(),
            next_ticket: self.next_ticket,
            severed,
        };
        std::fs::write(path, serde_json::to_vec(&sidecar)?)?;
        Ok(())
    }

    /// Loads a sidecar written at `graph_seq`; any other graph state is rejected.
    pub fn load_sidecar(path: &Path, graph_seq: u64) -> Result<Self, DetectorError> {
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(path)?)?;
        if sidecar.graph_seq != graph_seq {
            return Err(DetectorError::SidecarMismatch {
                sidecar: sidecar.graph_seq,
                graph: graph_seq,
            });
        }
        let mut cache = ClusterCache::new(sidecar.scoring);
        for state in sidecar.clusters {
            for &m in &state.members {
                cache.assignment.insert(m, state.id);
            }
            cache.clusters.insert(state.id, state);
        }
        cache.tickets = sidecar.tickets;
        cache.next_ticket = sidecar.next_ticket;
        cache.severed = sidecar.severed.into_iter().collect();
        cache.high_water = graph_seq;
        Ok(cache)
    }
}

fn empty_state(id: ClusterId) -> ClusterState {
    ClusterState {
        id,
        members: Vec::new(),
        aggregates: ClusterAggregates::default(),
        score: ClusterScore::default(),
        last_scored_at: 0,
        last_highlight_size: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edges::Edge;

    fn uid(n: u64) -> UserId {
        UserId::new(n).unwrap()
    }

    fn cid(n: u64) -> ClusterId {
        ClusterId(uid(n))
    }

    fn aggs(members: u64, internal: u64, heuristic: u64, device: u64) -> ClusterAggregates {
        ClusterAggregates {
            members,
            internal_edges: internal,
            heuristic_edges: heuristic,
            model_edges: internal - heuristic,
            device_edges: device,
        }
    }

    #[test]
    fn score_examples() {
        let cfg = ScoringConfig::default();
        assert_eq!(score_cluster(&aggs(1, 0, 0, 0), &cfg).value, 0.0);
        // 25 members, complete graph, all heuristic
        let full = aggs(25, 300, 300, 0);
        assert_eq!(score_cluster(&full, &cfg).value, (0.95f64 + 0.10 + 0.10).min(1.0));
        // family on a shared device
        let s = score_cluster(&aggs(2, 1, 1, 1), &cfg);
        assert!((s.value - (0.50 + 0.10 * 1.0 + 0.10 * 1.0 - 0.20 * 1.0)).abs() < 1e-12);
        assert_eq!(s.family_discount, 0.20);
    }

    #[test]
    fn bands() {
        let cfg = ScoringConfig::default();
        let want = [(1, 0.0), (2, 0.5), (3, 0.7), (5, 0.7), (6, 0.85), (20, 0.85), (21, 0.95), (5000, 0.95)];
        for (m, base) in want {
            assert_eq!(cfg.size_base(m), base, "members {m}");
        }
    }

    fn edge(a: u64, b: u64, feature: &str) -> Edge {
        Edge::heuristic(uid(a), uid(b), 0, feature).unwrap()
    }

    fn register(g: &mut Graph, cache: &mut ClusterCache, u: u64, links: &[u64]) -> AssignOutcome {
        g.add_vertex(uid(u), u as i64).unwrap();
        for &l in links {
            g.add_edge(edge(u, l, "ip")).unwrap();
        }
        cache.assign_on_registration(uid(u), g, u as i64).unwrap()
    }

    #[test]
    fn bootstrap_from_labels() {
        let mut g = Graph::new();
        for u in 1..=3 {
            g.add_vertex(uid(u), 0).unwrap();
        }
        g.add_edge(edge(1, 2, "ip")).unwrap();
        let labels: Labeling = [(uid(1), uid(1)), (uid(2), uid(1)), (uid(3), uid(3))].into_iter().collect();
        let cache = ClusterCache::bootstrap(&labels, &g, ScoringConfig::default(), 0).unwrap();
        assert_eq!(cache.partition(), vec![vec![uid(1), uid(2)], vec![uid(3)]]);
        let again = ClusterCache::bootstrap(&labels, &g, ScoringConfig::default(), 0).unwrap();
        assert_eq!(again.partition(), cache.partition());
        assert_eq!(again.labeling(), cache.labeling());
        let empty = ClusterCache::bootstrap(&Labeling::default(), &Graph::new(), ScoringConfig::default(), 0).unwrap();
        assert_eq!(empty.cluster_count(), 0);
        let bad: Labeling = [(uid(9), uid(9))].into_iter().collect();
        assert!(matches!(
            ClusterCache::bootstrap(&bad, &g, ScoringConfig::default(), 0),
            Err(DetectorError::UnknownUser(_))
        ));
    }

    #[test]
    fn joins_single_cluster_without_ticket() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        register(&mut g, &mut c, 1, &[]);
        register(&mut g, &mut c, 2, &[1]);
        let out = register(&mut g, &mut c, 3, &[1, 2]);
        assert_eq!(out.cluster, cid(1));
        assert!(out.ticket.is_none());
        let state = c.cluster(cid(1)).unwrap();
        assert_eq!(state.aggregates.members, 3);
        assert_eq!(state.aggregates.internal_edges, 3);
    }

    #[test]
    fn bridging_joins_largest_and_tickets() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        // A = {1..5}, B = {10..12}
        register(&mut g, &mut c, 1, &[]);
        for u in 2..=5 {
            register(&mut g, &mut c, u, &[u - 1]);
        }
        register(&mut g, &mut c, 10, &[]);
        register(&mut g, &mut c, 11, &[10]);
        register(&mut g, &mut c, 12, &[11]);
        let out = register(&mut g, &mut c, 20, &[5, 12]);
        assert_eq!(out.cluster, cid(1));
        let t = out.ticket.unwrap();
        assert_eq!(t.clusters, vec![cid(1), cid(10)]);
        assert_eq!(c.pending_tickets(), 1);
    }

    #[test]
    fn equal_sizes_break_to_lower_id() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        register(&mut g, &mut c, 4, &[]);
        register(&mut g, &mut c, 2, &[]);
        let out = register(&mut g, &mut c, 9, &[4, 2]);
        assert_eq!(out.cluster, cid(2));
    }

    #[test]
    fn isolated_registration_is_singleton() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        let out = register(&mut g, &mut c, 7, &[]);
        assert_eq!(out.cluster, cid(7));
        assert_eq!(out.score.value, 0.0);
        assert_eq!(out.score.size_term, 0.0);
    }

    #[test]
    fn cache_miss_falls_back_to_singleton() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        g.add_vertex(uid(3), 0).unwrap(); // never assigned
        let out = register(&mut g, &mut c, 5, &[3]);
        assert_eq!(out.cache_misses, vec![uid(3)]);
        assert_eq!(out.cluster, cid(3));
        c.reconcile(&g, ReconcileScope::Affected, 0).unwrap();
        assert_eq!(c.partition(), vec![vec![uid(3), uid(5)]]);
    }

    #[test]
    fn assignment_touches_only_the_neighbourhood() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        register(&mut g, &mut c, 1, &[]);
        for u in 2..=500 {
            register(&mut g, &mut c, u, &[1]);
        }
        c.reset_counters();
        register(&mut g, &mut c, 1000, &[7, 9]);
        let k = c.counters();
        assert_eq!(k.neighbor_lookups, 1);
        assert_eq!(k.adjacency_reads, 2);
        assert_eq!(k.cache_reads, 3);
        assert_eq!(k.cache_writes, 1);
    }

    #[test]
    fn reconcile_merges_ticketed_clusters() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        register(&mut g, &mut c, 3, &[]);
        register(&mut g, &mut c, 4, &[3]);
        register(&mut g, &mut c, 5, &[4]);
        register(&mut g, &mut c, 9, &[]);
        register(&mut g, &mut c, 10, &[9]);
        register(&mut g, &mut c, 20, &[5, 10]);
        let report = c.reconcile(&g, ReconcileScope::Full, 0).unwrap();
        let oracle = cc::union_find_cc(&g.snapshot().pairs().collect::<Vec<_>>(), g.vertices());
        assert_eq!(c.labeling(), oracle);
        assert_eq!(report.merges, vec![(cid(3), vec![cid(9)])]);
        assert_eq!(report.tickets_reconciled, 1);
        assert!(c.cluster_of(uid(10)) == Some(cid(3)));
        // nothing pending, cache consistent: empty report
        let again = c.reconcile(&g, ReconcileScope::Full, 0).unwrap();
        assert!(again.is_empty(), "{again:?}");
    }

    #[test]
    fn chained_merge_survives_as_global_min() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        for (u, links) in [(2, vec![]), (6, vec![]), (8, vec![]), (30, vec![2, 6]), (31, vec![6, 8])] {
            register(&mut g, &mut c, u, &links);
        }
        assert_eq!(c.pending_tickets(), 2);
        c.reconcile(&g, ReconcileScope::Affected, 0).unwrap();
        assert_eq!(c.partition(), vec![vec![uid(2), uid(6), uid(8), uid(30), uid(31)]]);
        assert_eq!(c.pending_tickets(), 0);
    }

    #[test]
    fn stale_snapshot_is_rejected() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        register(&mut g, &mut c, 1, &[]);
        register(&mut g, &mut c, 2, &[1]);
        c.reconcile(&g, ReconcileScope::Full, 0).unwrap();
        assert!(matches!(
            c.reconcile_at(&g, 1, ReconcileScope::Full, 0),
            Err(DetectorError::StaleSnapshot { .. })
        ));
    }

    #[test]
    fn late_registrations_are_replayed_on_publish() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        register(&mut g, &mut c, 1, &[]);
        register(&mut g, &mut c, 2, &[]);
        register(&mut g, &mut c, 3, &[1, 2]);
        let job = c.prepare(&g, g.seq(), ReconcileScope::Affected).unwrap();
        let plan = ClusterCache::compute(job, CcEngine::Alternating).unwrap();
        // registrations racing the background computation
        register(&mut g, &mut c, 4, &[2]);
        register(&mut g, &mut c, 5, &[]);
        register(&mut g, &mut c, 6, &[5, 4]);
        c.publish(plan, &g, 0).unwrap();
        let oracle = cc::union_find_cc(&g.snapshot().pairs().collect::<Vec<_>>(), g.vertices());
        assert_eq!(c.labeling(), oracle);
        let state = c.cluster(cid(1)).unwrap();
        assert_eq!(state.aggregates.internal_edges, 5);
    }

    #[test]
    fn batch_flow_catches_merge_grown_clusters() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        // two pairs highlighted in real time, then bridged
        register(&mut g, &mut c, 1, &[]);
        let a = register(&mut g, &mut c, 2, &[1]);
        c.mark_highlighted(a.cluster);
        register(&mut g, &mut c, 5, &[]);
        let b = register(&mut g, &mut c, 6, &[5]);
        c.mark_highlighted(b.cluster);
        let x = register(&mut g, &mut c, 9, &[2, 6]);
        c.mark_highlighted(x.cluster);
        let highlights = c.batch_flow(&g, 0.5, 0).unwrap();
        assert_eq!(highlights.len(), 1);
        assert_eq!(highlights[0].cluster, cid(1));
        assert_eq!(highlights[0].members, 5);
        // steady state: nothing new
        assert!(c.batch_flow(&g, 0.5, 0).unwrap().is_empty());
    }

    #[test]
    fn split_overrides_components() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        register(&mut g, &mut c, 1, &[]);
        register(&mut g, &mut c, 2, &[1]);
        register(&mut g, &mut c, 3, &[2]);
        let ids = c.split(cid(1), &[vec![uid(1), uid(2)], vec![uid(3)]], &g, 0).unwrap();
        assert_eq!(ids, vec![cid(1), cid(3)]);
        c.reconcile(&g, ReconcileScope::Full, 0).unwrap();
        assert_eq!(c.partition(), vec![vec![uid(1), uid(2)], vec![uid(3)]]);
    }

    #[test]
    fn sidecar_round_trip() {
        let mut g = Graph::new();
        let mut c = ClusterCache::new(ScoringConfig::default());
        register(&mut g, &mut c, 1, &[]);
        register(&mut g, &mut c, 2, &[1]);
        c.reconcile(&g, ReconcileScope::Full, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        c.save_sidecar(&path, g.seq()).unwrap();
        let back = ClusterCache::load_sidecar(&path, g.seq()).unwrap();
        assert_eq!(back.partition(), c.partition());
        assert!(matches!(
            ClusterCache::load_sidecar(&path, g.seq() + 1),
            Err(DetectorError::SidecarMismatch { .. })
        ));
    }
}
