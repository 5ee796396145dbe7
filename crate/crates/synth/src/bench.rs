//! Per-event cost of the three clustering approaches, and alternating-CC
//! runtime against graph scale.

use std::io;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringwatch_core::attribute::UserId;
use ringwatch_core::cc::{alternating_cc, traverse_counted, union_find_cc, CcError, EdgeSet, DEFAULT_MAX_ROUNDS};
use ringwatch_core::detector::{ClusterCache, DetectorError, ScoringConfig};
use ringwatch_core::edges::Edge;
use ringwatch_core::graph::{Graph, GraphError};
use ringwatch_service::metrics::percentile;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Cc(#[from] CcError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    /// Traverse the new user's component.
    Traversal,
    /// Recompute every component.
    FullCc,
    /// Assign through the cluster cache.
    Cache,
}

impl Approach {
    pub fn number(self) -> u8 {
        match self {
            Approach::Traversal => 1,
            Approach::FullCc => 2,
            Approach::Cache => 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApproachConfig {
    pub total_edges: usize,
    pub component_sizes: Vec<usize>,
    /// Measured registrations per size for approaches 1 and 3.
    pub events: usize,
    /// Measured registrations per size for approach 2.
    pub full_cc_events: usize,
    pub warmup: usize,
    pub filler_component: usize,
    pub seed: u64,
}

impl Default for ApproachConfig {
    fn default() -> Self {
        ApproachConfig {
            total_edges: 100_000,
            component_sizes: vec![10, 100, 1_000, 10_000],
            events: 500,
            full_cc_events: 7,
            warmup: 20,
            filler_component: 10,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproachRow {
    pub approach: u8,
    pub component_size: usize,
    pub graph_edges: usize,
    pub events: usize,
    pub p50_us: f64,
    pub p95_us: f64,
    pub mean_us: f64,
    /// Mean machine-independent work per event: vertices visited, edges
    /// processed, or cache operations.
    pub ops_per_event: f64,
}

fn uid(n: u64) -> UserId {
    UserId::new(n).expect("ids start at 1")
}

fn link(g: &mut Graph, a: u64, b: u64) -> Result<(), GraphError> {
    if a != b {
        g.add_edge(Edge::heuristic(uid(a), uid(b), 0, "ip").expect("distinct endpoints"))?;
    }
    Ok(())
}

/// Adds a connected random component on ids `first..first + size`: a random
/// recursive tree plus about `extra` random chords.
fn plant(g: &mut Graph, rng: &mut ChaCha8Rng, first: u64, size: u64, extra: u64) -> Result<(), GraphError> {
    for i in 0..size {
        g.add_vertex(uid(first + i), 0)?;
        if i > 0 {
            link(g, first + i, first + rng.gen_range(0..i))?;
        }
    }
    for _ in 0..extra {
        link(g, first + rng.gen_range(0..size), first + rng.gen_range(0..size))?;
    }
    Ok(())
}

/// A graph of about `total_edges` edges holding `copies` planted components
/// of `size` users each (ids `1..=copies * size`), padded with small filler
/// components.
pub fn planted_graph(size: usize, copies: usize, total_edges: usize, filler: usize, seed: u64) -> Result<Graph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    for c in 0..copies as u64 {
        plant(&mut g, &mut rng, 1 + c * size as u64, size as u64, size as u64)?;
    }
    let mut next = (copies * size) as u64 + 1;
    let filler = filler.max(2) as u64;
    while g.edge_count() < total_edges {
        plant(&mut g, &mut rng, next, filler, filler / 2)?;
        next += filler;
    }
    Ok(g)
}

struct Samples {
    ns: Vec<u64>,
    ops: u64,
}

impl Samples {
    fn row(mut self, approach: Approach, size: usize, edges: usize) -> ApproachRow {
        self.ns.sort_unstable();
        let n = self.ns.len().max(1) as f64;
        ApproachRow {
            approach: approach.number(),
            component_size: size,
            graph_edges: edges,
            events: self.ns.len(),
            p50_us: percentile(&self.ns, 50.0) as f64 / 1e3,
            p95_us: percentile(&self.ns, 95.0) as f64 / 1e3,
            mean_us: self.ns.iter().sum::<u64>() as f64 / n / 1e3,
            ops_per_event: self.ops as f64 / n,
        }
    }
}

/// Enough copies of the planted component that each spreads the events over
/// a few, so no copy grows much while being measured.
fn copies_for(size: usize, total_edges: usize, events: usize) -> usize {
    (total_edges / (2 * size).max(1)).clamp(1, events.max(1))
}

/// Replays the same registrations against a fresh planted graph and times
/// one approach. Each approach gets its own pass so one cannot warm or
/// pollute the CPU caches for another.
fn run_pass(cfg: &ApproachConfig, size: usize, seed: u64, approach: Approach) -> Result<(Samples, usize), BenchError> {
    let events = match approach {
        Approach::FullCc => cfg.full_cc_events,
        _ => cfg.events,
    };
    let warmup = if approach == Approach::FullCc { 1 } else { cfg.warmup };
    let copies = copies_for(size, cfg.total_edges, cfg.warmup + cfg.events);
    let mut g = planted_graph(size, copies, cfg.total_edges, cfg.filler_component, seed)?;
    let graph_edges = g.edge_count();
    let mut cache = match approach {
        Approach::Cache => {
            let pairs: Vec<(UserId, UserId)> = g.edges().iter().map(|e| e.edge.pair()).collect();
            let labels = union_find_cc(&pairs, g.vertices());
            Some(ClusterCache::bootstrap(&labels, &g, ScoringConfig::default(), 0)?)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut next = g.vertices().iter().map(|u| u.get()).max().unwrap_or(0) + 1;
    let mut out = Samples { ns: Vec::new(), ops: 0 };

    for k in 0..warmup + events {
        let u = uid(next);
        next += 1;
        let at = k as i64 + 1;
        let base = (k % copies * size) as u64;
        g.add_vertex(u, at)?;
        link(&mut g, u.get(), base + rng.gen_range(1..=size as u64))?;

        let t = Instant::now();
        let ops = match approach {
            Approach::Traversal => traverse_counted(&g, u)?.1 as u64,
            Approach::FullCc => {
                let edges = EdgeSet::from_pairs(g.edges().iter().map(|e| e.edge.pair()));
                let r = alternating_cc(&edges, &[], DEFAULT_MAX_ROUNDS)?;
                edges.len() as u64 + r.trace.iter().map(|&n| n as u64).sum::<u64>()
            }
            Approach::Cache => {
                let cache = cache.as_mut().expect("built for this pass");
                let before = cache.counters();
                cache.assign_on_registration(u, &g, at)?;
                let after = cache.counters();
                (after.neighbor_lookups - before.neighbor_lookups)
                    + (after.adjacency_reads - before.adjacency_reads)
                    + (after.cache_reads - before.cache_reads)
                    + (after.cache_writes - before.cache_writes)
            }
        };
        let dt = t.elapsed().as_nanos() as u64;
        if k >= warmup {
            out.ns.push(dt);
            out.ops += ops;
        }
    }
    Ok((out, graph_edges))
}

pub fn bench_approaches(cfg: &ApproachConfig) -> Result<Vec<ApproachRow>, BenchError> {
    let mut rows = Vec::new();
    for (i, &size) in cfg.component_sizes.iter().enumerate() {
        let seed = cfg.seed + i as u64;
        for approach in [Approach::Traversal, Approach::FullCc, Approach::Cache] {
            let (samples, edges) = run_pass(cfg, size, seed, approach)?;
            rows.push(samples.row(approach, size, edges));
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CcScaleConfig {
    pub edge_counts: Vec<usize>,
    /// Node counts swept at `node_sweep_edges` edges.
    pub node_counts: Vec<usize>,
    pub node_sweep_edges: usize,
    pub avg_degree: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for CcScaleConfig {
    fn default() -> Self {
        CcScaleConfig {
            edge_counts: vec![10_000, 100_000, 1_000_000],
            node_counts: vec![10_000, 100_000, 1_000_000],
            node_sweep_edges: 100_000,
            avg_degree: 2.0,
            repeats: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CcScaleRow {
    /// `edges` or `nodes`: which quantity this row's sweep varies.
    pub sweep: &'static str,
    pub edges: usize,
    pub nodes: usize,
    /// Median over repeats.
    pub seconds: f64,
    pub rounds: usize,
    pub components: usize,
}

/// `edges` distinct random pairs over ids `1..=nodes`, plus the ids no edge touches.
pub fn random_graph(nodes: usize, edges: usize, seed: u64) -> (EdgeSet, Vec<UserId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_pairs = nodes.saturating_mul(nodes.saturating_sub(1)) / 2;
    let want = edges.min(max_pairs);
    let mut pairs = Vec::with_capacity(want);
    let mut set = EdgeSet::from_pairs([]);
    while set.len() < want {
        while pairs.len() < want + want / 8 + 16 {
            let a = rng.gen_range(1..=nodes as u64);
            let b = rng.gen_range(1..=nodes as u64);
            if a != b {
                pairs.push((uid(a), uid(b)));
            }
        }
        set = EdgeSet::from_pairs(pairs.iter().copied());
        if set.len() > want {
            set = EdgeSet::from_pairs(set.pairs()[..want].iter().copied());
        }
    }
    let mut touched = vec![false; nodes + 1];
    for &(a, b) in set.pairs() {
        touched[a.get() as usize] = true;
        touched[b.get() as usize] = true;
    }
    let isolated = (1..=nodes).filter(|&i| !touched[i]).map(|i| uid(i as u64)).collect();
    (set, isolated)
}

fn time_cc(edges: &EdgeSet, isolated: &[UserId], repeats: usize) -> Result<(f64, usize, usize), CcError> {
    let mut times = Vec::with_capacity(repeats);
    let mut rounds = 0;
    let mut components = 0;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let r = alternating_cc(edges, isolated, DEFAULT_MAX_ROUNDS)?;
        times.push(t.elapsed().as_secs_f64());
        rounds = r.rounds;
        components = r.labels.iter().filter(|(u, l)| u == l).count();
    }
    times.sort_by(f64::total_cmp);
    Ok((times[times.len() / 2], rounds, components))
}

pub fn bench_cc_scale(cfg: &CcScaleConfig) -> Result<Vec<CcScaleRow>, BenchError> {
    let mut rows = Vec::new();
    for (i, &e) in cfg.edge_counts.iter().enumerate() {
        let nodes = ((2.0 * e as f64) / cfg.avg_degree).round().max(2.0) as usize;
        let (edges, isolated) = random_graph(nodes, e, cfg.seed + i as u64);
        let (seconds, rounds, components) = time_cc(&edges, &isolated, cfg.repeats)?;
        rows.push(CcScaleRow {
            sweep: "edges",
            edges: edges.len(),
            nodes,
            seconds,
            rounds,
            components,
        });
    }
    for (i, &n) in cfg.node_counts.iter().enumerate() {
        let (edges, isolated) = random_graph(n, cfg.node_sweep_edges, cfg.seed + 100 + i as u64);
        let (seconds, rounds, components) = time_cc(&edges, &isolated, cfg.repeats)?;
        rows.push(CcScaleRow {
            sweep: "nodes",
            edges: edges.len(),
            nodes: n,
            seconds,
            rounds,
            components,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit { slope, intercept, r2 })
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl io::Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
