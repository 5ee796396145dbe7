//! Connected components.
//!
//! The batch engine is the Alternating Algorithm: large-star and small-star
//! rewrites applied in turn until a full round leaves the edge set unchanged,
//! at which point every component is a star centred on its minimum id. Each
//! rewrite is a group-by-node over the edge list, run as a parallel map over
//! node groups followed by a sort/dedup reduce.
//!
//! Union-find gives the same labelling and serves as the oracle; a plain
//! breadth-first traversal is kept as the per-event baseline.

use std::collections::VecDeque;

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use thiserror::Error;

use crate::attribute::UserId;
use crate::graph::{Graph, GraphError};

/// Canonical `(lo, hi)` pairs, sorted, no self loops, no duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSet(Vec<(UserId, UserId)>);

impl EdgeSet {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (UserId, UserId)>) -> Self {
        let v: Vec<_> = pairs
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        Self::canonical(v)
    }

    fn canonical(mut v: Vec<(UserId, UserId)>) -> Self {
        v.par_sort_unstable();
        v.dedup();
        EdgeSet(v)
    }

    pub fn pairs(&self) -> &[(UserId, UserId)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn nodes(&self) -> Vec<UserId> {
        let mut nodes: Vec<UserId> = self.0.iter().flat_map(|&(a, b)| [a, b]).collect();
        nodes.par_sort_unstable();
        nodes.dedup();
        nodes
    }
}

/// Node -> component label (the component's minimum id).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Labeling(FxHashMap<UserId, UserId>);

impl Labeling {
    pub fn label(&self, u: UserId) -> Option<UserId> {
        self.0.get(&u).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, UserId)> + '_ {
        self.0.iter().map(|(&u, &l)| (u, l))
    }

    /// `(node, label)` sorted by node.
    pub fn sorted(&self) -> Vec<(UserId, UserId)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_unstable();
        v
    }

    /// Components as sorted member lists, ordered by their minimum.
    pub fn components(&self) -> Vec<Vec<UserId>> {
        let mut groups: FxHashMap<UserId, Vec<UserId>> = FxHashMap::default();
        for (u, l) in self.iter() {
            groups.entry(l).or_default().push(u);
        }
        let mut out: Vec<Vec<UserId>> = groups
            .into_values()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        out.sort_unstable_by_key(|g| g[0]);
        out
    }

    pub fn into_inner(self) -> FxHashMap<UserId, UserId> {
        self.0
    }
}

impl FromIterator<(UserId, UserId)> for Labeling {
    fn from_iter<I: IntoIterator<Item = (UserId, UserId)>>(iter: I) -> Self {
        Labeling(iter.into_iter().collect())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CcError {
    #[error("no convergence after {0} rounds")]
    NonConvergence(usize),
}

pub const DEFAULT_MAX_ROUNDS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CcResult {
    pub labels: Labeling,
    pub rounds: usize,
    /// Edge count after each round.
    pub trace: Vec<usize>,
}

/// Both directions of every edge, grouped by source node.
fn grouped(edges: &EdgeSet) -> Vec<(UserId, UserId)> {
    let mut directed: Vec<(UserId, UserId)> = Vec::with_capacity(edges.len() * 2);
    for &(a, b) in edges.pairs() {
        directed.push((a, b));
        directed.push((b, a));
    }
    directed.par_sort_unstable();
    directed
}

/// Start offsets of each node's run in a grouped list, plus the end.
fn group_bounds(directed: &[(UserId, UserId)]) -> Vec<usize> {
    let mut bounds = Vec::new();
    for i in 0..directed.len() {
        if i == 0 || directed[i].0 != directed[i - 1].0 {
            bounds.push(i);
        }
    }
    bounds.push(directed.len());
    bounds
}

fn star<F>(edges: &EdgeSet, emit: F) -> EdgeSet
where
    F: Fn(UserId, &[(UserId, UserId)], &mut Vec<(UserId, UserId)>) + Sync,
{
    let directed = grouped(edges);
    let bounds = group_bounds(&directed);
    let out: Vec<(UserId, UserId)> = bounds
        .par_windows(2)
        .fold(Vec::new, |mut acc, w| {
            let group = &directed[w[0]..w[1]];
            emit(group[0].0, group, &mut acc);
            acc
        })
        .flatten()
        .collect();
    EdgeSet::from_pairs(out)
}

/// For each node `v` with `m = min(N(v) ∪ {v})`, links `m` to every neighbour
/// larger than `v`.
pub fn large_star(edges: &EdgeSet) -> EdgeSet {
    star(edges, |v, group, out| {
        // groups are sorted by neighbour, so the first entry is the smallest
        let m = v.min(group[0].1);
        for &(_, w) in group.iter().rev() {
            if w <= v {
                break;
            }
            out.push((m, w));
        }
    })
}

/// For each node `v` with `m = min(N(v) ∪ {v})`, links `m` to every neighbour
/// not larger than `v`, and to `v` itself.
pub fn small_star(edges: &EdgeSet) -> EdgeSet {
    star(edges, |v, group, out| {
        let m = v.min(group[0].1);
        for &(_, w) in group {
            if w > v {
                break;
            }
            out.push((m, w));
        }
        if v != m {
            out.push((m, v));
        }
    })
}

/// Labels every node with its component minimum. `isolated` carries vertices
/// without edges; they label themselves.
pub fn alternating_cc(edges: &EdgeSet, isolated: &[UserId], max_rounds: usize) -> Result<CcResult, CcError> {
    let mut current = edges.clone();
    let mut rounds = 0;
    let mut trace = Vec::new();
    if !current.is_empty() {
        loop {
            if rounds == max_rounds {
                return Err(CcError::NonConvergence(rounds));
            }
            let next = small_star(&large_star(&current));
            rounds += 1;
            trace.push(next.len());
            if next == current {
                break;
            }
            current = next;
        }
    }
    // converged edge sets are stars around each component minimum
    let mut labels: FxHashMap<UserId, UserId> = FxHashMap::default();
    labels.reserve(current.len() + isolated.len());
    for &(lo, hi) in current.pairs() {
        labels.insert(lo, lo);
        labels.insert(hi, lo);
    }
    for &u in isolated {
        labels.entry(u).or_insert(u);
    }
    Ok(CcResult {
        labels: Labeling(labels),
        rounds,
        trace,
    })
}

pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    min: Vec<UserId>,
}

impl UnionFind {
    pub fn new(ids: &[UserId]) -> Self {
        UnionFind {
            parent: (0..ids.len() as u32).collect(),
            size: vec![1; ids.len()],
            min: ids.to_vec(),
        }
    }

    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    pub fn union(&mut self, a: u32, b: u32) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a as usize] < self.size[b as usize] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b as usize] = a;
        self.size[a as usize] += self.size[b as usize];
        self.min[a as usize] = self.min[a as usize].min(self.min[b as usize]);
    }

    pub fn min_of(&mut self, x: u32) -> UserId {
        let r = self.find(x);
        self.min[r as usize]
    }
}

/// Exact components by union-find with the minimum id as representative.
pub fn union_find_cc(edges: &[(UserId, UserId)], nodes: &[UserId]) -> Labeling {
    let mut index: FxHashMap<UserId, u32> = FxHashMap::default();
    let mut ids: Vec<UserId> = Vec::new();
    let slot = |u: UserId, index: &mut FxHashMap<UserId, u32>, ids: &mut Vec<UserId>| {
        *index.entry(u).or_insert_with(|| {
            ids.push(u);
            (ids.len() - 1) as u32
        })
    };
    for &u in nodes {
        slot(u, &mut index, &mut ids);
    }
    let mut links = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        links.push((slot(a, &mut index, &mut ids), slot(b, &mut index, &mut ids)));
    }
    let mut uf = UnionFind::new(&ids);
    for (a, b) in links {
        uf.union(a, b);
    }
    ids.iter()
        .enumerate()
        .map(|(i, &u)| (u, uf.min_of(i as u32)))
        .collect()
}

/// Every user reachable from `u`, sorted.
pub fn traverse_component(g: &Graph, u: UserId) -> Result<Vec<UserId>, GraphError> {
    traverse_counted(g, u).map(|(v, _)| v)
}

/// Like [`traverse_component`], also returning the number of adjacency entries read.
pub fn traverse_counted(g: &Graph, u: UserId) -> Result<(Vec<UserId>, usize), GraphError> {
    g.neighbors(u)?;
    let mut seen: FxHashSet<UserId> = FxHashSet::default();
    let mut queue = VecDeque::from([u]);
    seen.insert(u);
    let mut reads = 0;
    while let Some(v) = queue.pop_front() {
        for n in g.neighbors(v)? {
            reads += 1;
            if seen.insert(n.user) {
                queue.push_back(n.user);
            }
        }
    }
    let mut out: Vec<UserId> = seen.into_iter().collect();
    out.sort_unstable();
    Ok((out, reads))
}
