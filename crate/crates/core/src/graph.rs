//! Embedded user-association graph.
//!
//! Vertices are users, edges are canonical undirected associations. The graph
//! is add-only: every mutation gets the next sequence number and may be
//! mirrored to an append-only log from which the exact state at any sequence
//! number can be rebuilt.
//!
//! Log records are `[len: u32 LE][crc32: u32 LE][payload: len bytes of JSON]`.
//! A torn final record is tolerated on load; a checksum failure is not.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribute::UserId;
use crate::edges::{Edge, EdgeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexStatus {
    Registered,
    /// Created implicitly by an edge that arrived before the registration.
    Placeholder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexMeta {
    pub registered_at: i64,
    pub status: VertexStatus,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub user: UserId,
    pub kind: EdgeKind,
    pub score: f64,
    pub source_feature: Arc<str>,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredEdge {
    pub seq: u64,
    #[serde(flatten)]
    pub edge: Edge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogOp {
    AddVertex { user: UserId, registered_at: i64 },
    AddEdge { edge: Edge },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeLogEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub op: LogOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Added(u64),
    Duplicate,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("self loop on user {0}")]
    SelfLoop(UserId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("corrupt log record after sequence {last_good_seq}: {reason}")]
    Corrupt { last_good_seq: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Immutable point-in-time view of the edges and vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSnapshot {
    pub seq: u64,
    pub edges: Arc<Vec<StoredEdge>>,
    pub vertices: Arc<Vec<UserId>>,
}

impl GraphSnapshot {
    pub fn pairs(&self) -> impl Iterator<Item = (UserId, UserId)> + '_ {
        self.edges.iter().map(|e| e.edge.pair())
    }

    /// `lo\thi\tkind\tscore\tcreated_at\tseq` per edge.
    pub fn write_tsv(&self, out: &mut impl Write) -> io::Result<()> {
        for e in self.edges.iter() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.edge.lo,
                e.edge.hi,
                e.edge.kind.as_str(),
                e.edge.score,
                e.edge.created_at,
                e.seq
            )?;
        }
        Ok(())
    }

    pub fn write_nodes_tsv(&self, out: &mut impl Write) -> io::Result<()> {
        for v in self.vertices.iter() {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Graph {
    vertices: FxHashMap<UserId, VertexMeta>,
    vertex_order: Vec<UserId>,
    adjacency: FxHashMap<UserId, Vec<Neighbor>>,
    pairs: FxHashSet<(UserId, UserId)>,
    edges: Vec<StoredEdge>,
    seq: u64,
    log: Option<LogWriter>,
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("vertices", &self.vertices.len())
            .field("edges", &self.edges.len())
            .field("seq", &self.seq)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) a logged graph, replaying whatever the log holds.
    pub fn open(path: &Path) -> Result<(Graph, LoadReport), GraphError> {
        let (mut graph, report) = if path.exists() {
            Graph::load(path)?
        } else {
            (Graph::new(), LoadReport::default())
        };
        if report.truncated {
            // drop the torn tail so new records start on a clean boundary
            let file = OpenOptions::new().write(true).open(path)?;
            file.set_len(report.valid_bytes)?;
        }
        graph.log = Some(LogWriter::append(path)?);
        Ok((graph, report))
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, u: UserId) -> bool {
        self.vertices.contains_key(&u)
    }

    pub fn vertex(&self, u: UserId) -> Option<&VertexMeta> {
        self.vertices.get(&u)
    }

    pub fn vertices(&self) -> &[UserId] {
        &self.vertex_order
    }

    pub fn edges(&self) -> &[StoredEdge] {
        &self.edges
    }

    pub fn degree(&self, u: UserId) -> usize {
        self.adjacency.get(&u).map_or(0, Vec::len)
    }

    /// Registers a vertex. A placeholder created by an early edge is promoted
    /// in place and keeps its sequence number.
    pub fn add_vertex(&mut self, user: UserId, registered_at: i64) -> Result<AddOutcome, GraphError> {
        if let Some(meta) = self.vertices.get_mut(&user) {
            if meta.status == VertexStatus::Placeholder {
                meta.status = VertexStatus::Registered;
                meta.registered_at = registered_at;
                self.seq += 1;
                let seq = self.seq;
                self.append(seq, LogOp::AddVertex { user, registered_at })?;
                return Ok(AddOutcome::Added(seq));
            }
            return Ok(AddOutcome::Duplicate);
        }
        self.seq += 1;
        let seq = self.seq;
        self.insert_vertex(user, registered_at, VertexStatus::Registered, seq);
        self.append(seq, LogOp::AddVertex { user, registered_at })?;
        Ok(AddOutcome::Added(seq))
    }

    fn insert_vertex(&mut self, user: UserId, registered_at: i64, status: VertexStatus, seq: u64) {
        self.vertices.insert(user, VertexMeta { registered_at, status, seq });
        self.vertex_order.push(user);
    }

    /// Adds an undirected edge. The same pair (in either orientation, of any
    /// kind) is a duplicate and changes nothing.
    pub fn add_edge(&mut self, edge: Edge) -> Result<AddOutcome, GraphError> {
        if edge.lo == edge.hi {
            return Err(GraphError::SelfLoop(edge.lo));
        }
        let edge = if edge.lo > edge.hi {
            Edge { lo: edge.hi, hi: edge.lo, ..edge }
        } else {
            edge
        };
        if self.pairs.contains(&edge.pair()) {
            return Ok(AddOutcome::Duplicate);
        }
        self.seq += 1;
        let seq = self.seq;
        for u in [edge.lo, edge.hi] {
            if !self.vertices.contains_key(&u) {
                tracing::debug!(user = %u, "edge endpoint not registered yet; placeholder vertex");
                self.insert_vertex(u, edge.created_at, VertexStatus::Placeholder, seq);
            }
        }
        let feature: Arc<str> = Arc::from(edge.source_feature.as_str());
        let link = |user| Neighbor {
            user,
            kind: edge.kind,
            score: edge.score,
            source_feature: feature.clone(),
            seq,
        };
        self.adjacency.entry(edge.lo).or_default().push(link(edge.hi));
        self.adjacency.entry(edge.hi).or_default().push(link(edge.lo));
        self.pairs.insert(edge.pair());
        self.append(seq, LogOp::AddEdge { edge: edge.clone() })?;
        self.edges.push(StoredEdge { seq, edge });
        Ok(AddOutcome::Added(seq))
    }

    pub fn neighbors(&self, u: UserId) -> Result<&[Neighbor], GraphError> {
        if !self.vertices.contains_key(&u) {
            return Err(GraphError::UnknownUser(u));
        }
        Ok(self.adjacency.get(&u).map_or(&[], Vec::as_slice))
    }

    pub fn has_edge(&self, a: UserId, b: UserId) -> bool {
        let key = if a < b { (a, b) } else { (b, a) };
        self.pairs.contains(&key)
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            seq: self.seq,
            edges: Arc::new(self.edges.clone()),
            vertices: Arc::new(self.vertex_order.clone()),
        }
    }

    /// The graph as it stood after mutation `seq`.
    pub fn snapshot_at(&self, seq: u64) -> GraphSnapshot {
        let cut = self.edges.partition_point(|e| e.seq <= seq);
        GraphSnapshot {
            seq: seq.min(self.seq),
            edges: Arc::new(self.edges[..cut].to_vec()),
            vertices: Arc::new(
                self.vertex_order
                    .iter()
                    .copied()
                    .filter(|u| self.vertices[u].seq <= seq)
                    .collect(),
            ),
        }
    }

    fn append(&mut self, seq: u64, op: LogOp) -> Result<(), GraphError> {
        if let Some(log) = self.log.as_mut() {
            log.write(&EdgeLogEntry { seq, op })?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), GraphError> {
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(())
    }

    /// Rebuilds a graph from its log. A record cut short at end of file ends
    /// the replay and is reported; anything else malformed is an error.
    pub fn load(path: &Path) -> Result<(Graph, LoadReport), GraphError> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut graph = Graph::new();
        let mut report = LoadReport::default();
        loop {
            let mut header = [0u8; 8];
            match read_full(&mut reader, &mut header)? {
                0 => break,
                8 => {}
                _ => {
                    report.truncated = true;
                    break;
                }
            }
            let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(header[4..].try_into().unwrap());
            let mut payload = vec![0u8; len];
            if read_full(&mut reader, &mut payload)? < len {
                report.truncated = true;
                break;
            }
            let corrupt = |reason: String| GraphError::Corrupt {
                last_good_seq: report.last_seq,
                reason,
            };
            if crc32fast::hash(&payload) != crc {
                return Err(corrupt("checksum mismatch".into()));
            }
            let entry: EdgeLogEntry =
                serde_json::from_slice(&payload).map_err(|e| corrupt(e.to_string()))?;
            graph.apply(entry).map_err(|e| corrupt(e.to_string()))?;
            report.entries += 1;
            report.last_seq = graph.seq;
            report.valid_bytes += 8 + len as u64;
        }
        if report.truncated {
            tracing::warn!(last_seq = report.last_seq, "graph log ends in a torn record");
        }
        Ok((graph, report))
    }

    fn apply(&mut self, entry: EdgeLogEntry) -> Result<(), GraphError> {
        let outcome = match entry.op {
            LogOp::AddVertex { user, registered_at } => self.add_vertex(user, registered_at)?,
            LogOp::AddEdge { edge } => self.add_edge(edge)?,
        };
        match outcome {
            AddOutcome::Added(seq) if seq == entry.seq => Ok(()),
            other => Err(GraphError::Corrupt {
                last_good_seq: self.seq,
                reason: format!("entry {} replayed as {other:?}", entry.seq),
            }),
        }
    }
}

fn read_full(reader: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct LoadReport {
    pub entries: u64,
    pub last_seq: u64,
    pub truncated: bool,
    pub valid_bytes: u64,
}

struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    fn append(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LogWriter { out: BufWriter::new(file) })
    }

    fn write(&mut self, entry: &EdgeLogEntry) -> io::Result<()> {
        let payload = serde_json::to_vec(entry).expect("log entry serializes");
        self.out.write_all(&(payload.len() as u32).to_le_bytes())?;
        self.out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
        self.out.write_all(&payload)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

impl Drop for LogWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Single-writer, many-reader handle.
#[derive(Clone, Default)]
pub struct SharedGraph(Arc<RwLock<Graph>>);

impl SharedGraph {
    pub fn new(graph: Graph) -> Self {
        SharedGraph(Arc::new(RwLock::new(graph)))
    }

    pub fn read(&self) -> parking_lot::RwLockReadGuard<'_, Graph> {
        self.0.read()
    }

    pub fn write(&self) -> parking_lot::RwLockWriteGuard<'_, Graph> {
        self.0.write()
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        self.0.read().snapshot()
    }
}
