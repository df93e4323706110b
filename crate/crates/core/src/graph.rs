//! Directed road graph with Top-K neighbour selection.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied before taking the log of an adjacency weight.
pub const LOG_BIAS_EPS: f64 = 1e-6;
pub const DEFAULT_TOP_K: usize = 5;
pub const EDGE_HEADER: [&str; 3] = ["src_id", "dst_id", "weight"];

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("row {row}: unknown segment id `{id}`")]
    UnknownSegment { row: usize, id: String },
    #[error("row {row}: weight {weight} is negative or not finite")]
    InvalidWeight { row: usize, weight: f64 },
    #[error("segment `{0}` is not in the graph")]
    NotInGraph(String),
    #[error("edge list: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    pub src_id: String,
    pub dst_id: String,
    pub weight: f64,
}

/// Segment graph with dense adjacency; `adjacency[i][j]` weights the edge
/// from segment `i` to segment `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    segment_ids: Vec<String>,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<f64>>,
}

impl RoadGraph {
    /// Builds the graph over `segment_ids`. Duplicate rows have their weights
    /// summed.
    pub fn from_edges(segment_ids: &[String], rows: &[EdgeRow]) -> Result<Self, GraphError> {
        let index: HashMap<String, usize> = segment_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let n = segment_ids.len();
        let mut adjacency = vec![vec![0.0; n]; n];
        let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (r, row) in rows.iter().enumerate() {
            let line = r + 1;
            let lookup = |id: &str| {
                index.get(id).copied().ok_or_else(|| GraphError::UnknownSegment {
                    row: line,
                    id: id.to_string(),
                })
            };
            let (s, d) = (lookup(&row.src_id)?, lookup(&row.dst_id)?);
            if !(row.weight.is_finite() && row.weight >= 0.0) {
                return Err(GraphError::InvalidWeight {
                    row: line,
                    weight: row.weight,
                });
            }
            if let Some(first) = seen.insert((s, d), line) {
                log::warn!(
                    "edge {} -> {} repeated on rows {first} and {line}; weights summed",
                    row.src_id,
                    row.dst_id
                );
            }
            adjacency[s][d] += row.weight;
        }
        Ok(Self {
            segment_ids: segment_ids.to_vec(),
            index,
            adjacency,
        })
    }

    pub fn segment_ids(&self) -> &[String] {
        &self.segment_ids
    }

    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn weight(&self, src: usize, dst: usize) -> f64 {
        self.adjacency[src][dst]
    }

    /// Up to `k` strongest out-neighbours of segment `i` (self excluded,
    /// zero weights skipped), ordered by weight then id, with weights
    /// renormalized over the selection.
    pub fn top_k(&self, i: usize, k: usize) -> Vec<(usize, f64)> {
        let mut cand: Vec<(usize, f64)> = self.adjacency[i]
            .iter()
            .enumerate()
            .filter(|&(j, &w)| j != i && w > 0.0)
            .map(|(j, &w)| (j, w))
            .collect();
        cand.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.segment_ids[a.0].cmp(&self.segment_ids[b.0]))
        });
        cand.truncate(k);
        let total: f64 = cand.iter().map(|c| c.1).sum();
        cand.into_iter().map(|(j, w)| (j, w / total)).collect()
    }

    /// Named form of [`RoadGraph::top_k`].
    pub fn top_k_neighbors(&self, segment: &str, k: usize) -> Result<Vec<(String, f64)>, GraphError> {
        let i = self.index_of(segment).ok_or_else(|| GraphError::NotInGraph(segment.to_string()))?;
        Ok(self
            .top_k(i, k)
            .into_iter()
            .map(|(j, w)| (self.segment_ids[j].clone(), w))
            .collect())
    }
}

/// Additive attention bias for a normalized adjacency weight.
pub fn log_bias(w: f64) -> f64 {
    w.max(LOG_BIAS_EPS).ln()
}

pub fn read_edge_csv(reader: impl Read) -> Result<Vec<EdgeRow>, GraphError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| GraphError::Malformed(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != EDGE_HEADER {
        return Err(GraphError::Malformed(format!("expected header {}", EDGE_HEADER.join(","))));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| GraphError::Malformed(format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn write_edge_csv(writer: impl Write, rows: &[EdgeRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}

/// Reads an edge list and validates it against the known segment ids.
pub fn load_graph(path: &Path, segment_ids: &[String]) -> Result<RoadGraph, GraphError> {
    let f = std::fs::File::open(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    RoadGraph::from_edges(segment_ids, &read_edge_csv(f)?)
}

/// Ring of segments where each one feeds its neighbours one step away
/// (weight 1) and two steps away (weight 0.5) in both directions.
pub fn ring_lattice_edges(ids: &[String]) -> Vec<EdgeRow> {
    let n = ids.len();
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        for (step, w) in [(1, 1.0), (2, 0.5)] {
            for j in [(i + step) % n, (i + n - step % n) % n] {
                if j != i {
                    let e = edges.entry((i, j)).or_insert(0.0);
                    *e = e.max(w);
                }
            }
        }
    }
    edges
        .into_iter()
        .map(|((i, j), weight)| EdgeRow {
            src_id: ids[i].clone(),
            dst_id: ids[j].clone(),
            weight,
        })
        .collect()
}
