use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Directed graph with per-edge influence probabilities.
///
/// Node identifiers are arbitrary non-negative integers; internally nodes
/// are indexed densely in first-appearance order of their sorted ids.
#[derive(Clone, Debug)]
pub struct Graph {
    node_ids: Vec<u64>,
    id_to_idx: HashMap<u64, usize>,
    /// Outgoing edges per node: (target index, probability).
    out_edges: Vec<Vec<(usize, f64)>>,
    edge_count: usize,
}

impl Graph {
    /// Build from `(u, v, p)` triples; `p = None` means the edge probability
    /// is assigned by the weighted-cascade rule `1 / indegree(v)`.
    pub fn from_edges(edges: &[(u64, u64, Option<f64>)]) -> Result<Self> {
        let mut ids: Vec<u64> = edges.iter().flat_map(|&(u, v, _)| [u, v]).collect();
        ids.sort_unstable();
        ids.dedup();
        let id_to_idx: HashMap<u64, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let n = ids.len();
        let mut indegree = vec![0usize; n];
        for &(_, v, _) in edges {
            indegree[id_to_idx[&v]] += 1;
        }
        let mut out_edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(u, v, p) in edges {
            let (ui, vi) = (id_to_idx[&u], id_to_idx[&v]);
            let prob = match p {
                Some(p) if (0.0..=1.0).contains(&p) => p,
                Some(p) => {
                    return Err(Error::Graph(format!(
                        "edge {u} -> {v} has probability {p} outside [0, 1]"
                    )))
                }
                None => 1.0 / indegree[vi] as f64,
            };
            out_edges[ui].push((vi, prob));
        }
        Ok(Self {
            node_ids: ids,
            id_to_idx,
            out_edges,
            edge_count: edges.len(),
        })
    }

    /// Load a plain-text edge list: one `u v [p]` per line, `#` comments.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse_node = |tok: Option<&str>| -> Result<u64> {
                tok.ok_or_else(|| Error::Graph(format!("line {}: missing node id", lineno + 1)))?
                    .parse::<u64>()
                    .map_err(|_| Error::Graph(format!("line {}: bad node id", lineno + 1)))
            };
            let u = parse_node(parts.next())?;
            let v = parse_node(parts.next())?;
            let p =
                match parts.next() {
                    Some(tok) => Some(tok.parse::<f64>().map_err(|_| {
                        Error::Graph(format!("line {}: bad probability", lineno + 1))
                    })?),
                    None => None,
                };
            edges.push((u, v, p));
        }
        Self::from_edges(&edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn node_ids(&self) -> &[u64] {
        &self.node_ids
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.id_to_idx.get(&id).copied()
    }

    pub fn out_edges(&self, node: usize) -> &[(usize, f64)] {
        &self.out_edges[node]
    }

    /// Edges in a fixed global order (source-major); the Monte Carlo
    /// evaluator draws one liveness threshold per edge in this order.
    pub fn edges_ordered(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (u, targets) in self.out_edges.iter().enumerate() {
            for &(v, p) in targets {
                out.push((u, v, p));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_weights() {
        let g = Graph::parse("# header\n0 1 0.5\n1 2\n0 2 # trailing\n").unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 3);
        let e01 = g.out_edges(0).iter().find(|(v, _)| *v == 1).unwrap();
        assert_eq!(e01.1, 0.5);
    }

    #[test]
    fn unweighted_edges_use_inverse_indegree() {
        // Node 2 has indegree 2, so both unweighted incoming edges get 0.5.
        let g = Graph::parse("0 2\n1 2\n").unwrap();
        assert_eq!(g.out_edges(0)[0], (2, 0.5));
        assert_eq!(g.out_edges(1)[0], (2, 0.5));
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(Graph::parse("0 1 1.5\n").is_err());
        assert!(Graph::parse("0 x\n").is_err());
    }
}
