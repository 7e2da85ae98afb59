//! Seed graphs: random graphs, the swap graph and edge-list files.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::model::{Handle, TxOp};

/// A graph to preload, as vertex handles plus `(edge, src, dst)` triples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedGraph {
    pub vertices: Vec<Handle>,
    pub edges: Vec<(Handle, Handle, Handle)>,
}

impl SeedGraph {
    pub fn ops(&self) -> Vec<TxOp> {
        self.vertices
            .iter()
            .map(|h| TxOp::CreateVertex { handle: h.clone() })
            .chain(self.edges.iter().map(|(e, s, d)| TxOp::CreateEdge {
                handle: e.clone(),
                src: s.clone(),
                dst: d.clone(),
            }))
            .collect()
    }
}

/// `n` vertices `v0..` with about `degree` out-edges each, no self loops.
pub fn random_graph<R: Rng>(n: usize, degree: usize, rng: &mut R) -> SeedGraph {
    let vertices: Vec<Handle> = (0..n).map(|i| format!("v{i}")).collect();
    let mut edges = Vec::new();
    if n > 1 {
        for (i, src) in vertices.iter().enumerate() {
            let k = rng.gen_range(0..=degree.saturating_mul(2));
            let mut seen = BTreeSet::new();
            for _ in 0..k {
                let j = rng.gen_range(0..n);
                if j != i && seen.insert(j) {
                    edges.push((format!("g{}", edges.len()), src.clone(), vertices[j].clone()));
                }
            }
        }
    }
    SeedGraph { vertices, edges }
}

/// Seven vertices `n1..n7` with the path n1 → n3 → n5. The swap
/// transaction moves between {n3→n5} and {n5→n7}, so n1 reaches n7 through
/// n3 and n5 only if a traversal mixes the two states.
pub fn swap_graph() -> SeedGraph {
    SeedGraph {
        vertices: (1..=7).map(|i| format!("n{i}")).collect(),
        edges: vec![
            ("a13".into(), "n1".into(), "n3".into()),
            ("a35".into(), "n3".into(), "n5".into()),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct EdgeListError {
    pub line: usize,
    pub msg: String,
}

/// Parses `src dst` lines. Blank lines and `#` comments are skipped,
/// vertices are created on first mention and every line gets its own edge
/// handle, so parallel edges stay distinct.
pub fn parse_edge_list(text: &str) -> Result<SeedGraph, EdgeListError> {
    let mut g = SeedGraph::default();
    let mut known = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [src, dst] = fields[..] else {
            return Err(EdgeListError {
                line: i + 1,
                msg: format!("expected `src dst`, found {} fields", fields.len()),
            });
        };
        for v in [src, dst] {
            if known.insert(v.to_string()) {
                g.vertices.push(v.to_string());
            }
        }
        g.edges
            .push((format!("l{}", g.edges.len()), src.to_string(), dst.to_string()));
    }
    Ok(g)
}
