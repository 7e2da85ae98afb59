//! The multi-version in-memory graph held by a shard.
//!
//! Creates and deletes write timestamped versions and tombstones; nothing is
//! removed until garbage collection. Which versions a reader sees is decided
//! by a [`Snapshot`], so the same structure serves vector-clock snapshots in
//! tests and refined execution-order snapshots inside a shard.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::model::{Handle, Props, Target, TxOp, VertexRecord};
use crate::timestamp::{OrderRelation, VectorTimestamp};

/// Decides whether a write stamped `writer` is ordered at or before the
/// reader.
pub trait Snapshot {
    fn sees(&self, writer: &VectorTimestamp) -> bool;
}

/// Pure vector-clock snapshot at a timestamp: a writer is visible iff it
/// happens before or equals the reader.
#[derive(Debug, Clone, Copy)]
pub struct ClockSnapshot<'a>(pub &'a VectorTimestamp);

impl Snapshot for ClockSnapshot<'_> {
    fn sees(&self, writer: &VectorTimestamp) -> bool {
        matches!(
            writer.relation(self.0),
            OrderRelation::Before | OrderRelation::Equal
        )
    }
}

impl<F: Fn(&VectorTimestamp) -> bool> Snapshot for F {
    fn sees(&self, writer: &VectorTimestamp) -> bool {
        self(writer)
    }
}

fn visible(created: &VectorTimestamp, deleted: &Option<VectorTimestamp>, s: &dyn Snapshot) -> bool {
    s.sees(created) && deleted.as_ref().is_none_or(|d| !s.sees(d))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VersionedProperty {
    pub key: String,
    pub value: String,
    pub created: VectorTimestamp,
    pub deleted: Option<VectorTimestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiVersionEdge {
    pub handle: Handle,
    pub dst: Handle,
    pub created: VectorTimestamp,
    pub deleted: Option<VectorTimestamp>,
    pub properties: Vec<VersionedProperty>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiVersionVertex {
    pub handle: Handle,
    pub created: VectorTimestamp,
    pub deleted: Option<VectorTimestamp>,
    pub properties: Vec<VersionedProperty>,
    pub out_edges: BTreeMap<Handle, MultiVersionEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeView {
    pub handle: Handle,
    pub dst: Handle,
    pub props: Props,
}

/// A vertex as seen at one snapshot. Edges are sorted by handle.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VertexView {
    pub handle: Handle,
    pub props: Props,
    pub edges: Vec<EdgeView>,
}

fn visible_props(versions: &[VersionedProperty], s: &dyn Snapshot) -> Props {
    let mut out = Props::new();
    for v in versions.iter().rev() {
        if !out.contains_key(&v.key) && visible(&v.created, &v.deleted, s) {
            out.insert(v.key.clone(), v.value.clone());
        }
    }
    out
}

fn set_prop(versions: &mut Vec<VersionedProperty>, key: &str, value: &str, ts: &VectorTimestamp) {
    if versions.iter().any(|v| v.key == key && &v.created == ts) {
        return;
    }
    for v in versions.iter_mut() {
        if v.key == key && v.deleted.is_none() {
            v.deleted = Some(ts.clone());
        }
    }
    versions.push(VersionedProperty {
        key: key.to_owned(),
        value: value.to_owned(),
        created: ts.clone(),
        deleted: None,
    });
}

fn delete_prop(versions: &mut [VersionedProperty], key: &str, ts: &VectorTimestamp) {
    for v in versions.iter_mut() {
        if v.key == key && v.deleted.is_none() {
            v.deleted = Some(ts.clone());
        }
    }
}

fn gc_props(versions: &mut Vec<VersionedProperty>, dead: &dyn Fn(&VectorTimestamp) -> bool) -> usize {
    let before = versions.len();
    versions.retain(|v| !v.deleted.as_ref().is_some_and(dead));
    before - versions.len()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiVersionGraph {
    vertices: BTreeMap<Handle, MultiVersionVertex>,
}

impl MultiVersionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertex(&self, h: &str) -> Option<&MultiVersionVertex> {
        self.vertices.get(h)
    }

    pub fn handles(&self) -> impl Iterator<Item = &Handle> {
        self.vertices.keys()
    }

    /// Applies one committed write at `ts`. Re-applying the same write is a
    /// no-op. Validity was established by the backing store, so operations on
    /// unknown elements are ignored.
    pub fn apply(&mut self, op: &TxOp, ts: &VectorTimestamp) {
        match op {
            TxOp::CreateVertex { handle } => {
                self.vertices
                    .entry(handle.clone())
                    .or_insert_with(|| MultiVersionVertex {
                        handle: handle.clone(),
                        created: ts.clone(),
                        deleted: None,
                        properties: Vec::new(),
                        out_edges: BTreeMap::new(),
                    });
            }
            TxOp::DeleteVertex { handle } => {
                if let Some(v) = self.vertices.get_mut(handle) {
                    v.deleted.get_or_insert_with(|| ts.clone());
                }
            }
            TxOp::CreateEdge { handle, src, dst } => {
                if let Some(v) = self.vertices.get_mut(src) {
                    v.out_edges
                        .entry(handle.clone())
                        .or_insert_with(|| MultiVersionEdge {
                            handle: handle.clone(),
                            dst: dst.clone(),
                            created: ts.clone(),
                            deleted: None,
                            properties: Vec::new(),
                        });
                }
            }
            TxOp::DeleteEdge { handle, src } => {
                if let Some(e) = self
                    .vertices
                    .get_mut(src)
                    .and_then(|v| v.out_edges.get_mut(handle))
                {
                    e.deleted.get_or_insert_with(|| ts.clone());
                }
            }
            TxOp::SetProperty { target, key, value } => {
                if let Some(props) = self.props_mut(target) {
                    set_prop(props, key, value, ts);
                }
            }
            TxOp::DeleteProperty { target, key } => {
                if let Some(props) = self.props_mut(target) {
                    delete_prop(props, key, ts);
                }
            }
        }
    }

    fn props_mut(&mut self, target: &Target) -> Option<&mut Vec<VersionedProperty>> {
        match target {
            Target::Vertex(h) => self.vertices.get_mut(h).map(|v| &mut v.properties),
            Target::Edge { src, handle } => self
                .vertices
                .get_mut(src)
                .and_then(|v| v.out_edges.get_mut(handle))
                .map(|e| &mut e.properties),
        }
    }

    pub fn view(&self, h: &str, s: &dyn Snapshot) -> Option<VertexView> {
        let v = self.vertices.get(h)?;
        if !visible(&v.created, &v.deleted, s) {
            return None;
        }
        let edges = v
            .out_edges
            .values()
            .filter(|e| visible(&e.created, &e.deleted, s))
            .map(|e| EdgeView {
                handle: e.handle.clone(),
                dst: e.dst.clone(),
                props: visible_props(&e.properties, s),
            })
            .collect();
        Some(VertexView {
            handle: v.handle.clone(),
            props: visible_props(&v.properties, s),
            edges,
        })
    }

    /// Physically removes every version whose deletion satisfies `dead`.
    pub fn gc(&mut self, dead: &dyn Fn(&VectorTimestamp) -> bool) -> usize {
        let mut reclaimed = 0;
        let doomed: Vec<Handle> = self
            .vertices
            .values()
            .filter(|v| v.deleted.as_ref().is_some_and(dead))
            .map(|v| v.handle.clone())
            .collect();
        for h in doomed {
            if let Some(v) = self.vertices.remove(&h) {
                reclaimed += 1 + v.out_edges.len() + v.properties.len();
            }
        }
        for v in self.vertices.values_mut() {
            reclaimed += gc_props(&mut v.properties, dead);
            let before = v.out_edges.len();
            v.out_edges.retain(|_, e| !e.deleted.as_ref().is_some_and(dead));
            reclaimed += before - v.out_edges.len();
            for e in v.out_edges.values_mut() {
                reclaimed += gc_props(&mut e.properties, dead);
            }
        }
        reclaimed
    }

    /// Rebuilds state from backing-store records. Versions take the record's
    /// own timestamps, or `base` when a record has none. Deleted elements are
    /// not restored.
    pub fn restore(records: &[VertexRecord], base: &VectorTimestamp) -> Self {
        let mut g = MultiVersionGraph::new();
        for rec in records.iter().filter(|r| !r.deleted) {
            let created = rec.created.clone().unwrap_or_else(|| base.clone());
            let stamp = rec.last_update.clone().unwrap_or_else(|| created.clone());
            let props = |p: &Props, at: &VectorTimestamp| {
                p.iter()
                    .map(|(k, v)| VersionedProperty {
                        key: k.clone(),
                        value: v.clone(),
                        created: at.clone(),
                        deleted: None,
                    })
                    .collect::<Vec<_>>()
            };
            let out_edges = rec
                .edges
                .values()
                .filter(|e| !e.deleted)
                .map(|e| {
                    (
                        e.handle.clone(),
                        MultiVersionEdge {
                            handle: e.handle.clone(),
                            dst: e.dst.clone(),
                            created: e.created.clone().unwrap_or_else(|| base.clone()),
                            deleted: None,
                            properties: props(&e.props, &stamp),
                        },
                    )
                })
                .collect();
            g.vertices.insert(
                rec.handle.clone(),
                MultiVersionVertex {
                    handle: rec.handle.clone(),
                    created,
                    deleted: None,
                    properties: props(&rec.props, &stamp),
                    out_edges,
                },
            );
        }
        g
    }

    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.vertices.values() {
            v.hash(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(issuer: u16, c: &[u64]) -> VectorTimestamp {
        VectorTimestamp::new(0, issuer, c.to_vec())
    }

    fn cv(h: &str) -> TxOp {
        TxOp::CreateVertex { handle: h.into() }
    }

    fn edge(h: &str, s: &str, d: &str) -> TxOp {
        TxOp::CreateEdge {
            handle: h.into(),
            src: s.into(),
            dst: d.into(),
        }
    }

    #[test]
    fn edge_visible_within_its_lifetime() {
        let mut g = MultiVersionGraph::new();
        let t0 = ts(0, &[1]);
        let t1 = ts(0, &[2]);
        let t2 = ts(0, &[4]);
        g.apply(&cv("n3"), &t0);
        g.apply(&cv("n5"), &t0);
        g.apply(&edge("e", "n3", "n5"), &t1);
        g.apply(
            &TxOp::DeleteEdge {
                handle: "e".into(),
                src: "n3".into(),
            },
            &t2,
        );
        let at = |c: u64| g.view("n3", &ClockSnapshot(&ts(0, &[c]))).unwrap().edges.len();
        assert_eq!(at(1), 0);
        assert_eq!(at(2), 1);
        assert_eq!(at(3), 1);
        assert_eq!(at(4), 0);
    }

    #[test]
    fn property_versions() {
        let mut g = MultiVersionGraph::new();
        g.apply(&cv("v"), &ts(0, &[1]));
        let set = |val: &str| TxOp::SetProperty {
            target: Target::Vertex("v".into()),
            key: "k".into(),
            value: val.into(),
        };
        g.apply(&set("old"), &ts(0, &[2]));
        g.apply(&set("new"), &ts(0, &[3]));
        let read = |c: u64| {
            g.view("v", &ClockSnapshot(&ts(0, &[c])))
                .unwrap()
                .props
                .get("k")
                .cloned()
        };
        assert_eq!(read(1), None);
        assert_eq!(read(2).as_deref(), Some("old"));
        assert_eq!(read(5).as_deref(), Some("new"));
    }

    #[test]
    fn reapplying_is_idempotent() {
        let ops = vec![
            cv("a"),
            cv("b"),
            edge("e", "a", "b"),
            TxOp::SetProperty {
                target: Target::Edge {
                    src: "a".into(),
                    handle: "e".into(),
                },
                key: "w".into(),
                value: "1".into(),
            },
        ];
        let t = ts(0, &[1]);
        let mut g = MultiVersionGraph::new();
        for op in &ops {
            g.apply(op, &t);
        }
        let once = g.state_hash();
        for op in &ops {
            g.apply(op, &t);
        }
        assert_eq!(g.state_hash(), once);
    }

    #[test]
    fn gc_keeps_reads_at_threshold() {
        let mut g = MultiVersionGraph::new();
        g.apply(&cv("a"), &ts(0, &[1]));
        g.apply(&cv("b"), &ts(0, &[1]));
        g.apply(&edge("e1", "a", "b"), &ts(0, &[2]));
        g.apply(&edge("e2", "a", "b"), &ts(0, &[2]));
        g.apply(
            &TxOp::DeleteEdge {
                handle: "e1".into(),
                src: "a".into(),
            },
            &ts(0, &[3]),
        );
        let threshold = ts(0, &[5]);
        let before = g.view("a", &ClockSnapshot(&threshold));
        assert_eq!(g.gc(&|d: &VectorTimestamp| d.happens_before(&threshold)), 1);
        assert_eq!(g.view("a", &ClockSnapshot(&threshold)), before);
    }

    #[test]
    fn nothing_to_collect_without_deletes() {
        let mut g = MultiVersionGraph::new();
        g.apply(&cv("a"), &ts(0, &[1]));
        assert_eq!(g.gc(&|_: &VectorTimestamp| true), 0);
    }
}
