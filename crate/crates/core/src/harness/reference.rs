//! Single-threaded reference graph: the serial semantics every distributed
//! result is compared against.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::graph::{EdgeView, VertexView};
use crate::messages::ProgramFailure;
use crate::model::{apply_ops, Handle, TxOp, VertexRecord, VertexState};
use crate::program::{run_local, Params, ProgramRegistry};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceGraph {
    records: BTreeMap<Handle, VertexRecord>,
    /// XOR of per-record hashes, maintained incrementally.
    hash: u64,
}

fn record_hash(r: &VertexRecord) -> u64 {
    let mut h = DefaultHasher::new();
    r.handle.hash(&mut h);
    r.deleted.hash(&mut h);
    r.props.hash(&mut h);
    for e in r.edges.values() {
        (&e.handle, &e.dst, &e.props, e.deleted).hash(&mut h);
    }
    h.finish()
}

pub fn view_of(r: &VertexRecord) -> Option<VertexView> {
    if r.deleted {
        return None;
    }
    Some(VertexView {
        handle: r.handle.clone(),
        props: r.props.clone(),
        edges: r
            .edges
            .values()
            .filter(|e| !e.deleted)
            .map(|e| EdgeView {
                handle: e.handle.clone(),
                dst: e.dst.clone(),
                props: e.props.clone(),
            })
            .collect(),
    })
}

impl ReferenceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = VertexRecord>) -> Self {
        let mut g = ReferenceGraph::new();
        for r in records {
            g.put(r);
        }
        g
    }

    pub fn state_hash(&self) -> u64 {
        self.hash
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, h: &str) -> Option<&VertexRecord> {
        self.records.get(h)
    }

    pub fn records(&self) -> impl Iterator<Item = &VertexRecord> {
        self.records.values()
    }

    /// Live handles in order.
    pub fn live(&self) -> impl Iterator<Item = &Handle> {
        self.records.values().filter(|r| !r.deleted).map(|r| &r.handle)
    }

    pub fn read(&self, h: &str) -> Option<VertexState> {
        self.records.get(h).and_then(VertexRecord::live_state)
    }

    pub fn view(&self, h: &str) -> Option<VertexView> {
        self.records.get(h).and_then(view_of)
    }

    /// Replaces `h`'s record, returning the previous one.
    pub fn put(&mut self, r: VertexRecord) -> Option<VertexRecord> {
        self.hash ^= record_hash(&r);
        let old = self.records.insert(r.handle.clone(), r);
        if let Some(o) = &old {
            self.hash ^= record_hash(o);
        }
        old
    }

    pub fn remove(&mut self, h: &str) -> Option<VertexRecord> {
        let old = self.records.remove(h);
        if let Some(o) = &old {
            self.hash ^= record_hash(o);
        }
        old
    }

    /// Applies `ops` atomically. On success returns what is needed to undo
    /// the change with [`ReferenceGraph::undo`].
    pub fn apply(&mut self, ops: &[TxOp]) -> Result<Vec<(Handle, Option<VertexRecord>)>, String> {
        let written = apply_ops(|h| self.records.get(h).cloned(), ops, None, 1)?;
        let mut undo = Vec::with_capacity(written.len());
        for (h, rec) in written {
            let old = self.put(rec);
            undo.push((h, old));
        }
        Ok(undo)
    }

    pub fn undo(&mut self, undo: Vec<(Handle, Option<VertexRecord>)>) {
        for (h, old) in undo.into_iter().rev() {
            match old {
                Some(r) => {
                    self.put(r);
                }
                None => {
                    self.remove(&h);
                }
            }
        }
    }

    pub fn run_program(
        &self,
        registry: &ProgramRegistry,
        name: &str,
        starts: &[Handle],
        params: &Params,
    ) -> Result<Params, ProgramFailure> {
        let program = registry.get(name)?;
        Ok(run_local(program.as_ref(), starts, params, |h| self.view(h))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(h: &str) -> TxOp {
        TxOp::CreateVertex { handle: h.into() }
    }

    #[test]
    fn undo_restores_state_and_hash() {
        let mut g = ReferenceGraph::new();
        g.apply(&[cv("a"), cv("b")]).unwrap();
        let before = (g.clone(), g.state_hash());
        let undo = g
            .apply(&[
                TxOp::CreateEdge {
                    handle: "e".into(),
                    src: "a".into(),
                    dst: "b".into(),
                },
                cv("c"),
            ])
            .unwrap();
        assert_ne!(g.state_hash(), before.1);
        g.undo(undo);
        assert_eq!((g.clone(), g.state_hash()), before);
    }

    #[test]
    fn invalid_batch_changes_nothing() {
        let mut g = ReferenceGraph::new();
        g.apply(&[cv("a")]).unwrap();
        let h = g.state_hash();
        assert!(g.apply(&[cv("b"), cv("a")]).is_err());
        assert_eq!(g.state_hash(), h);
        assert!(g.read("b").is_none());
    }

    #[test]
    fn hash_is_order_independent() {
        let mut x = ReferenceGraph::new();
        x.apply(&[cv("a")]).unwrap();
        x.apply(&[cv("b")]).unwrap();
        let mut y = ReferenceGraph::new();
        y.apply(&[cv("b")]).unwrap();
        y.apply(&[cv("a")]).unwrap();
        assert_eq!(x.state_hash(), y.state_hash());
    }

    #[test]
    fn deleted_vertex_invisible_to_programs() {
        let mut g = ReferenceGraph::new();
        g.apply(&[cv("a")]).unwrap();
        g.apply(&[TxOp::DeleteVertex { handle: "a".into() }]).unwrap();
        let r = g.run_program(&ProgramRegistry::with_stock(), "get_node", &["a".into()], &Params::new());
        assert_eq!(r, Err(ProgramFailure::NotFound("a".into())));
    }
}
