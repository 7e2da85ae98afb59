//! Graph records and the write-operation semantics shared by the backing
//! store, the client's read-your-own-writes overlay and the reference
//! executor used by the checker.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::timestamp::VectorTimestamp;

pub type Handle = String;
pub type Props = BTreeMap<String, String>;
pub type ShardId = u16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub handle: Handle,
    pub dst: Handle,
    pub props: Props,
    pub created: Option<VectorTimestamp>,
    pub deleted: bool,
}

/// One stored vertex: its properties and all outgoing edges, plus the
/// timestamp of the last committed transaction that wrote it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexRecord {
    pub handle: Handle,
    pub shard: ShardId,
    pub deleted: bool,
    pub created: Option<VectorTimestamp>,
    pub last_update: Option<VectorTimestamp>,
    pub props: Props,
    pub edges: BTreeMap<Handle, EdgeRecord>,
}

impl VertexRecord {
    pub fn new(handle: &str, shard: ShardId, created: Option<VectorTimestamp>) -> Self {
        VertexRecord {
            handle: handle.to_owned(),
            shard,
            deleted: false,
            created: created.clone(),
            last_update: created,
            props: Props::new(),
            edges: BTreeMap::new(),
        }
    }

    /// The live state a transaction read observes; `None` once deleted.
    pub fn live_state(&self) -> Option<VertexState> {
        if self.deleted {
            return None;
        }
        Some(VertexState {
            props: self.props.clone(),
            edges: self
                .edges
                .values()
                .filter(|e| !e.deleted)
                .map(|e| {
                    (
                        e.handle.clone(),
                        EdgeState {
                            dst: e.dst.clone(),
                            props: e.props.clone(),
                        },
                    )
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeState {
    pub dst: Handle,
    pub props: Props,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VertexState {
    pub props: Props,
    pub edges: BTreeMap<Handle, EdgeState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Vertex(Handle),
    Edge { src: Handle, handle: Handle },
}

impl Target {
    pub fn owner(&self) -> &str {
        match self {
            Target::Vertex(h) => h,
            Target::Edge { src, .. } => src,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxOp {
    CreateVertex {
        handle: Handle,
    },
    DeleteVertex {
        handle: Handle,
    },
    CreateEdge {
        handle: Handle,
        src: Handle,
        dst: Handle,
    },
    DeleteEdge {
        handle: Handle,
        src: Handle,
    },
    SetProperty {
        target: Target,
        key: String,
        value: String,
    },
    DeleteProperty {
        target: Target,
        key: String,
    },
}

impl TxOp {
    /// The vertex whose record this operation writes.
    pub fn owner(&self) -> &str {
        match self {
            TxOp::CreateVertex { handle } | TxOp::DeleteVertex { handle } => handle,
            TxOp::CreateEdge { src, .. } | TxOp::DeleteEdge { src, .. } => src,
            TxOp::SetProperty { target, .. } | TxOp::DeleteProperty { target, .. } => {
                target.owner()
            }
        }
    }
}

/// Shard assignment for a new vertex: FNV-1a of the handle modulo the shard
/// count.
pub fn shard_for(handle: &str, shards: u16) -> ShardId {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in handle.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % shards.max(1) as u64) as ShardId
}

/// Applies `ops` in order over records supplied by `lookup`, returning the
/// new value of every record written. The first invalid operation aborts
/// the whole batch with a description of what was wrong.
pub fn apply_ops<F>(
    mut lookup: F,
    ops: &[TxOp],
    ts: Option<&VectorTimestamp>,
    shards: u16,
) -> Result<BTreeMap<Handle, VertexRecord>, String>
where
    F: FnMut(&str) -> Option<VertexRecord>,
{
    let mut overlay: BTreeMap<Handle, Option<VertexRecord>> = BTreeMap::new();
    let mut written: BTreeMap<Handle, VertexRecord> = BTreeMap::new();

    fn fetch<F: FnMut(&str) -> Option<VertexRecord>>(
        overlay: &mut BTreeMap<Handle, Option<VertexRecord>>,
        lookup: &mut F,
        h: &str,
    ) -> Option<VertexRecord> {
        overlay
            .entry(h.to_owned())
            .or_insert_with(|| lookup(h))
            .clone()
    }

    fn live<F: FnMut(&str) -> Option<VertexRecord>>(
        overlay: &mut BTreeMap<Handle, Option<VertexRecord>>,
        lookup: &mut F,
        h: &str,
    ) -> Result<VertexRecord, String> {
        match fetch(overlay, lookup, h) {
            Some(v) if !v.deleted => Ok(v),
            Some(_) => Err(format!("vertex {h} is deleted")),
            None => Err(format!("vertex {h} does not exist")),
        }
    }

    for op in ops {
        let updated = match op {
            TxOp::CreateVertex { handle } => {
                if fetch(&mut overlay, &mut lookup, handle).is_some() {
                    return Err(format!("vertex {handle} already exists"));
                }
                VertexRecord::new(handle, shard_for(handle, shards), ts.cloned())
            }
            TxOp::DeleteVertex { handle } => {
                let mut v = live(&mut overlay, &mut lookup, handle)?;
                v.deleted = true;
                v
            }
            TxOp::CreateEdge { handle, src, dst } => {
                live(&mut overlay, &mut lookup, dst)?;
                let mut v = live(&mut overlay, &mut lookup, src)?;
                if v.edges.contains_key(handle) {
                    return Err(format!("edge {handle} already exists on {src}"));
                }
                v.edges.insert(
                    handle.clone(),
                    EdgeRecord {
                        handle: handle.clone(),
                        dst: dst.clone(),
                        props: Props::new(),
                        created: ts.cloned(),
                        deleted: false,
                    },
                );
                v
            }
            TxOp::DeleteEdge { handle, src } => {
                let mut v = live(&mut overlay, &mut lookup, src)?;
                // Deleted edges leave the record; the shards keep the
                // versions that snapshots still need.
                match v.edges.get(handle) {
                    Some(e) if !e.deleted => {
                        v.edges.remove(handle);
                    }
                    _ => return Err(format!("edge {handle} on {src} is not live")),
                }
                v
            }
            TxOp::SetProperty { target, key, value } => {
                let mut v = live(&mut overlay, &mut lookup, target.owner())?;
                props_mut(&mut v, target)?.insert(key.clone(), value.clone());
                v
            }
            TxOp::DeleteProperty { target, key } => {
                let mut v = live(&mut overlay, &mut lookup, target.owner())?;
                props_mut(&mut v, target)?.remove(key);
                v
            }
        };
        let mut updated = updated;
        if ts.is_some() {
            updated.last_update = ts.cloned();
        }
        overlay.insert(updated.handle.clone(), Some(updated.clone()));
        written.insert(updated.handle.clone(), updated);
    }
    Ok(written)
}

fn props_mut<'a>(v: &'a mut VertexRecord, target: &Target) -> Result<&'a mut Props, String> {
    match target {
        Target::Vertex(_) => Ok(&mut v.props),
        Target::Edge { src, handle } => match v.edges.get_mut(handle) {
            Some(e) if !e.deleted => Ok(&mut e.props),
            _ => Err(format!("edge {handle} on {src} is not live")),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        base: &BTreeMap<Handle, VertexRecord>,
        ops: &[TxOp],
    ) -> Result<BTreeMap<Handle, VertexRecord>, String> {
        apply_ops(|h| base.get(h).cloned(), ops, None, 4)
    }

    fn cv(h: &str) -> TxOp {
        TxOp::CreateVertex { handle: h.into() }
    }

    #[test]
    fn create_then_edge_in_one_batch() {
        let base = BTreeMap::new();
        let out = run(
            &base,
            &[
                cv("a"),
                cv("b"),
                TxOp::CreateEdge {
                    handle: "e".into(),
                    src: "a".into(),
                    dst: "b".into(),
                },
            ],
        )
        .unwrap();
        assert_eq!(out["a"].edges["e"].dst, "b");
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn double_delete_is_invalid() {
        let mut base = BTreeMap::new();
        base.insert("n1".to_string(), VertexRecord::new("n1", 0, None));
        let after = run(&base, &[TxOp::DeleteVertex { handle: "n1".into() }]).unwrap();
        base.extend(after);
        assert!(run(&base, &[TxOp::DeleteVertex { handle: "n1".into() }]).is_err());
    }

    #[test]
    fn handles_are_never_reused() {
        let mut base = BTreeMap::new();
        let mut v = VertexRecord::new("n1", 0, None);
        v.deleted = true;
        base.insert("n1".to_string(), v);
        assert!(run(&base, &[cv("n1")]).is_err());
    }

    #[test]
    fn edge_to_missing_endpoint_is_invalid() {
        let mut base = BTreeMap::new();
        base.insert("a".to_string(), VertexRecord::new("a", 0, None));
        let op = TxOp::CreateEdge {
            handle: "e".into(),
            src: "a".into(),
            dst: "zz".into(),
        };
        assert!(run(&base, &[op]).is_err());
    }

    #[test]
    fn deleting_missing_property_is_a_noop() {
        let mut base = BTreeMap::new();
        base.insert("a".to_string(), VertexRecord::new("a", 0, None));
        let out = run(
            &base,
            &[TxOp::DeleteProperty {
                target: Target::Vertex("a".into()),
                key: "k".into(),
            }],
        )
        .unwrap();
        assert!(out["a"].props.is_empty());
    }

    #[test]
    fn shard_assignment_is_stable() {
        for i in 0..100 {
            let h = format!("v{i}");
            assert_eq!(shard_for(&h, 3), shard_for(&h, 3));
            assert!(shard_for(&h, 3) < 3);
        }
    }
}
