//! The backing store: authoritative graph records, the vertex→shard mapping
//! and per-vertex last-update timestamps, on top of the durable key-value
//! layer.
//!
//! Keys are `v/<handle>` for vertex records and `m/<handle>` for the shard
//! mapping. Conflict detection is per vertex.

pub mod kv;
pub mod wal;

use std::collections::BTreeMap;

use thiserror::Error;

pub use kv::{KvError, KvStore, TxnId};
pub use wal::{FileLog, LogDevice, MemoryLog};

use crate::model::{apply_ops, Handle, ShardId, TxOp, VertexRecord};
use crate::timestamp::VectorTimestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreAbort {
    #[error("conflict on {0}")]
    Conflict(Handle),
    #[error("invalid operation: {0}")]
    InvalidOperation(String),
    #[error("timestamp does not follow last update {last_update} of {handle}")]
    StaleTimestamp {
        handle: Handle,
        last_update: VectorTimestamp,
    },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("vertex {0} not found")]
    NotFound(Handle),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("corrupt record for {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitResult {
    pub index: u64,
    /// Operations grouped by the shard owning the vertex they write, in
    /// submission order.
    pub shard_ops: BTreeMap<ShardId, Vec<TxOp>>,
    pub touched: Vec<Handle>,
}

fn vkey(h: &str) -> String {
    format!("v/{h}")
}

fn mkey(h: &str) -> String {
    format!("m/{h}")
}

fn decode_record(key: &str, bytes: &[u8]) -> Result<VertexRecord, StoreError> {
    serde_json::from_slice(bytes).map_err(|_| StoreError::Corrupt(key.to_owned()))
}

fn encode_record(v: &VertexRecord) -> Vec<u8> {
    serde_json::to_vec(v).expect("vertex records serialize")
}

#[derive(Debug)]
pub struct BackingStore {
    kv: KvStore,
    shards: u16,
}

impl BackingStore {
    pub fn open(
        device: Box<dyn LogDevice>,
        shards: u16,
        snapshot_every: u64,
    ) -> Result<Self, StoreError> {
        Ok(BackingStore {
            kv: KvStore::open(device, snapshot_every)?,
            shards,
        })
    }

    pub fn in_memory(shards: u16) -> Self {
        BackingStore {
            kv: KvStore::in_memory(),
            shards,
        }
    }

    pub fn shard_count(&self) -> u16 {
        self.shards
    }

    pub fn commit_index(&self) -> u64 {
        self.kv.commit_index()
    }

    pub fn kv(&mut self) -> &mut KvStore {
        &mut self.kv
    }

    /// Latest committed record and its version (0 when absent).
    pub fn get_vertex(&self, h: &str) -> Result<(Option<VertexRecord>, u64), StoreError> {
        let key = vkey(h);
        match self.kv.get(&key) {
            Some((bytes, version)) => Ok((Some(decode_record(&key, bytes)?), version)),
            None => Ok((None, 0)),
        }
    }

    pub fn get_shard(&self, h: &str) -> Result<ShardId, StoreError> {
        let key = mkey(h);
        let (bytes, _) = self
            .kv
            .get(&key)
            .ok_or_else(|| StoreError::NotFound(h.to_owned()))?;
        std::str::from_utf8(bytes)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(StoreError::Corrupt(key))
    }

    pub fn set_shard(&mut self, h: &str, shard: ShardId) -> Result<(), StoreError> {
        let t = self.kv.begin();
        if let Some((bytes, _)) = self.kv.read(t, &vkey(h))? {
            let mut rec = decode_record(h, &bytes)?;
            rec.shard = shard;
            self.kv.write(t, &vkey(h), encode_record(&rec))?;
        }
        self.kv.write(t, &mkey(h), shard.to_string().into_bytes())?;
        self.kv.commit(t)?;
        Ok(())
    }

    /// Every vertex mapped to `shard`, tombstoned ones included.
    pub fn restore_shard(&self, shard: ShardId) -> Result<Vec<VertexRecord>, StoreError> {
        let mut out = Vec::new();
        for (key, bytes) in self.kv.scan_prefix("v/") {
            let rec = decode_record(key, bytes)?;
            if rec.shard == shard {
                out.push(rec);
            }
        }
        Ok(out)
    }

    pub fn all_vertices(&self) -> Result<Vec<VertexRecord>, StoreError> {
        self.kv
            .scan_prefix("v/")
            .map(|(k, b)| decode_record(k, b))
            .collect()
    }

    /// Runs a client batch as one store transaction.
    ///
    /// Checks, in order: the client's read set is unchanged (`Conflict`),
    /// every operation is valid against current state (`InvalidOperation`),
    /// and every written vertex was last updated by a transaction that
    /// happens before `ts` (`StaleTimestamp`).
    pub fn execute(
        &mut self,
        ops: &[TxOp],
        reads: &[(Handle, u64)],
        ts: &VectorTimestamp,
    ) -> Result<CommitResult, StoreAbort> {
        for (h, version) in reads {
            if self.kv.version(&vkey(h)) != *version {
                return Err(StoreAbort::Conflict(h.clone()));
            }
        }
        let mut pre: BTreeMap<Handle, Option<VertexRecord>> = BTreeMap::new();
        let written = {
            let kv = &self.kv;
            apply_ops(
                |h| {
                    let rec = kv
                        .get(&vkey(h))
                        .and_then(|(b, _)| serde_json::from_slice::<VertexRecord>(b).ok());
                    pre.insert(h.to_owned(), rec.clone());
                    rec
                },
                ops,
                Some(ts),
                self.shards,
            )
            .map_err(StoreAbort::InvalidOperation)?
        };
        for h in written.keys() {
            if let Some(Some(old)) = pre.get(h) {
                if let Some(last) = &old.last_update {
                    if !last.happens_before(ts) {
                        return Err(StoreAbort::StaleTimestamp {
                            handle: h.clone(),
                            last_update: last.clone(),
                        });
                    }
                }
            }
        }
        let t = self.kv.begin();
        for (h, rec) in &written {
            let fresh = matches!(pre.get(h), Some(None) | None);
            self.kv
                .write(t, &vkey(h), encode_record(rec))
                .expect("open transaction");
            if fresh {
                self.kv
                    .write(t, &mkey(h), rec.shard.to_string().into_bytes())
                    .expect("open transaction");
            }
        }
        let index = self
            .kv
            .commit(t)
            .map_err(|e| StoreAbort::InvalidOperation(format!("store failure: {e}")))?;
        let mut shard_ops: BTreeMap<ShardId, Vec<TxOp>> = BTreeMap::new();
        for op in ops {
            let shard = written[op.owner()].shard;
            shard_ops.entry(shard).or_default().push(op.clone());
        }
        Ok(CommitResult {
            index,
            shard_ops,
            touched: written.keys().cloned().collect(),
        })
    }

    pub fn txn_begin(&mut self) -> TxnId {
        self.kv.begin()
    }

    pub fn txn_read(&mut self, t: TxnId, key: &str) -> Result<Option<(Vec<u8>, u64)>, KvError> {
        self.kv.read(t, key)
    }

    pub fn txn_write(&mut self, t: TxnId, key: &str, value: Vec<u8>) -> Result<(), KvError> {
        self.kv.write(t, key, value)
    }

    pub fn txn_commit(&mut self, t: TxnId) -> Result<u64, KvError> {
        self.kv.commit(t)
    }
}
