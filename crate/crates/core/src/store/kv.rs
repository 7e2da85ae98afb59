//! Durable key-value layer with optimistic transactions.
//!
//! Every key carries the commit index of the transaction that last wrote it
//! (0 for absent keys). A transaction records the version of everything it
//! reads; commit validates that none of those versions moved.

use std::collections::{BTreeMap, HashMap};
use std::io;

use thiserror::Error;

use super::wal::{self, LogDevice};
use crate::codec::{self, DecodeError, Reader};

pub type TxnId = u64;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("transaction {0} is not open")]
    UnknownTxn(TxnId),
    #[error("read of {key} is stale (saw version {seen}, now {current})")]
    Conflict { key: String, seen: u64, current: u64 },
    #[error("log device: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt snapshot: {0}")]
    Corrupt(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    version: u64,
    value: Vec<u8>,
}

#[derive(Debug, Default)]
struct Txn {
    reads: BTreeMap<String, u64>,
    writes: BTreeMap<String, Option<Vec<u8>>>,
}

pub struct KvStore {
    data: BTreeMap<String, Entry>,
    commit_index: u64,
    next_txn: TxnId,
    open: HashMap<TxnId, Txn>,
    device: Box<dyn LogDevice>,
    snapshot_every: u64,
    since_snapshot: u64,
}

impl std::fmt::Debug for KvStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KvStore")
            .field("keys", &self.data.len())
            .field("commit_index", &self.commit_index)
            .finish()
    }
}

fn encode_commit(index: u64, writes: &BTreeMap<String, Option<Vec<u8>>>) -> Vec<u8> {
    let mut buf = Vec::new();
    codec::put_u64(&mut buf, index);
    codec::put_u32(&mut buf, writes.len() as u32);
    for (k, v) in writes {
        codec::put_str(&mut buf, k);
        match v {
            Some(bytes) => {
                codec::put_bool(&mut buf, true);
                codec::put_bytes(&mut buf, bytes);
            }
            None => codec::put_bool(&mut buf, false),
        }
    }
    buf
}

type CommitRecord = (u64, Vec<(String, Option<Vec<u8>>)>);

fn decode_commit(payload: &[u8]) -> Result<CommitRecord, DecodeError> {
    let mut r = Reader::new(payload);
    let index = r.u64()?;
    let n = r.u32()?;
    let mut writes = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let key = r.string()?;
        let value = if r.bool()? {
            Some(r.bytes()?.to_vec())
        } else {
            None
        };
        writes.push((key, value));
    }
    r.finish()?;
    Ok((index, writes))
}

impl KvStore {
    /// Opens a store on `device`, loading the snapshot and replaying the
    /// intact prefix of the log.
    pub fn open(mut device: Box<dyn LogDevice>, snapshot_every: u64) -> Result<Self, KvError> {
        let mut data = BTreeMap::new();
        let mut commit_index = 0;
        if let Some(snap) = device.read_snapshot()? {
            let (records, _) = wal::unframe(&snap);
            if let Some(payload) = records.first() {
                let mut r = Reader::new(payload);
                commit_index = r.u64()?;
                let n = r.u32()?;
                for _ in 0..n {
                    let key = r.string()?;
                    let version = r.u64()?;
                    let value = r.bytes()?.to_vec();
                    data.insert(key, Entry { version, value });
                }
            }
        }
        let log = device.read_log()?;
        let (records, valid) = wal::unframe(&log);
        let mut replayed = 0;
        for payload in records {
            let (index, writes) = decode_commit(payload)?;
            if index <= commit_index {
                continue;
            }
            for (key, value) in writes {
                match value {
                    Some(value) => {
                        data.insert(
                            key,
                            Entry {
                                version: index,
                                value,
                            },
                        );
                    }
                    None => {
                        data.remove(&key);
                    }
                }
            }
            commit_index = index;
            replayed += 1;
        }
        if valid < log.len() {
            device.reset_log(&log[..valid])?;
        }
        Ok(KvStore {
            data,
            commit_index,
            next_txn: 1,
            open: HashMap::new(),
            device,
            snapshot_every,
            since_snapshot: replayed,
        })
    }

    pub fn in_memory() -> Self {
        KvStore::open(Box::new(wal::MemoryLog::new()), 0).expect("memory device")
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn get(&self, key: &str) -> Option<(&[u8], u64)> {
        self.data.get(key).map(|e| (e.value.as_slice(), e.version))
    }

    pub fn version(&self, key: &str) -> u64 {
        self.data.get(key).map_or(0, |e| e.version)
    }

    pub fn scan_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a [u8])> {
        self.data
            .range(prefix.to_owned()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, e)| (k.as_str(), e.value.as_slice()))
    }

    pub fn begin(&mut self) -> TxnId {
        let id = self.next_txn;
        self.next_txn += 1;
        self.open.insert(id, Txn::default());
        id
    }

    fn txn(&mut self, t: TxnId) -> Result<&mut Txn, KvError> {
        self.open.get_mut(&t).ok_or(KvError::UnknownTxn(t))
    }

    /// Reads `key` inside `t`. Buffered writes of `t` are visible to it.
    pub fn read(&mut self, t: TxnId, key: &str) -> Result<Option<(Vec<u8>, u64)>, KvError> {
        let current = self.data.get(key).cloned();
        let txn = self.txn(t)?;
        if let Some(w) = txn.writes.get(key) {
            return Ok(w.clone().map(|v| (v, 0)));
        }
        let version = current.as_ref().map_or(0, |e| e.version);
        txn.reads.entry(key.to_owned()).or_insert(version);
        Ok(current.map(|e| (e.value, e.version)))
    }

    /// Adds a read observed outside this store handle (for example by a
    /// client through a gatekeeper) to the validation set of `t`.
    pub fn note_read(&mut self, t: TxnId, key: &str, version: u64) -> Result<(), KvError> {
        self.txn(t)?.reads.insert(key.to_owned(), version);
        Ok(())
    }

    pub fn write(&mut self, t: TxnId, key: &str, value: Vec<u8>) -> Result<(), KvError> {
        self.txn(t)?.writes.insert(key.to_owned(), Some(value));
        Ok(())
    }

    pub fn delete(&mut self, t: TxnId, key: &str) -> Result<(), KvError> {
        self.txn(t)?.writes.insert(key.to_owned(), None);
        Ok(())
    }

    pub fn abort(&mut self, t: TxnId) {
        self.open.remove(&t);
    }

    /// Validates and applies `t`. Returns the commit index; read-only
    /// transactions do not advance it.
    pub fn commit(&mut self, t: TxnId) -> Result<u64, KvError> {
        let txn = self.open.remove(&t).ok_or(KvError::UnknownTxn(t))?;
        for (key, seen) in &txn.reads {
            let current = self.version(key);
            if current != *seen {
                return Err(KvError::Conflict {
                    key: key.clone(),
                    seen: *seen,
                    current,
                });
            }
        }
        if txn.writes.is_empty() {
            return Ok(self.commit_index);
        }
        let index = self.commit_index + 1;
        self.device
            .append(&wal::frame(&encode_commit(index, &txn.writes)))?;
        for (key, value) in txn.writes {
            match value {
                Some(value) => {
                    self.data.insert(
                        key,
                        Entry {
                            version: index,
                            value,
                        },
                    );
                }
                None => {
                    self.data.remove(&key);
                }
            }
        }
        self.commit_index = index;
        self.since_snapshot += 1;
        if self.snapshot_every > 0 && self.since_snapshot >= self.snapshot_every {
            self.snapshot()?;
        }
        Ok(index)
    }

    /// Writes a full snapshot and empties the log.
    pub fn snapshot(&mut self) -> Result<(), KvError> {
        let mut buf = Vec::new();
        codec::put_u64(&mut buf, self.commit_index);
        codec::put_u32(&mut buf, self.data.len() as u32);
        for (k, e) in &self.data {
            codec::put_str(&mut buf, k);
            codec::put_u64(&mut buf, e.version);
            codec::put_bytes(&mut buf, &e.value);
        }
        self.device.write_snapshot(&wal::frame(&buf))?;
        self.device.reset_log(&[])?;
        self.since_snapshot = 0;
        Ok(())
    }
}
