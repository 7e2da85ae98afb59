//! Service interfaces gatekeepers and shards use to reach the backing store
//! and the timeline oracle, with in-process implementations.
//!
//! Both services are linearizable: the local implementations serialize
//! callers behind a mutex; the remote ones in [`crate::runtime::tcp`] forward
//! each call over one connection.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

use crate::messages::NodeId;
use crate::model::{Handle, ShardId, TxOp, VertexRecord};
use crate::oracle::{EventInfo, OracleError, OracleStats, OrderPreference, TimelineOracle};
use crate::store::{BackingStore, CommitResult, StoreAbort, StoreError};
use crate::timestamp::{Epoch, OrderRelation, VectorTimestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("service unreachable: {0}")]
    Unreachable(String),
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error("store: {0}")]
    Store(String),
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        ServiceError::Store(e.to_string())
    }
}

pub trait StoreService: Send + Sync {
    fn execute(
        &self,
        ops: &[TxOp],
        reads: &[(Handle, u64)],
        ts: &VectorTimestamp,
    ) -> Result<Result<CommitResult, StoreAbort>, ServiceError>;
    fn get_vertex(&self, h: &str) -> Result<(Option<VertexRecord>, u64), ServiceError>;
    fn get_shard(&self, h: &str) -> Result<Option<ShardId>, ServiceError>;
    fn restore_shard(&self, shard: ShardId) -> Result<Vec<VertexRecord>, ServiceError>;
    fn commit_index(&self) -> Result<u64, ServiceError>;
}

pub trait OracleService: Send + Sync {
    fn create_event(&self, id: &VectorTimestamp, info: EventInfo) -> Result<(), ServiceError>;
    fn order_or_assign(
        &self,
        pairs: &[(VectorTimestamp, VectorTimestamp)],
        pref: OrderPreference,
    ) -> Result<Vec<OrderRelation>, ServiceError>;
    /// Reports the oldest timestamp `reporter` may still ask about. Once
    /// every participant has reported for an epoch the oracle collects
    /// events below the pointwise minimum.
    fn report_watermark(
        &self,
        reporter: NodeId,
        epoch: Epoch,
        watermark: &VectorTimestamp,
    ) -> Result<(), ServiceError>;
}

#[derive(Debug, Clone)]
pub struct LocalStore {
    inner: Arc<Mutex<BackingStore>>,
}

impl LocalStore {
    pub fn new(store: BackingStore) -> Self {
        LocalStore {
            inner: Arc::new(Mutex::new(store)),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, BackingStore> {
        self.inner.lock().expect("store mutex")
    }
}

impl StoreService for LocalStore {
    fn execute(
        &self,
        ops: &[TxOp],
        reads: &[(Handle, u64)],
        ts: &VectorTimestamp,
    ) -> Result<Result<CommitResult, StoreAbort>, ServiceError> {
        Ok(self.lock().execute(ops, reads, ts))
    }

    fn get_vertex(&self, h: &str) -> Result<(Option<VertexRecord>, u64), ServiceError> {
        Ok(self.lock().get_vertex(h)?)
    }

    fn get_shard(&self, h: &str) -> Result<Option<ShardId>, ServiceError> {
        match self.lock().get_shard(h) {
            Ok(s) => Ok(Some(s)),
            Err(StoreError::NotFound(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn restore_shard(&self, shard: ShardId) -> Result<Vec<VertexRecord>, ServiceError> {
        Ok(self.lock().restore_shard(shard)?)
    }

    fn commit_index(&self) -> Result<u64, ServiceError> {
        Ok(self.lock().commit_index())
    }
}

/// The oracle state machine plus watermark aggregation for collection.
#[derive(Debug)]
pub struct OracleHost {
    pub oracle: TimelineOracle,
    participants: usize,
    epoch: Epoch,
    watermarks: BTreeMap<NodeId, VectorTimestamp>,
    gc_enabled: bool,
}

impl OracleHost {
    pub fn new(oracle: TimelineOracle, participants: usize, gc_enabled: bool) -> Self {
        OracleHost {
            oracle,
            participants,
            epoch: 0,
            watermarks: BTreeMap::new(),
            gc_enabled,
        }
    }

    pub fn report(&mut self, reporter: NodeId, epoch: Epoch, wm: &VectorTimestamp) {
        if !self.gc_enabled || epoch < self.epoch {
            return;
        }
        if epoch > self.epoch {
            self.epoch = epoch;
            self.watermarks.clear();
            // Everything from earlier epochs precedes the new epoch.
            let floor = VectorTimestamp::zero(epoch, 0, wm.len());
            self.oracle.gc_events(&floor);
        }
        self.watermarks.insert(reporter, wm.clone());
        if self.watermarks.len() >= self.participants {
            let mut iter = self.watermarks.values();
            let first = iter.next().expect("non-empty").clone();
            let threshold = iter.fold(first, |acc, w| acc.pointwise_min(w));
            self.oracle.gc_events(&threshold);
            self.watermarks.clear();
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalOracle {
    inner: Arc<Mutex<OracleHost>>,
}

impl LocalOracle {
    pub fn new(host: OracleHost) -> Self {
        LocalOracle {
            inner: Arc::new(Mutex::new(host)),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, OracleHost> {
        self.inner.lock().expect("oracle mutex")
    }

    pub fn stats(&self) -> OracleStats {
        self.lock().oracle.stats()
    }
}

impl OracleService for LocalOracle {
    fn create_event(&self, id: &VectorTimestamp, info: EventInfo) -> Result<(), ServiceError> {
        self.lock().oracle.create_event_with(id.clone(), info);
        Ok(())
    }

    fn order_or_assign(
        &self,
        pairs: &[(VectorTimestamp, VectorTimestamp)],
        pref: OrderPreference,
    ) -> Result<Vec<OrderRelation>, ServiceError> {
        Ok(self.lock().oracle.order_or_assign(pairs, pref)?)
    }

    fn report_watermark(
        &self,
        reporter: NodeId,
        epoch: Epoch,
        watermark: &VectorTimestamp,
    ) -> Result<(), ServiceError> {
        self.lock().report(reporter, epoch, watermark);
        Ok(())
    }
}
