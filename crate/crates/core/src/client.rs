//! Client library: interactive transactions with buffered writes, and
//! node-program submission.
//!
//! [`TxSession`] holds the transaction logic and does no I/O, so it can be
//! driven by a blocking [`Client`] or by a simulated client actor. Reads go
//! to a gatekeeper and are recorded for validation; writes stay local until
//! commit. Reads see the transaction's own buffered writes.

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::messages::{AbortReason, CommitOutcome, Message, NodeId, ProgramFailure};
use crate::model::{apply_ops, EdgeState, Handle, Target, TxOp, VertexRecord, VertexState};
use crate::program::Params;
use crate::timestamp::VectorTimestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("no open transaction")]
    NoTransaction,
    #[error("a transaction is already open")]
    TransactionOpen,
    #[error("invalid operation: {0}")]
    InvalidOperation(String),
    #[error("program failed: {0:?}")]
    Program(ProgramFailure),
    #[error("transport: {0}")]
    Transport(String),
    #[error("gatekeeper unavailable")]
    Unavailable,
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

#[derive(Debug, Default, Clone)]
struct OpenTx {
    ops: Vec<TxOp>,
    reads: BTreeMap<Handle, u64>,
    fetched: BTreeMap<Handle, Option<VertexRecord>>,
}

/// One client's transaction state.
#[derive(Debug, Default, Clone)]
pub struct TxSession {
    open: Option<OpenTx>,
}

impl TxSession {
    pub fn new() -> Self {
        TxSession::default()
    }

    pub fn is_open(&self) -> bool {
        self.open.is_some()
    }

    pub fn begin(&mut self) -> Result<(), ClientError> {
        if self.open.is_some() {
            return Err(ClientError::TransactionOpen);
        }
        self.open = Some(OpenTx::default());
        Ok(())
    }

    fn tx(&mut self) -> Result<&mut OpenTx, ClientError> {
        self.open.as_mut().ok_or(ClientError::NoTransaction)
    }

    pub fn buffered(&self) -> &[TxOp] {
        self.open.as_ref().map_or(&[], |t| &t.ops)
    }

    pub fn write(&mut self, op: TxOp) -> Result<(), ClientError> {
        self.tx()?.ops.push(op);
        Ok(())
    }

    pub fn create_vertex(&mut self, h: &str) -> Result<(), ClientError> {
        self.write(TxOp::CreateVertex { handle: h.into() })
    }

    pub fn delete_vertex(&mut self, h: &str) -> Result<(), ClientError> {
        self.write(TxOp::DeleteVertex { handle: h.into() })
    }

    pub fn create_edge(&mut self, h: &str, src: &str, dst: &str) -> Result<(), ClientError> {
        self.write(TxOp::CreateEdge {
            handle: h.into(),
            src: src.into(),
            dst: dst.into(),
        })
    }

    pub fn delete_edge(&mut self, h: &str, src: &str) -> Result<(), ClientError> {
        self.write(TxOp::DeleteEdge {
            handle: h.into(),
            src: src.into(),
        })
    }

    pub fn set_property(&mut self, target: Target, key: &str, value: &str) -> Result<(), ClientError> {
        self.write(TxOp::SetProperty {
            target,
            key: key.into(),
            value: value.into(),
        })
    }

    pub fn delete_property(&mut self, target: Target, key: &str) -> Result<(), ClientError> {
        self.write(TxOp::DeleteProperty {
            target,
            key: key.into(),
        })
    }

    /// Whether `h` must be fetched from the gatekeeper before it can be read.
    pub fn needs_fetch(&self, h: &str) -> bool {
        self.open.as_ref().is_some_and(|t| !t.fetched.contains_key(h))
    }

    /// Records a gatekeeper read reply. The first version seen is the one
    /// validated at commit.
    pub fn record_read(
        &mut self,
        h: &str,
        record: Option<VertexRecord>,
        version: u64,
    ) -> Result<(), ClientError> {
        let tx = self.tx()?;
        tx.reads.entry(h.to_owned()).or_insert(version);
        tx.fetched.entry(h.to_owned()).or_insert(record);
        Ok(())
    }

    /// Live state of `h` as this transaction sees it: the fetched record
    /// with the transaction's own writes to `h` applied.
    pub fn view(&self, h: &str) -> Result<Option<VertexState>, ClientError> {
        let tx = self.open.as_ref().ok_or(ClientError::NoTransaction)?;
        let base = tx
            .fetched
            .get(h)
            .ok_or_else(|| ClientError::Protocol(format!("vertex {h} was not fetched")))?
            .clone();
        let own: Vec<TxOp> = tx.ops.iter().filter(|op| op.owner() == h).cloned().collect();
        if own.is_empty() {
            return Ok(base.and_then(|r| r.live_state()));
        }
        // Other endpoints are validated by the store at commit; here they
        // are assumed to exist.
        let written = apply_ops(
            |x| {
                if x == h {
                    base.clone()
                } else {
                    Some(VertexRecord::new(x, 0, None))
                }
            },
            &own,
            None,
            1,
        )
        .map_err(ClientError::InvalidOperation)?;
        Ok(match written.get(h) {
            Some(rec) => rec.live_state(),
            None => base.and_then(|r| r.live_state()),
        })
    }

    /// Closes the transaction and returns the batch to submit.
    pub fn take_commit(&mut self) -> Result<(Vec<TxOp>, Vec<(Handle, u64)>), ClientError> {
        let tx = self.open.take().ok_or(ClientError::NoTransaction)?;
        Ok((tx.ops, tx.reads.into_iter().collect()))
    }

    pub fn abort(&mut self) {
        self.open = None;
    }
}

pub trait Transport {
    /// Sends `msg` to `to` and waits for the reply carrying the same
    /// correlation id.
    fn call(&mut self, to: NodeId, corr: u64, msg: Message, timeout: Duration) -> Result<Message, ClientError>;
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Attempts for a request that meets a paused or missing gatekeeper.
    pub attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 50,
            backoff: Duration::from_millis(20),
            timeout: Duration::from_secs(10),
        }
    }
}

/// A blocking client session bound to one gatekeeper.
pub struct Client<T: Transport> {
    transport: T,
    gatekeeper: NodeId,
    next_corr: u64,
    session: TxSession,
    retry: RetryPolicy,
}

impl<T: Transport> Client<T> {
    pub fn new(transport: T, gatekeeper: NodeId) -> Self {
        Client {
            transport,
            gatekeeper,
            next_corr: 1,
            session: TxSession::new(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn gatekeeper(&self) -> NodeId {
        self.gatekeeper
    }

    pub fn session(&mut self) -> &mut TxSession {
        &mut self.session
    }

    fn request(&mut self, make: impl Fn(u64) -> Message) -> Result<Message, ClientError> {
        let mut last = ClientError::Unavailable;
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff);
            }
            let corr = self.next_corr;
            self.next_corr += 1;
            match self
                .transport
                .call(self.gatekeeper, corr, make(corr), self.retry.timeout)
            {
                Ok(Message::Unavailable { .. }) => last = ClientError::Unavailable,
                Ok(reply) => return Ok(reply),
                Err(e @ ClientError::Transport(_)) => last = e,
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }

    pub fn begin_tx(&mut self) -> Result<(), ClientError> {
        self.session.begin()
    }

    fn fetch(&mut self, h: &str) -> Result<(), ClientError> {
        if !self.session.needs_fetch(h) {
            if !self.session.is_open() {
                return Err(ClientError::NoTransaction);
            }
            return Ok(());
        }
        let handle = h.to_owned();
        match self.request(|corr| Message::TxRead {
            corr,
            handle: handle.clone(),
        })? {
            Message::TxReadReply {
                record, version, ..
            } => self.session.record_read(h, record, version),
            other => Err(ClientError::Protocol(other.kind().into())),
        }
    }

    pub fn get_vertex(&mut self, h: &str) -> Result<Option<VertexState>, ClientError> {
        self.fetch(h)?;
        self.session.view(h)
    }

    pub fn get_edge(&mut self, h: &str, owner: &str) -> Result<Option<EdgeState>, ClientError> {
        Ok(self
            .get_vertex(owner)?
            .and_then(|v| v.edges.get(h).cloned()))
    }

    pub fn create_vertex(&mut self, h: &str) -> Result<(), ClientError> {
        self.session.create_vertex(h)
    }

    pub fn delete_vertex(&mut self, h: &str) -> Result<(), ClientError> {
        self.session.delete_vertex(h)
    }

    pub fn create_edge(&mut self, h: &str, src: &str, dst: &str) -> Result<(), ClientError> {
        self.session.create_edge(h, src, dst)
    }

    pub fn delete_edge(&mut self, h: &str, src: &str) -> Result<(), ClientError> {
        self.session.delete_edge(h, src)
    }

    pub fn set_property(&mut self, target: Target, key: &str, value: &str) -> Result<(), ClientError> {
        self.session.set_property(target, key, value)
    }

    pub fn delete_property(&mut self, target: Target, key: &str) -> Result<(), ClientError> {
        self.session.delete_property(target, key)
    }

    pub fn commit_tx(&mut self) -> Result<CommitOutcome, ClientError> {
        let (ops, reads) = self.session.take_commit()?;
        if ops.is_empty() && reads.is_empty() {
            return Ok(CommitOutcome::Committed(VectorTimestamp::zero(0, 0, 0)));
        }
        match self.request(|corr| Message::TxCommit {
            corr,
            ops: ops.clone(),
            reads: reads.clone(),
        })? {
            Message::TxCommitReply { outcome, .. } => Ok(outcome),
            other => Err(ClientError::Protocol(other.kind().into())),
        }
    }

    /// Runs `body` in a transaction, retrying on retryable aborts.
    pub fn transact<R>(
        &mut self,
        attempts: u32,
        mut body: impl FnMut(&mut Self) -> Result<R, ClientError>,
    ) -> Result<(R, VectorTimestamp), ClientError> {
        let mut last = AbortReason::Conflict;
        for _ in 0..attempts.max(1) {
            self.session.abort();
            self.begin_tx()?;
            let r = body(self)?;
            match self.commit_tx()? {
                CommitOutcome::Committed(ts) => return Ok((r, ts)),
                CommitOutcome::Aborted(AbortReason::InvalidOperation(why)) => {
                    return Err(ClientError::InvalidOperation(why))
                }
                CommitOutcome::Aborted(reason) => last = reason,
            }
        }
        Err(match last {
            AbortReason::Unavailable => ClientError::Unavailable,
            other => ClientError::Protocol(format!("gave up after {other:?}")),
        })
    }

    pub fn run_program(
        &mut self,
        name: &str,
        starts: &[Handle],
        params: &Params,
    ) -> Result<(Params, Option<VectorTimestamp>), ClientError> {
        let mut last = ClientError::Unavailable;
        for _ in 0..self.retry.attempts.max(1) {
            let reply = self.request(|corr| Message::SubmitProgram {
                corr,
                name: name.to_owned(),
                starts: starts.to_vec(),
                params: params.clone(),
            })?;
            match reply {
                Message::ProgramResult { ts, result, .. } => match result {
                    Ok(p) => return Ok((p, ts)),
                    Err(ProgramFailure::Unavailable) => {
                        last = ClientError::Unavailable;
                        std::thread::sleep(self.retry.backoff);
                    }
                    Err(f) => return Err(ClientError::Program(f)),
                },
                other => return Err(ClientError::Protocol(other.kind().into())),
            }
        }
        Err(last)
    }
}
