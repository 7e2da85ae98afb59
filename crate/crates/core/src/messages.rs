//! Messages exchanged between clients, gatekeepers, shards and the cluster
//! manager.

use serde::{Deserialize, Serialize};

use crate::model::{Handle, ShardId, TxOp, VertexRecord};
use crate::program::Params;
use crate::timestamp::{Epoch, GatekeeperId, VectorTimestamp};

/// Microseconds of runtime time (simulated or wall clock).
pub type Micros = u64;

pub type ProgramId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Gatekeeper(GatekeeperId),
    Shard(ShardId),
    Manager,
    Oracle,
    Store,
    Client(u32),
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeId::Gatekeeper(i) => write!(f, "gatekeeper{i}"),
            NodeId::Shard(i) => write!(f, "shard{i}"),
            NodeId::Manager => f.write_str("manager"),
            NodeId::Oracle => f.write_str("oracle"),
            NodeId::Store => f.write_str("store"),
            NodeId::Client(i) => write!(f, "client{i}"),
        }
    }
}

impl std::str::FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |prefix: &str| -> Result<u32, String> {
            s[prefix.len()..]
                .parse()
                .map_err(|_| format!("bad server id `{s}`"))
        };
        if s.starts_with("gatekeeper") {
            Ok(NodeId::Gatekeeper(num("gatekeeper")? as u16))
        } else if s.starts_with("gk") {
            Ok(NodeId::Gatekeeper(num("gk")? as u16))
        } else if s.starts_with("shard") {
            Ok(NodeId::Shard(num("shard")? as u16))
        } else if s.starts_with("client") {
            Ok(NodeId::Client(num("client")?))
        } else {
            match s {
                "manager" => Ok(NodeId::Manager),
                "oracle" => Ok(NodeId::Oracle),
                "store" => Ok(NodeId::Store),
                _ => Err(format!("unknown server `{s}`")),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AbortReason {
    Conflict,
    InvalidOperation(String),
    StaleTimestamp,
    Unavailable,
}

impl AbortReason {
    pub fn retryable(&self) -> bool {
        !matches!(self, AbortReason::InvalidOperation(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitOutcome {
    Committed(VectorTimestamp),
    Aborted(AbortReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProgramFailure {
    UnknownProgram(String),
    NotFound(Handle),
    BadParams(String),
    Unavailable,
}

impl From<crate::program::ProgramError> for ProgramFailure {
    fn from(e: crate::program::ProgramError) -> Self {
        use crate::program::ProgramError;
        match e {
            ProgramError::UnknownProgram(n) => ProgramFailure::UnknownProgram(n),
            ProgramError::NotFound(h) => ProgramFailure::NotFound(h),
            ProgramError::BadParams(s) | ProgramError::Duplicate(s) => ProgramFailure::BadParams(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewPhase {
    Prepare,
    Activate,
}

/// Work a gatekeeper sends down one of its shard channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShardBody {
    Tx {
        ts: VectorTimestamp,
        ops: Vec<TxOp>,
    },
    Nop {
        ts: VectorTimestamp,
    },
    /// Announces a node program to a shard; `starts` lists the start
    /// vertices this shard owns (often none).
    Program {
        ts: VectorTimestamp,
        prog: ProgramId,
        name: String,
        params: Params,
        starts: Vec<Handle>,
    },
    Hop {
        prog: ProgramId,
        hops: Vec<(Handle, Params)>,
    },
    Done {
        prog: ProgramId,
    },
    Gc {
        threshold: VectorTimestamp,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    BeginTx {
        corr: u64,
    },
    BeginTxReply {
        corr: u64,
    },
    TxRead {
        corr: u64,
        handle: Handle,
    },
    TxReadReply {
        corr: u64,
        handle: Handle,
        record: Option<VertexRecord>,
        version: u64,
    },
    TxCommit {
        corr: u64,
        ops: Vec<TxOp>,
        reads: Vec<(Handle, u64)>,
    },
    TxCommitReply {
        corr: u64,
        outcome: CommitOutcome,
    },
    SubmitProgram {
        corr: u64,
        name: String,
        starts: Vec<Handle>,
        params: Params,
    },
    ProgramResult {
        corr: u64,
        ts: Option<VectorTimestamp>,
        result: Result<Params, ProgramFailure>,
    },
    /// A request reached a server that cannot serve it right now.
    Unavailable {
        corr: u64,
    },
    Announce {
        clock: VectorTimestamp,
    },
    Channel {
        gk: GatekeeperId,
        epoch: Epoch,
        seq: u64,
        body: ShardBody,
    },
    StepReport {
        epoch: Epoch,
        prog: ProgramId,
        fragments: Vec<Params>,
        hops: Vec<(Handle, Params)>,
    },
    Register {
        node: NodeId,
    },
    Heartbeat {
        node: NodeId,
    },
    /// Gatekeepers pause on `Prepare` and resume in the new epoch on
    /// `Activate`; shards only see `Activate` and rebuild from the store.
    View {
        epoch: Epoch,
        phase: ViewPhase,
    },
    ViewAck {
        epoch: Epoch,
        phase: ViewPhase,
        node: NodeId,
    },
}

impl Message {
    /// Correlation id of a client request, if this is one.
    pub fn request_corr(&self) -> Option<u64> {
        match self {
            Message::BeginTx { corr }
            | Message::TxRead { corr, .. }
            | Message::TxCommit { corr, .. }
            | Message::SubmitProgram { corr, .. } => Some(*corr),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::BeginTx { .. } => "begin_tx",
            Message::BeginTxReply { .. } => "begin_tx_reply",
            Message::TxRead { .. } => "tx_read",
            Message::TxReadReply { .. } => "tx_read_reply",
            Message::TxCommit { .. } => "tx_commit",
            Message::TxCommitReply { .. } => "tx_commit_reply",
            Message::SubmitProgram { .. } => "submit_program",
            Message::ProgramResult { .. } => "program_result",
            Message::Unavailable { .. } => "unavailable",
            Message::Announce { .. } => "announce",
            Message::Channel { .. } => "channel",
            Message::StepReport { .. } => "step_report",
            Message::Register { .. } => "register",
            Message::Heartbeat { .. } => "heartbeat",
            Message::View { .. } => "view",
            Message::ViewAck { .. } => "view_ack",
        }
    }
}
