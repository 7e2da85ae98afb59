//! Binary wire protocol.
//!
//! Every frame is `length: u32 | type: u8 | corr: u64 | payload`, where
//! `length` counts the bytes after itself. Integers are little-endian and
//! strings carry a u16 length. Map values (program parameters, properties)
//! carry a u32 length because program results can be large.
//!
//! Replies to oracle and store calls use the request type with the high bit
//! set. A connection opens with `HELLO` naming the sender.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::codec::{self, put_bool, put_str, put_u16, put_u32, put_u64, put_u8, DecodeError, Reader};
use crate::messages::{
    AbortReason, CommitOutcome, Message, NodeId, ProgramFailure, ShardBody, ViewPhase,
};
use crate::model::{EdgeRecord, Handle, Props, ShardId, Target, TxOp, VertexRecord};
use crate::oracle::{EventInfo, EventKind, OracleError, OracleOrder, OrderPreference};
use crate::program::Params;
use crate::store::{CommitResult, StoreAbort};
use crate::timestamp::{Epoch, OrderRelation, VectorTimestamp};

pub mod kind {
    pub const BEGIN_TX: u8 = 0x01;
    pub const TX_READ: u8 = 0x02;
    pub const TX_COMMIT: u8 = 0x03;
    pub const SUBMIT_PROGRAM: u8 = 0x04;
    pub const PROGRAM_RESULT: u8 = 0x05;
    pub const UNAVAILABLE: u8 = 0x06;
    pub const ANNOUNCE: u8 = 0x10;
    pub const SHARD_TX: u8 = 0x20;
    pub const SHARD_NOP: u8 = 0x21;
    pub const SHARD_PROGRAM: u8 = 0x22;
    pub const PROGRAM_HOP: u8 = 0x23;
    pub const PROGRAM_DONE: u8 = 0x24;
    pub const GC_THRESHOLD: u8 = 0x25;
    pub const STEP_REPORT: u8 = 0x26;
    pub const CREATE_EVENT: u8 = 0x30;
    pub const ASSIGN_ORDER: u8 = 0x31;
    pub const QUERY_ORDER: u8 = 0x32;
    pub const ORDER_OR_ASSIGN: u8 = 0x33;
    pub const GC_EVENTS: u8 = 0x34;
    pub const REPORT_WATERMARK: u8 = 0x35;
    pub const REGISTER: u8 = 0x40;
    pub const HEARTBEAT: u8 = 0x41;
    pub const VIEW: u8 = 0x42;
    pub const VIEW_ACK: u8 = 0x43;
    pub const HELLO: u8 = 0x44;
    pub const STORE_EXECUTE: u8 = 0x50;
    pub const STORE_GET_VERTEX: u8 = 0x51;
    pub const STORE_GET_SHARD: u8 = 0x52;
    pub const STORE_RESTORE_SHARD: u8 = 0x53;
    pub const STORE_COMMIT_INDEX: u8 = 0x54;
    pub const ERROR: u8 = 0x7F;
    pub const REPLY: u8 = 0x80;
}

/// Largest frame accepted from the network.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleRequest {
    CreateEvent(VectorTimestamp, EventInfo),
    AssignOrder(Vec<VectorTimestamp>, Vec<VectorTimestamp>),
    QueryOrder(VectorTimestamp, VectorTimestamp),
    OrderOrAssign(Vec<(VectorTimestamp, VectorTimestamp)>, OrderPreference),
    GcEvents(VectorTimestamp),
    ReportWatermark(NodeId, Epoch, VectorTimestamp),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleResponse {
    Ack,
    Order(OracleOrder),
    Relations(Vec<OrderRelation>),
    Removed(u64),
    Failed(OracleError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreRequest {
    Execute {
        ops: Vec<TxOp>,
        reads: Vec<(Handle, u64)>,
        ts: VectorTimestamp,
    },
    GetVertex(Handle),
    GetShard(Handle),
    RestoreShard(ShardId),
    CommitIndex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreResponse {
    Executed(Result<CommitResult, StoreAbort>),
    Vertex(Option<VertexRecord>, u64),
    Shard(Option<ShardId>),
    Records(Vec<VertexRecord>),
    Index(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello(NodeId),
    Msg(Message),
    Oracle(OracleRequest),
    OracleReply(OracleResponse),
    Store(StoreRequest),
    StoreReply(StoreResponse),
    Error(String),
}

fn put_blob(buf: &mut Vec<u8>, s: &str) {
    codec::put_bytes(buf, s.as_bytes());
}

fn blob(r: &mut Reader<'_>) -> Result<String, DecodeError> {
    String::from_utf8(r.bytes()?.to_vec()).map_err(|_| DecodeError::InvalidUtf8)
}

fn put_len(buf: &mut Vec<u8>, n: usize) {
    put_u32(buf, n as u32);
}

fn len(r: &mut Reader<'_>) -> Result<usize, DecodeError> {
    let n = r.u32()? as usize;
    if n > r.remaining() {
        return Err(DecodeError::Malformed("count exceeds frame"));
    }
    Ok(n)
}

fn put_ts(buf: &mut Vec<u8>, ts: &VectorTimestamp) {
    ts.encode(buf);
}

fn ts(r: &mut Reader<'_>) -> Result<VectorTimestamp, DecodeError> {
    VectorTimestamp::decode(r)
}

fn put_opt_ts(buf: &mut Vec<u8>, t: &Option<VectorTimestamp>) {
    put_bool(buf, t.is_some());
    if let Some(t) = t {
        put_ts(buf, t);
    }
}

fn opt_ts(r: &mut Reader<'_>) -> Result<Option<VectorTimestamp>, DecodeError> {
    Ok(if r.bool()? { Some(ts(r)?) } else { None })
}

fn put_ts_list(buf: &mut Vec<u8>, l: &[VectorTimestamp]) {
    put_len(buf, l.len());
    for t in l {
        put_ts(buf, t);
    }
}

fn ts_list(r: &mut Reader<'_>) -> Result<Vec<VectorTimestamp>, DecodeError> {
    let n = len(r)?;
    (0..n).map(|_| ts(r)).collect()
}

fn put_map(buf: &mut Vec<u8>, m: &BTreeMap<String, String>) {
    put_len(buf, m.len());
    for (k, v) in m {
        put_str(buf, k);
        put_blob(buf, v);
    }
}

fn map(r: &mut Reader<'_>) -> Result<BTreeMap<String, String>, DecodeError> {
    let n = len(r)?;
    let mut m = BTreeMap::new();
    for _ in 0..n {
        let k = r.string()?;
        m.insert(k, blob(r)?);
    }
    Ok(m)
}

fn put_handles(buf: &mut Vec<u8>, l: &[Handle]) {
    put_len(buf, l.len());
    for h in l {
        put_str(buf, h);
    }
}

fn handles(r: &mut Reader<'_>) -> Result<Vec<Handle>, DecodeError> {
    let n = len(r)?;
    (0..n).map(|_| r.string()).collect()
}

fn put_hops(buf: &mut Vec<u8>, hops: &[(Handle, Params)]) {
    put_len(buf, hops.len());
    for (h, p) in hops {
        put_str(buf, h);
        put_map(buf, p);
    }
}

fn hops(r: &mut Reader<'_>) -> Result<Vec<(Handle, Params)>, DecodeError> {
    let n = len(r)?;
    (0..n).map(|_| Ok((r.string()?, map(r)?))).collect()
}

pub fn put_node(buf: &mut Vec<u8>, n: NodeId) {
    let (tag, idx) = match n {
        NodeId::Gatekeeper(i) => (0, i as u32),
        NodeId::Shard(i) => (1, i as u32),
        NodeId::Manager => (2, 0),
        NodeId::Oracle => (3, 0),
        NodeId::Store => (4, 0),
        NodeId::Client(i) => (5, i),
    };
    put_u8(buf, tag);
    put_u32(buf, idx);
}

pub fn node(r: &mut Reader<'_>) -> Result<NodeId, DecodeError> {
    let tag = r.u8()?;
    let idx = r.u32()?;
    Ok(match tag {
        0 => NodeId::Gatekeeper(idx as u16),
        1 => NodeId::Shard(idx as u16),
        2 => NodeId::Manager,
        3 => NodeId::Oracle,
        4 => NodeId::Store,
        5 => NodeId::Client(idx),
        t => return Err(DecodeError::UnknownTag { what: "node", tag: t }),
    })
}

fn put_target(buf: &mut Vec<u8>, t: &Target) {
    match t {
        Target::Vertex(h) => {
            put_u8(buf, 0);
            put_str(buf, h);
        }
        Target::Edge { src, handle } => {
            put_u8(buf, 1);
            put_str(buf, src);
            put_str(buf, handle);
        }
    }
}

fn target(r: &mut Reader<'_>) -> Result<Target, DecodeError> {
    Ok(match r.u8()? {
        0 => Target::Vertex(r.string()?),
        1 => Target::Edge {
            src: r.string()?,
            handle: r.string()?,
        },
        t => return Err(DecodeError::UnknownTag { what: "target", tag: t }),
    })
}

fn put_op(buf: &mut Vec<u8>, op: &TxOp) {
    match op {
        TxOp::CreateVertex { handle } => {
            put_u8(buf, 0);
            put_str(buf, handle);
        }
        TxOp::DeleteVertex { handle } => {
            put_u8(buf, 1);
            put_str(buf, handle);
        }
        TxOp::CreateEdge { handle, src, dst } => {
            put_u8(buf, 2);
            put_str(buf, handle);
            put_str(buf, src);
            put_str(buf, dst);
        }
        TxOp::DeleteEdge { handle, src } => {
            put_u8(buf, 3);
            put_str(buf, handle);
            put_str(buf, src);
        }
        TxOp::SetProperty { target, key, value } => {
            put_u8(buf, 4);
            put_target(buf, target);
            put_str(buf, key);
            put_blob(buf, value);
        }
        TxOp::DeleteProperty { target, key } => {
            put_u8(buf, 5);
            put_target(buf, target);
            put_str(buf, key);
        }
    }
}

fn op(r: &mut Reader<'_>) -> Result<TxOp, DecodeError> {
    Ok(match r.u8()? {
        0 => TxOp::CreateVertex { handle: r.string()? },
        1 => TxOp::DeleteVertex { handle: r.string()? },
        2 => TxOp::CreateEdge {
            handle: r.string()?,
            src: r.string()?,
            dst: r.string()?,
        },
        3 => TxOp::DeleteEdge {
            handle: r.string()?,
            src: r.string()?,
        },
        4 => TxOp::SetProperty {
            target: target(r)?,
            key: r.string()?,
            value: blob(r)?,
        },
        5 => TxOp::DeleteProperty {
            target: target(r)?,
            key: r.string()?,
        },
        t => return Err(DecodeError::UnknownTag { what: "op", tag: t }),
    })
}

fn put_ops(buf: &mut Vec<u8>, ops: &[TxOp]) {
    put_len(buf, ops.len());
    for o in ops {
        put_op(buf, o);
    }
}

fn ops(r: &mut Reader<'_>) -> Result<Vec<TxOp>, DecodeError> {
    let n = len(r)?;
    (0..n).map(|_| op(r)).collect()
}

fn put_reads(buf: &mut Vec<u8>, reads: &[(Handle, u64)]) {
    put_len(buf, reads.len());
    for (h, v) in reads {
        put_str(buf, h);
        put_u64(buf, *v);
    }
}

fn reads(r: &mut Reader<'_>) -> Result<Vec<(Handle, u64)>, DecodeError> {
    let n = len(r)?;
    (0..n).map(|_| Ok((r.string()?, r.u64()?))).collect()
}

fn put_props(buf: &mut Vec<u8>, p: &Props) {
    put_map(buf, p);
}

fn put_record(buf: &mut Vec<u8>, v: &VertexRecord) {
    put_str(buf, &v.handle);
    put_u16(buf, v.shard);
    put_bool(buf, v.deleted);
    put_opt_ts(buf, &v.created);
    put_opt_ts(buf, &v.last_update);
    put_props(buf, &v.props);
    put_len(buf, v.edges.len());
    for e in v.edges.values() {
        put_str(buf, &e.handle);
        put_str(buf, &e.dst);
        put_props(buf, &e.props);
        put_opt_ts(buf, &e.created);
        put_bool(buf, e.deleted);
    }
}

fn record(r: &mut Reader<'_>) -> Result<VertexRecord, DecodeError> {
    let handle = r.string()?;
    let shard = r.u16()?;
    let deleted = r.bool()?;
    let created = opt_ts(r)?;
    let last_update = opt_ts(r)?;
    let props = map(r)?;
    let n = len(r)?;
    let mut edges = BTreeMap::new();
    for _ in 0..n {
        let e = EdgeRecord {
            handle: r.string()?,
            dst: r.string()?,
            props: map(r)?,
            created: opt_ts(r)?,
            deleted: r.bool()?,
        };
        edges.insert(e.handle.clone(), e);
    }
    Ok(VertexRecord {
        handle,
        shard,
        deleted,
        created,
        last_update,
        props,
        edges,
    })
}

fn put_abort(buf: &mut Vec<u8>, a: &AbortReason) {
    match a {
        AbortReason::Conflict => put_u8(buf, 0),
        AbortReason::InvalidOperation(why) => {
            put_u8(buf, 1);
            put_blob(buf, why);
        }
        AbortReason::StaleTimestamp => put_u8(buf, 2),
        AbortReason::Unavailable => put_u8(buf, 3),
    }
}

fn abort(r: &mut Reader<'_>) -> Result<AbortReason, DecodeError> {
    Ok(match r.u8()? {
        0 => AbortReason::Conflict,
        1 => AbortReason::InvalidOperation(blob(r)?),
        2 => AbortReason::StaleTimestamp,
        3 => AbortReason::Unavailable,
        t => return Err(DecodeError::UnknownTag { what: "abort", tag: t }),
    })
}

fn put_failure(buf: &mut Vec<u8>, f: &ProgramFailure) {
    match f {
        ProgramFailure::UnknownProgram(s) => {
            put_u8(buf, 0);
            put_str(buf, s);
        }
        ProgramFailure::NotFound(s) => {
            put_u8(buf, 1);
            put_str(buf, s);
        }
        ProgramFailure::BadParams(s) => {
            put_u8(buf, 2);
            put_blob(buf, s);
        }
        ProgramFailure::Unavailable => put_u8(buf, 3),
    }
}

fn failure(r: &mut Reader<'_>) -> Result<ProgramFailure, DecodeError> {
    Ok(match r.u8()? {
        0 => ProgramFailure::UnknownProgram(r.string()?),
        1 => ProgramFailure::NotFound(r.string()?),
        2 => ProgramFailure::BadParams(blob(r)?),
        3 => ProgramFailure::Unavailable,
        t => return Err(DecodeError::UnknownTag { what: "failure", tag: t }),
    })
}

fn put_phase(buf: &mut Vec<u8>, p: ViewPhase) {
    put_u8(buf, matches!(p, ViewPhase::Activate) as u8);
}

fn phase(r: &mut Reader<'_>) -> Result<ViewPhase, DecodeError> {
    Ok(match r.u8()? {
        0 => ViewPhase::Prepare,
        1 => ViewPhase::Activate,
        t => return Err(DecodeError::UnknownTag { what: "phase", tag: t }),
    })
}

fn put_relation(buf: &mut Vec<u8>, rel: OrderRelation) {
    put_u8(
        buf,
        match rel {
            OrderRelation::Before => 0,
            OrderRelation::After => 1,
            OrderRelation::Equal => 2,
            OrderRelation::Concurrent => 3,
        },
    );
}

fn relation(r: &mut Reader<'_>) -> Result<OrderRelation, DecodeError> {
    Ok(match r.u8()? {
        0 => OrderRelation::Before,
        1 => OrderRelation::After,
        2 => OrderRelation::Equal,
        3 => OrderRelation::Concurrent,
        t => return Err(DecodeError::UnknownTag { what: "relation", tag: t }),
    })
}

fn put_info(buf: &mut Vec<u8>, info: EventInfo) {
    put_u8(
        buf,
        match info.kind {
            EventKind::Transaction => 0,
            EventKind::Program => 1,
            EventKind::Nop => 2,
        },
    );
    put_u64(buf, info.arrival);
}

fn info(r: &mut Reader<'_>) -> Result<EventInfo, DecodeError> {
    let kind = match r.u8()? {
        0 => EventKind::Transaction,
        1 => EventKind::Program,
        2 => EventKind::Nop,
        t => return Err(DecodeError::UnknownTag { what: "event kind", tag: t }),
    };
    Ok(EventInfo {
        kind,
        arrival: r.u64()?,
    })
}

fn put_pref(buf: &mut Vec<u8>, p: OrderPreference) {
    put_u8(buf, matches!(p, OrderPreference::ProgramAfterTransactions) as u8);
}

fn pref(r: &mut Reader<'_>) -> Result<OrderPreference, DecodeError> {
    Ok(match r.u8()? {
        0 => OrderPreference::ArrivalOrder,
        1 => OrderPreference::ProgramAfterTransactions,
        t => return Err(DecodeError::UnknownTag { what: "preference", tag: t }),
    })
}

/// Encodes the message body and returns its type byte and correlation id.
fn put_message(buf: &mut Vec<u8>, m: &Message) -> (u8, u64) {
    use kind::*;
    match m {
        Message::BeginTx { corr } => (BEGIN_TX, *corr),
        Message::BeginTxReply { corr } => (REPLY | BEGIN_TX, *corr),
        Message::TxRead { corr, handle } => {
            put_str(buf, handle);
            (TX_READ, *corr)
        }
        Message::TxReadReply {
            corr,
            handle,
            record,
            version,
        } => {
            put_str(buf, handle);
            put_bool(buf, record.is_some());
            if let Some(rec) = record {
                put_record(buf, rec);
            }
            put_u64(buf, *version);
            (REPLY | TX_READ, *corr)
        }
        Message::TxCommit { corr, ops, reads } => {
            put_ops(buf, ops);
            put_reads(buf, reads);
            (TX_COMMIT, *corr)
        }
        Message::TxCommitReply { corr, outcome } => {
            match outcome {
                CommitOutcome::Committed(ts) => {
                    put_u8(buf, 0);
                    put_ts(buf, ts);
                }
                CommitOutcome::Aborted(a) => {
                    put_u8(buf, 1);
                    put_abort(buf, a);
                }
            }
            (REPLY | TX_COMMIT, *corr)
        }
        Message::SubmitProgram {
            corr,
            name,
            starts,
            params,
        } => {
            put_str(buf, name);
            put_handles(buf, starts);
            put_map(buf, params);
            (SUBMIT_PROGRAM, *corr)
        }
        Message::ProgramResult { corr, ts, result } => {
            put_opt_ts(buf, ts);
            match result {
                Ok(p) => {
                    put_u8(buf, 0);
                    put_map(buf, p);
                }
                Err(f) => {
                    put_u8(buf, 1);
                    put_failure(buf, f);
                }
            }
            (PROGRAM_RESULT, *corr)
        }
        Message::Unavailable { corr } => (UNAVAILABLE, *corr),
        Message::Announce { clock } => {
            put_ts(buf, clock);
            (ANNOUNCE, 0)
        }
        Message::Channel {
            gk,
            epoch,
            seq,
            body,
        } => {
            put_u16(buf, *gk);
            put_u64(buf, *epoch);
            put_u64(buf, *seq);
            let t = match body {
                ShardBody::Tx { ts, ops } => {
                    put_ts(buf, ts);
                    put_ops(buf, ops);
                    SHARD_TX
                }
                ShardBody::Nop { ts } => {
                    put_ts(buf, ts);
                    SHARD_NOP
                }
                ShardBody::Program {
                    ts,
                    prog,
                    name,
                    params,
                    starts,
                } => {
                    put_ts(buf, ts);
                    put_u64(buf, *prog);
                    put_str(buf, name);
                    put_map(buf, params);
                    put_handles(buf, starts);
                    SHARD_PROGRAM
                }
                ShardBody::Hop { prog, hops } => {
                    put_u64(buf, *prog);
                    put_hops(buf, hops);
                    PROGRAM_HOP
                }
                ShardBody::Done { prog } => {
                    put_u64(buf, *prog);
                    PROGRAM_DONE
                }
                ShardBody::Gc { threshold } => {
                    put_ts(buf, threshold);
                    GC_THRESHOLD
                }
            };
            (t, 0)
        }
        Message::StepReport {
            epoch,
            prog,
            fragments,
            hops,
        } => {
            put_u64(buf, *epoch);
            put_u64(buf, *prog);
            put_len(buf, fragments.len());
            for f in fragments {
                put_map(buf, f);
            }
            put_hops(buf, hops);
            (STEP_REPORT, 0)
        }
        Message::Register { node } => {
            put_node(buf, *node);
            (REGISTER, 0)
        }
        Message::Heartbeat { node } => {
            put_node(buf, *node);
            (HEARTBEAT, 0)
        }
        Message::View { epoch, phase } => {
            put_u64(buf, *epoch);
            put_phase(buf, *phase);
            (VIEW, 0)
        }
        Message::ViewAck { epoch, phase, node } => {
            put_u64(buf, *epoch);
            put_phase(buf, *phase);
            put_node(buf, *node);
            (VIEW_ACK, 0)
        }
    }
}

fn message(t: u8, corr: u64, r: &mut Reader<'_>) -> Result<Message, DecodeError> {
    use kind::*;
    let channel = |r: &mut Reader<'_>, body: &dyn Fn(&mut Reader<'_>) -> Result<ShardBody, DecodeError>| -> Result<Message, DecodeError> {
        let gk = r.u16()?;
        let epoch = r.u64()?;
        let seq = r.u64()?;
        Ok(Message::Channel {
            gk,
            epoch,
            seq,
            body: body(r)?,
        })
    };
    Ok(match t {
        BEGIN_TX => Message::BeginTx { corr },
        x if x == REPLY | BEGIN_TX => Message::BeginTxReply { corr },
        TX_READ => Message::TxRead {
            corr,
            handle: r.string()?,
        },
        x if x == REPLY | TX_READ => {
            let handle = r.string()?;
            let record = if r.bool()? { Some(record(r)?) } else { None };
            Message::TxReadReply {
                corr,
                handle,
                record,
                version: r.u64()?,
            }
        }
        TX_COMMIT => Message::TxCommit {
            corr,
            ops: ops(r)?,
            reads: reads(r)?,
        },
        x if x == REPLY | TX_COMMIT => {
            let outcome = match r.u8()? {
                0 => CommitOutcome::Committed(ts(r)?),
                1 => CommitOutcome::Aborted(abort(r)?),
                t => return Err(DecodeError::UnknownTag { what: "outcome", tag: t }),
            };
            Message::TxCommitReply { corr, outcome }
        }
        SUBMIT_PROGRAM => Message::SubmitProgram {
            corr,
            name: r.string()?,
            starts: handles(r)?,
            params: map(r)?,
        },
        PROGRAM_RESULT => {
            let ts = opt_ts(r)?;
            let result = match r.u8()? {
                0 => Ok(map(r)?),
                1 => Err(failure(r)?),
                t => return Err(DecodeError::UnknownTag { what: "result", tag: t }),
            };
            Message::ProgramResult { corr, ts, result }
        }
        UNAVAILABLE => Message::Unavailable { corr },
        ANNOUNCE => Message::Announce { clock: ts(r)? },
        SHARD_TX => channel(r, &|r| {
            Ok(ShardBody::Tx {
                ts: ts(r)?,
                ops: ops(r)?,
            })
        })?,
        SHARD_NOP => channel(r, &|r| Ok(ShardBody::Nop { ts: ts(r)? }))?,
        SHARD_PROGRAM => channel(r, &|r| {
            Ok(ShardBody::Program {
                ts: ts(r)?,
                prog: r.u64()?,
                name: r.string()?,
                params: map(r)?,
                starts: handles(r)?,
            })
        })?,
        PROGRAM_HOP => channel(r, &|r| {
            Ok(ShardBody::Hop {
                prog: r.u64()?,
                hops: hops(r)?,
            })
        })?,
        PROGRAM_DONE => channel(r, &|r| Ok(ShardBody::Done { prog: r.u64()? }))?,
        GC_THRESHOLD => channel(r, &|r| Ok(ShardBody::Gc { threshold: ts(r)? }))?,
        STEP_REPORT => {
            let epoch = r.u64()?;
            let prog = r.u64()?;
            let n = len(r)?;
            let fragments = (0..n).map(|_| map(r)).collect::<Result<_, _>>()?;
            Message::StepReport {
                epoch,
                prog,
                fragments,
                hops: hops(r)?,
            }
        }
        REGISTER => Message::Register { node: node(r)? },
        HEARTBEAT => Message::Heartbeat { node: node(r)? },
        VIEW => Message::View {
            epoch: r.u64()?,
            phase: phase(r)?,
        },
        VIEW_ACK => Message::ViewAck {
            epoch: r.u64()?,
            phase: phase(r)?,
            node: node(r)?,
        },
        t => return Err(DecodeError::UnknownTag { what: "message type", tag: t }),
    })
}

fn put_oracle_error(buf: &mut Vec<u8>, e: &OracleError) {
    match e {
        OracleError::NotRegistered(t) => {
            put_u8(buf, 0);
            put_ts(buf, t);
        }
        OracleError::Cycle { before, after } => {
            put_u8(buf, 1);
            put_ts(buf, before);
            put_ts(buf, after);
        }
    }
}

fn oracle_error(r: &mut Reader<'_>) -> Result<OracleError, DecodeError> {
    Ok(match r.u8()? {
        0 => OracleError::NotRegistered(ts(r)?),
        1 => OracleError::Cycle {
            before: ts(r)?,
            after: ts(r)?,
        },
        t => return Err(DecodeError::UnknownTag { what: "oracle error", tag: t }),
    })
}

fn put_store_abort(buf: &mut Vec<u8>, a: &StoreAbort) {
    match a {
        StoreAbort::Conflict(h) => {
            put_u8(buf, 0);
            put_str(buf, h);
        }
        StoreAbort::InvalidOperation(why) => {
            put_u8(buf, 1);
            put_blob(buf, why);
        }
        StoreAbort::StaleTimestamp {
            handle,
            last_update,
        } => {
            put_u8(buf, 2);
            put_str(buf, handle);
            put_ts(buf, last_update);
        }
    }
}

fn store_abort(r: &mut Reader<'_>) -> Result<StoreAbort, DecodeError> {
    Ok(match r.u8()? {
        0 => StoreAbort::Conflict(r.string()?),
        1 => StoreAbort::InvalidOperation(blob(r)?),
        2 => StoreAbort::StaleTimestamp {
            handle: r.string()?,
            last_update: ts(r)?,
        },
        t => return Err(DecodeError::UnknownTag { what: "store abort", tag: t }),
    })
}

/// Encodes `frame` with its length prefix.
pub fn encode(frame: &Frame, corr: u64) -> Vec<u8> {
    use kind::*;
    let mut body = Vec::new();
    let (t, corr) = match frame {
        Frame::Hello(n) => {
            put_node(&mut body, *n);
            (HELLO, corr)
        }
        Frame::Msg(m) => put_message(&mut body, m),
        Frame::Error(s) => {
            put_blob(&mut body, s);
            (ERROR, corr)
        }
        Frame::Oracle(req) => {
            let t = match req {
                OracleRequest::CreateEvent(id, i) => {
                    put_ts(&mut body, id);
                    put_info(&mut body, *i);
                    CREATE_EVENT
                }
                OracleRequest::AssignOrder(b, a) => {
                    put_ts_list(&mut body, b);
                    put_ts_list(&mut body, a);
                    ASSIGN_ORDER
                }
                OracleRequest::QueryOrder(a, b) => {
                    put_ts(&mut body, a);
                    put_ts(&mut body, b);
                    QUERY_ORDER
                }
                OracleRequest::OrderOrAssign(pairs, p) => {
                    put_len(&mut body, pairs.len());
                    for (a, b) in pairs {
                        put_ts(&mut body, a);
                        put_ts(&mut body, b);
                    }
                    put_pref(&mut body, *p);
                    ORDER_OR_ASSIGN
                }
                OracleRequest::GcEvents(t) => {
                    put_ts(&mut body, t);
                    GC_EVENTS
                }
                OracleRequest::ReportWatermark(n, e, w) => {
                    put_node(&mut body, *n);
                    put_u64(&mut body, *e);
                    put_ts(&mut body, w);
                    REPORT_WATERMARK
                }
            };
            (t, corr)
        }
        Frame::OracleReply(resp) => {
            // One reply type covers every oracle call; the payload tag says
            // which answer it carries.
            match resp {
                OracleResponse::Ack => put_u8(&mut body, 0),
                OracleResponse::Order(o) => {
                    put_u8(&mut body, 1);
                    put_u8(
                        &mut body,
                        match o {
                            OracleOrder::Before => 0,
                            OracleOrder::After => 1,
                            OracleOrder::Unordered => 2,
                        },
                    );
                }
                OracleResponse::Relations(rels) => {
                    put_u8(&mut body, 2);
                    put_len(&mut body, rels.len());
                    for rel in rels {
                        put_relation(&mut body, *rel);
                    }
                }
                OracleResponse::Removed(n) => {
                    put_u8(&mut body, 3);
                    put_u64(&mut body, *n);
                }
                OracleResponse::Failed(e) => {
                    put_u8(&mut body, 4);
                    put_oracle_error(&mut body, e);
                }
            }
            (REPLY | CREATE_EVENT, corr)
        }
        Frame::Store(req) => {
            let t = match req {
                StoreRequest::Execute { ops, reads, ts } => {
                    put_ops(&mut body, ops);
                    put_reads(&mut body, reads);
                    put_ts(&mut body, ts);
                    STORE_EXECUTE
                }
                StoreRequest::GetVertex(h) => {
                    put_str(&mut body, h);
                    STORE_GET_VERTEX
                }
                StoreRequest::GetShard(h) => {
                    put_str(&mut body, h);
                    STORE_GET_SHARD
                }
                StoreRequest::RestoreShard(s) => {
                    put_u16(&mut body, *s);
                    STORE_RESTORE_SHARD
                }
                StoreRequest::CommitIndex => STORE_COMMIT_INDEX,
            };
            (t, corr)
        }
        Frame::StoreReply(resp) => {
            match resp {
                StoreResponse::Executed(Ok(c)) => {
                    put_u8(&mut body, 0);
                    put_u64(&mut body, c.index);
                    put_len(&mut body, c.shard_ops.len());
                    for (s, ops) in &c.shard_ops {
                        put_u16(&mut body, *s);
                        put_ops(&mut body, ops);
                    }
                    put_handles(&mut body, &c.touched);
                }
                StoreResponse::Executed(Err(a)) => {
                    put_u8(&mut body, 1);
                    put_store_abort(&mut body, a);
                }
                StoreResponse::Vertex(rec, version) => {
                    put_u8(&mut body, 2);
                    put_bool(&mut body, rec.is_some());
                    if let Some(rec) = rec {
                        put_record(&mut body, rec);
                    }
                    put_u64(&mut body, *version);
                }
                StoreResponse::Shard(s) => {
                    put_u8(&mut body, 3);
                    put_bool(&mut body, s.is_some());
                    put_u16(&mut body, s.unwrap_or(0));
                }
                StoreResponse::Records(recs) => {
                    put_u8(&mut body, 4);
                    put_len(&mut body, recs.len());
                    for rec in recs {
                        put_record(&mut body, rec);
                    }
                }
                StoreResponse::Index(i) => {
                    put_u8(&mut body, 5);
                    put_u64(&mut body, *i);
                }
            }
            (REPLY | STORE_EXECUTE, corr)
        }
    };
    let mut out = Vec::with_capacity(13 + body.len());
    put_u32(&mut out, (9 + body.len()) as u32);
    put_u8(&mut out, t);
    put_u64(&mut out, corr);
    out.extend_from_slice(&body);
    out
}

/// Decodes one frame body (everything after the length prefix).
pub fn decode(buf: &[u8]) -> Result<(Frame, u64), DecodeError> {
    use kind::*;
    let mut r = Reader::new(buf);
    let t = r.u8()?;
    let corr = r.u64()?;
    let frame = match t {
        HELLO => Frame::Hello(node(&mut r)?),
        ERROR => Frame::Error(blob(&mut r)?),
        CREATE_EVENT => Frame::Oracle(OracleRequest::CreateEvent(ts(&mut r)?, info(&mut r)?)),
        ASSIGN_ORDER => Frame::Oracle(OracleRequest::AssignOrder(ts_list(&mut r)?, ts_list(&mut r)?)),
        QUERY_ORDER => Frame::Oracle(OracleRequest::QueryOrder(ts(&mut r)?, ts(&mut r)?)),
        ORDER_OR_ASSIGN => {
            let n = len(&mut r)?;
            let pairs = (0..n)
                .map(|_| Ok((ts(&mut r)?, ts(&mut r)?)))
                .collect::<Result<Vec<_>, DecodeError>>()?;
            Frame::Oracle(OracleRequest::OrderOrAssign(pairs, pref(&mut r)?))
        }
        GC_EVENTS => Frame::Oracle(OracleRequest::GcEvents(ts(&mut r)?)),
        REPORT_WATERMARK => Frame::Oracle(OracleRequest::ReportWatermark(
            node(&mut r)?,
            r.u64()?,
            ts(&mut r)?,
        )),
        x if x == REPLY | CREATE_EVENT => Frame::OracleReply(match r.u8()? {
            0 => OracleResponse::Ack,
            1 => OracleResponse::Order(match r.u8()? {
                0 => OracleOrder::Before,
                1 => OracleOrder::After,
                2 => OracleOrder::Unordered,
                t => return Err(DecodeError::UnknownTag { what: "order", tag: t }),
            }),
            2 => {
                let n = len(&mut r)?;
                OracleResponse::Relations((0..n).map(|_| relation(&mut r)).collect::<Result<_, _>>()?)
            }
            3 => OracleResponse::Removed(r.u64()?),
            4 => OracleResponse::Failed(oracle_error(&mut r)?),
            t => return Err(DecodeError::UnknownTag { what: "oracle reply", tag: t }),
        }),
        STORE_EXECUTE => Frame::Store(StoreRequest::Execute {
            ops: ops(&mut r)?,
            reads: reads(&mut r)?,
            ts: ts(&mut r)?,
        }),
        STORE_GET_VERTEX => Frame::Store(StoreRequest::GetVertex(r.string()?)),
        STORE_GET_SHARD => Frame::Store(StoreRequest::GetShard(r.string()?)),
        STORE_RESTORE_SHARD => Frame::Store(StoreRequest::RestoreShard(r.u16()?)),
        STORE_COMMIT_INDEX => Frame::Store(StoreRequest::CommitIndex),
        x if x == REPLY | STORE_EXECUTE => Frame::StoreReply(match r.u8()? {
            0 => {
                let index = r.u64()?;
                let n = len(&mut r)?;
                let mut shard_ops = BTreeMap::new();
                for _ in 0..n {
                    let s = r.u16()?;
                    shard_ops.insert(s, ops(&mut r)?);
                }
                StoreResponse::Executed(Ok(CommitResult {
                    index,
                    shard_ops,
                    touched: handles(&mut r)?,
                }))
            }
            1 => StoreResponse::Executed(Err(store_abort(&mut r)?)),
            2 => {
                let rec = if r.bool()? { Some(record(&mut r)?) } else { None };
                StoreResponse::Vertex(rec, r.u64()?)
            }
            3 => {
                let some = r.bool()?;
                let s = r.u16()?;
                StoreResponse::Shard(some.then_some(s))
            }
            4 => {
                let n = len(&mut r)?;
                StoreResponse::Records((0..n).map(|_| record(&mut r)).collect::<Result<_, _>>()?)
            }
            5 => StoreResponse::Index(r.u64()?),
            t => return Err(DecodeError::UnknownTag { what: "store reply", tag: t }),
        }),
        t => Frame::Msg(message(t, corr, &mut r)?),
    };
    r.finish()?;
    Ok((frame, corr))
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
}

pub fn write_frame(w: &mut impl Write, frame: &Frame, corr: u64) -> Result<(), WireError> {
    w.write_all(&encode(frame, corr))?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<(Frame, u64), WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len);
    if n > MAX_FRAME {
        return Err(WireError::TooLarge(n));
    }
    let mut body = vec![0u8; n as usize];
    r.read_exact(&mut body)?;
    Ok(decode(&body)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(f: Frame, corr: u64) {
        let bytes = encode(&f, corr);
        let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(n, bytes.len() - 4);
        let (g, c) = decode(&bytes[4..]).unwrap();
        assert_eq!(g, f);
        if let Frame::Msg(m) = &f {
            assert_eq!(Some(c), m.request_corr().or(Some(c)));
        } else {
            assert_eq!(c, corr);
        }
    }

    #[test]
    fn begin_tx_layout_is_bit_exact() {
        let bytes = encode(&Frame::Msg(Message::BeginTx { corr: 0x0102 }), 0);
        assert_eq!(bytes, vec![9, 0, 0, 0, 0x01, 0x02, 0x01, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn unknown_type_rejected() {
        let mut body = vec![0x6E];
        body.extend_from_slice(&[0; 8]);
        assert!(matches!(
            decode(&body),
            Err(DecodeError::UnknownTag { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&Frame::Msg(Message::BeginTx { corr: 1 }), 0);
        bytes.push(0);
        assert!(decode(&bytes[4..]).is_err());
    }

    #[test]
    fn stream_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::Hello(NodeId::Shard(3)), 0).unwrap();
        write_frame(&mut buf, &Frame::Store(StoreRequest::CommitIndex), 5).unwrap();
        let mut cur = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur).unwrap().0, Frame::Hello(NodeId::Shard(3)));
        assert_eq!(read_frame(&mut cur).unwrap(), (Frame::Store(StoreRequest::CommitIndex), 5));
    }

    fn arb_ts() -> impl Strategy<Value = VectorTimestamp> {
        (0u64..4, 0u16..3, prop::collection::vec(0u64..1000, 3))
            .prop_map(|(e, i, c)| VectorTimestamp::new(e, i, c))
    }

    fn arb_handle() -> impl Strategy<Value = String> {
        "[a-z0-9]{1,6}"
    }

    fn arb_map() -> impl Strategy<Value = BTreeMap<String, String>> {
        prop::collection::btree_map("[a-z]{1,4}", ".{0,12}", 0..4)
    }

    fn arb_target() -> impl Strategy<Value = Target> {
        prop_oneof![
            arb_handle().prop_map(Target::Vertex),
            (arb_handle(), arb_handle()).prop_map(|(src, handle)| Target::Edge { src, handle }),
        ]
    }

    fn arb_op() -> impl Strategy<Value = TxOp> {
        prop_oneof![
            arb_handle().prop_map(|handle| TxOp::CreateVertex { handle }),
            arb_handle().prop_map(|handle| TxOp::DeleteVertex { handle }),
            (arb_handle(), arb_handle(), arb_handle())
                .prop_map(|(handle, src, dst)| TxOp::CreateEdge { handle, src, dst }),
            (arb_handle(), arb_handle()).prop_map(|(handle, src)| TxOp::DeleteEdge { handle, src }),
            (arb_target(), "[a-z]{1,3}", ".{0,8}")
                .prop_map(|(target, key, value)| TxOp::SetProperty { target, key, value }),
            (arb_target(), "[a-z]{1,3}").prop_map(|(target, key)| TxOp::DeleteProperty { target, key }),
        ]
    }

    fn arb_record() -> impl Strategy<Value = VertexRecord> {
        (
            arb_handle(),
            any::<u16>(),
            any::<bool>(),
            prop::option::of(arb_ts()),
            arb_map(),
            prop::collection::vec((arb_handle(), arb_handle(), arb_map(), any::<bool>()), 0..3),
        )
            .prop_map(|(h, shard, deleted, created, props, edges)| VertexRecord {
                handle: h,
                shard,
                deleted,
                last_update: created.clone(),
                created,
                props,
                edges: edges
                    .into_iter()
                    .map(|(eh, dst, props, deleted)| {
                        (
                            eh.clone(),
                            EdgeRecord {
                                handle: eh,
                                dst,
                                props,
                                created: None,
                                deleted,
                            },
                        )
                    })
                    .collect(),
            })
    }

    fn arb_node() -> impl Strategy<Value = NodeId> {
        prop_oneof![
            any::<u16>().prop_map(NodeId::Gatekeeper),
            any::<u16>().prop_map(NodeId::Shard),
            Just(NodeId::Manager),
            Just(NodeId::Oracle),
            Just(NodeId::Store),
            any::<u32>().prop_map(NodeId::Client),
        ]
    }

    fn arb_body() -> impl Strategy<Value = ShardBody> {
        prop_oneof![
            (arb_ts(), prop::collection::vec(arb_op(), 0..4)).prop_map(|(ts, ops)| ShardBody::Tx { ts, ops }),
            arb_ts().prop_map(|ts| ShardBody::Nop { ts }),
            (arb_ts(), any::<u64>(), "[a-z_]{1,10}", arb_map(), prop::collection::vec(arb_handle(), 0..3))
                .prop_map(|(ts, prog, name, params, starts)| ShardBody::Program { ts, prog, name, params, starts }),
            (any::<u64>(), prop::collection::vec((arb_handle(), arb_map()), 0..3))
                .prop_map(|(prog, hops)| ShardBody::Hop { prog, hops }),
            any::<u64>().prop_map(|prog| ShardBody::Done { prog }),
            arb_ts().prop_map(|threshold| ShardBody::Gc { threshold }),
        ]
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let corr = any::<u64>();
        prop_oneof![
            corr.prop_map(|corr| Message::BeginTx { corr }),
            any::<u64>().prop_map(|corr| Message::BeginTxReply { corr }),
            (any::<u64>(), arb_handle()).prop_map(|(corr, handle)| Message::TxRead { corr, handle }),
            (any::<u64>(), arb_handle(), prop::option::of(arb_record()), any::<u64>())
                .prop_map(|(corr, handle, record, version)| Message::TxReadReply { corr, handle, record, version }),
            (any::<u64>(), prop::collection::vec(arb_op(), 0..5), prop::collection::vec((arb_handle(), any::<u64>()), 0..3))
                .prop_map(|(corr, ops, reads)| Message::TxCommit { corr, ops, reads }),
            (any::<u64>(), arb_ts()).prop_map(|(corr, t)| Message::TxCommitReply { corr, outcome: CommitOutcome::Committed(t) }),
            (any::<u64>(), ".{0,10}").prop_map(|(corr, why)| Message::TxCommitReply {
                corr,
                outcome: CommitOutcome::Aborted(AbortReason::InvalidOperation(why)),
            }),
            (any::<u64>(), "[a-z_]{1,10}", prop::collection::vec(arb_handle(), 0..3), arb_map())
                .prop_map(|(corr, name, starts, params)| Message::SubmitProgram { corr, name, starts, params }),
            (any::<u64>(), prop::option::of(arb_ts()), arb_map())
                .prop_map(|(corr, ts, p)| Message::ProgramResult { corr, ts, result: Ok(p) }),
            (any::<u64>(), arb_handle()).prop_map(|(corr, h)| Message::ProgramResult {
                corr,
                ts: None,
                result: Err(ProgramFailure::NotFound(h)),
            }),
            any::<u64>().prop_map(|corr| Message::Unavailable { corr }),
            arb_ts().prop_map(|clock| Message::Announce { clock }),
            (any::<u16>(), any::<u64>(), any::<u64>(), arb_body())
                .prop_map(|(gk, epoch, seq, body)| Message::Channel { gk, epoch, seq, body }),
            (any::<u64>(), any::<u64>(), prop::collection::vec(arb_map(), 0..3), prop::collection::vec((arb_handle(), arb_map()), 0..3))
                .prop_map(|(epoch, prog, fragments, hops)| Message::StepReport { epoch, prog, fragments, hops }),
            arb_node().prop_map(|node| Message::Register { node }),
            arb_node().prop_map(|node| Message::Heartbeat { node }),
            (any::<u64>(), any::<bool>()).prop_map(|(epoch, a)| Message::View {
                epoch,
                phase: if a { ViewPhase::Activate } else { ViewPhase::Prepare },
            }),
            (any::<u64>(), arb_node()).prop_map(|(epoch, node)| Message::ViewAck {
                epoch,
                phase: ViewPhase::Prepare,
                node,
            }),
        ]
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        prop_oneof![
            arb_node().prop_map(Frame::Hello),
            arb_message().prop_map(Frame::Msg),
            ".{0,20}".prop_map(Frame::Error),
            (arb_ts(), any::<u64>()).prop_map(|(t, a)| Frame::Oracle(OracleRequest::CreateEvent(
                t,
                EventInfo { kind: EventKind::Nop, arrival: a }
            ))),
            (prop::collection::vec(arb_ts(), 0..3), prop::collection::vec(arb_ts(), 0..3))
                .prop_map(|(b, a)| Frame::Oracle(OracleRequest::AssignOrder(b, a))),
            (arb_ts(), arb_ts()).prop_map(|(a, b)| Frame::Oracle(OracleRequest::QueryOrder(a, b))),
            prop::collection::vec((arb_ts(), arb_ts()), 0..3)
                .prop_map(|p| Frame::Oracle(OracleRequest::OrderOrAssign(p, OrderPreference::ArrivalOrder))),
            arb_ts().prop_map(|t| Frame::Oracle(OracleRequest::GcEvents(t))),
            (arb_node(), any::<u64>(), arb_ts())
                .prop_map(|(n, e, t)| Frame::Oracle(OracleRequest::ReportWatermark(n, e, t))),
            Just(Frame::OracleReply(OracleResponse::Ack)),
            Just(Frame::OracleReply(OracleResponse::Order(OracleOrder::Unordered))),
            prop::collection::vec(0u8..4, 0..5).prop_map(|v| Frame::OracleReply(OracleResponse::Relations(
                v.into_iter()
                    .map(|x| [OrderRelation::Before, OrderRelation::After, OrderRelation::Equal, OrderRelation::Concurrent][x as usize])
                    .collect()
            ))),
            (arb_ts(), arb_ts()).prop_map(|(before, after)| Frame::OracleReply(OracleResponse::Failed(
                OracleError::Cycle { before, after }
            ))),
            (prop::collection::vec(arb_op(), 0..4), arb_ts()).prop_map(|(ops, ts)| Frame::Store(StoreRequest::Execute {
                ops,
                reads: vec![("a".into(), 3)],
                ts
            })),
            arb_handle().prop_map(|h| Frame::Store(StoreRequest::GetVertex(h))),
            any::<u16>().prop_map(|s| Frame::Store(StoreRequest::RestoreShard(s))),
            (any::<u64>(), prop::collection::btree_map(any::<u16>(), prop::collection::vec(arb_op(), 0..3), 0..3))
                .prop_map(|(index, shard_ops)| Frame::StoreReply(StoreResponse::Executed(Ok(CommitResult {
                    index,
                    shard_ops,
                    touched: vec!["x".into()],
                })))),
            (arb_handle(), arb_ts()).prop_map(|(handle, last_update)| Frame::StoreReply(StoreResponse::Executed(Err(
                StoreAbort::StaleTimestamp { handle, last_update }
            )))),
            (prop::option::of(arb_record()), any::<u64>()).prop_map(|(r, v)| Frame::StoreReply(StoreResponse::Vertex(r, v))),
            prop::option::of(any::<u16>()).prop_map(|s| Frame::StoreReply(StoreResponse::Shard(s))),
            prop::collection::vec(arb_record(), 0..3).prop_map(|r| Frame::StoreReply(StoreResponse::Records(r))),
        ]
    }

    proptest! {
        #[test]
        fn every_frame_roundtrips(f in arb_frame(), corr in any::<u64>()) {
            roundtrip(f, corr);
        }

        #[test]
        fn truncated_frames_never_decode(f in arb_frame(), cut in 1usize..64) {
            let bytes = encode(&f, 1);
            let body = &bytes[4..];
            if cut < body.len() {
                prop_assert!(decode(&body[..body.len() - cut]).is_err());
            }
        }
    }
}
