//! Closed-loop client actor that issues workload operations and records
//! what it observed.

use std::any::Any;
use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::history::{HistoryLog, HistoryRecord, OpResult, Operation};
use super::workload::{Generator, OpKind};
use crate::messages::{AbortReason, CommitOutcome, Message, Micros, NodeId, ProgramFailure};
use crate::model::{Handle, Target, TxOp, VertexRecord, VertexState};
use crate::program::Params;
use crate::runtime::{Actor, Ctx};

const NEXT: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct DriverConfig {
    pub gatekeepers: u16,
    /// Operations to issue before stopping.
    pub ops: usize,
    pub think: Micros,
    pub timeout: Micros,
    pub backoff: Micros,
    /// Attempts per operation when aborted or refused.
    pub attempts: u32,
    /// Share of vertex picks drawn from the first `hot` vertices.
    pub hot: usize,
    pub hot_share: f64,
    pub start_at: Micros,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            gatekeepers: 1,
            ops: 100,
            think: 500,
            timeout: 200_000,
            backoff: 2_000,
            attempts: 20,
            hot: 0,
            hot_share: 0.0,
            start_at: 1_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DriverStats {
    pub issued: u64,
    pub completed: u64,
    pub committed: u64,
    pub aborted: u64,
    pub programs: u64,
    pub unavailable: u64,
    pub timeouts: u64,
}

#[derive(Debug)]
enum Phase {
    Idle,
    Begin,
    Reading(usize),
    Committing,
    Program,
}

#[derive(Debug)]
struct Current {
    kind: OpKind,
    invoke: Micros,
    attempt: u32,
    reads: Vec<Handle>,
    observed: Vec<Option<VertexRecord>>,
    versions: Vec<(Handle, u64)>,
    writes: Vec<TxOp>,
    program: Option<(String, Vec<Handle>, Params)>,
}

pub struct Driver {
    id: u32,
    cfg: DriverConfig,
    rng: ChaCha8Rng,
    gen: Generator,
    script: Option<VecDeque<OpKind>>,
    vertices: Arc<Vec<Handle>>,
    gk: u16,
    corr: u64,
    phase: Phase,
    current: Option<Current>,
    issued: usize,
    fresh: u64,
    history: HistoryLog,
    stats: DriverStats,
}

impl Driver {
    pub fn new(
        id: u32,
        cfg: DriverConfig,
        rng: ChaCha8Rng,
        gen: Generator,
        vertices: Arc<Vec<Handle>>,
    ) -> Self {
        let gk = (id % cfg.gatekeepers.max(1) as u32) as u16;
        Driver {
            id,
            cfg,
            rng,
            gen,
            script: None,
            vertices,
            gk,
            corr: 0,
            phase: Phase::Idle,
            current: None,
            issued: 0,
            fresh: 0,
            history: HistoryLog::new(),
            stats: DriverStats::default(),
        }
    }

    /// Issues exactly `kinds`, in order, instead of dealing from the mix.
    pub fn with_script(mut self, kinds: Vec<OpKind>) -> Self {
        self.cfg.ops = kinds.len();
        self.script = Some(kinds.into());
        self
    }

    pub fn history(&self) -> &HistoryLog {
        &self.history
    }

    pub fn stats(&self) -> DriverStats {
        self.stats
    }

    pub fn finished(&self) -> bool {
        self.issued >= self.cfg.ops && matches!(self.phase, Phase::Idle)
    }

    fn gatekeeper(&self) -> NodeId {
        NodeId::Gatekeeper(self.gk)
    }

    fn rotate(&mut self) {
        self.gk = (self.gk + 1) % self.cfg.gatekeepers.max(1);
    }

    fn pick(&mut self) -> Handle {
        let n = self.vertices.len();
        let hot = self.cfg.hot.min(n);
        let i = if hot > 0 && self.rng.gen_bool(self.cfg.hot_share) {
            self.rng.gen_range(0..hot)
        } else {
            self.rng.gen_range(0..n)
        };
        self.vertices[i].clone()
    }

    fn fresh_handle(&mut self, prefix: &str) -> Handle {
        self.fresh += 1;
        format!("{prefix}{}_{}", self.id, self.fresh)
    }

    fn request(&mut self, ctx: &mut Ctx<'_>, msg: impl FnOnce(u64) -> Message) {
        self.corr += 1;
        let corr = self.corr;
        ctx.send(self.gatekeeper(), msg(corr));
        ctx.schedule(self.cfg.timeout, corr);
    }

    fn schedule_next(&mut self, ctx: &mut Ctx<'_>, delay: Micros) {
        self.phase = Phase::Idle;
        ctx.schedule(delay.max(1), NEXT);
    }

    fn start_next(&mut self, ctx: &mut Ctx<'_>) {
        if self.issued >= self.cfg.ops {
            return;
        }
        self.issued += 1;
        self.stats.issued += 1;
        let kind = match self.script.as_mut() {
            Some(s) => s.pop_front().expect("script covers ops"),
            None => self.gen.next(&mut self.rng),
        };
        self.current = Some(self.plan(kind, ctx.now, 0));
        self.send_current(ctx);
    }

    fn plan(&mut self, kind: OpKind, now: Micros, attempt: u32) -> Current {
        let mut cur = Current {
            kind,
            invoke: now,
            attempt,
            reads: Vec::new(),
            observed: Vec::new(),
            versions: Vec::new(),
            writes: Vec::new(),
            program: None,
        };
        let one = |name: &str, v: Handle, params: Params| Some((name.to_string(), vec![v], params));
        match kind {
            OpKind::GetNode | OpKind::GetEdges | OpKind::CountEdges | OpKind::Clustering => {
                let v = self.pick();
                cur.program = one(kind.name(), v, Params::new());
            }
            OpKind::Reachability => {
                let (a, b) = (self.pick(), self.pick());
                cur.program = one("reachability", a, [("to".to_string(), b)].into());
            }
            OpKind::SwapProbe => {
                cur.program = one("reachability", "n1".into(), [("to".to_string(), "n7".to_string())].into());
            }
            OpKind::ReadTx => {
                let n = self.rng.gen_range(1..=3);
                cur.reads = (0..n).map(|_| self.pick()).collect();
            }
            OpKind::CreateEdge | OpKind::DeleteEdge | OpKind::SetProperty | OpKind::CreateVertex => {
                cur.reads = vec![self.pick()];
            }
            OpKind::MultiWrite => {
                cur.reads = vec![self.pick(), self.pick()];
            }
            OpKind::Swap => {
                cur.reads = vec!["n3".into(), "n5".into()];
            }
        }
        cur.reads.sort();
        cur.reads.dedup();
        cur
    }

    fn send_current(&mut self, ctx: &mut Ctx<'_>) {
        let cur = self.current.as_ref().expect("current operation");
        if let Some((name, starts, params)) = cur.program.clone() {
            self.phase = Phase::Program;
            self.request(ctx, |corr| Message::SubmitProgram {
                corr,
                name,
                starts,
                params,
            });
        } else {
            self.phase = Phase::Begin;
            self.request(ctx, |corr| Message::BeginTx { corr });
        }
    }

    /// Decides the writes from what the reads returned.
    fn writes(&mut self) -> Vec<TxOp> {
        let cur = self.current.as_ref().expect("current operation");
        let kind = cur.kind;
        let first = cur.observed.first().cloned().flatten().filter(|r| !r.deleted);
        let live_edges = |r: &Option<VertexRecord>| -> Vec<(Handle, Handle)> {
            r.as_ref()
                .filter(|r| !r.deleted)
                .map(|r| {
                    r.edges
                        .values()
                        .filter(|e| !e.deleted)
                        .map(|e| (e.handle.clone(), e.dst.clone()))
                        .collect()
                })
                .unwrap_or_default()
        };
        let src = cur.reads.first().cloned().unwrap_or_default();
        match kind {
            OpKind::CreateEdge => {
                if first.is_none() {
                    return Vec::new();
                }
                let dst = self.pick();
                let handle = self.fresh_handle("e");
                vec![TxOp::CreateEdge { handle, src, dst }]
            }
            OpKind::DeleteEdge => {
                let edges = live_edges(&cur.observed[0]);
                if edges.is_empty() {
                    return Vec::new();
                }
                let (handle, _) = edges[self.rng.gen_range(0..edges.len())].clone();
                vec![TxOp::DeleteEdge { handle, src }]
            }
            OpKind::SetProperty => {
                if first.is_none() {
                    return Vec::new();
                }
                let value = self.rng.gen_range(0..1000).to_string();
                vec![TxOp::SetProperty {
                    target: Target::Vertex(src),
                    key: "p".into(),
                    value,
                }]
            }
            OpKind::CreateVertex => {
                let handle = self.fresh_handle("c");
                let mut ops = vec![TxOp::CreateVertex {
                    handle: handle.clone(),
                }];
                if first.is_some() {
                    ops.push(TxOp::CreateEdge {
                        handle: self.fresh_handle("e"),
                        src,
                        dst: handle,
                    });
                }
                ops
            }
            OpKind::MultiWrite => {
                let value = self.rng.gen_range(0..1000).to_string();
                let cur = self.current.as_ref().expect("current operation");
                cur.reads
                    .iter()
                    .zip(&cur.observed)
                    .filter(|(_, r)| r.as_ref().is_some_and(|r| !r.deleted))
                    .map(|(h, _)| TxOp::SetProperty {
                        target: Target::Vertex(h.clone()),
                        key: "q".into(),
                        value: value.clone(),
                    })
                    .collect()
            }
            OpKind::Swap => {
                let n3 = live_edges(&cur.observed[0]);
                let n5 = live_edges(&cur.observed[1]);
                let e35 = n3.iter().find(|(_, d)| d == "n5").map(|(h, _)| h.clone());
                let e57 = n5.iter().find(|(_, d)| d == "n7").map(|(h, _)| h.clone());
                let mut ops = Vec::new();
                match (e35, e57) {
                    (Some(h), _) => {
                        ops.push(TxOp::DeleteEdge { handle: h, src: "n3".into() });
                        ops.push(TxOp::CreateEdge {
                            handle: self.fresh_handle("s"),
                            src: "n5".into(),
                            dst: "n7".into(),
                        });
                    }
                    (None, Some(h)) => {
                        ops.push(TxOp::DeleteEdge { handle: h, src: "n5".into() });
                        ops.push(TxOp::CreateEdge {
                            handle: self.fresh_handle("s"),
                            src: "n3".into(),
                            dst: "n5".into(),
                        });
                    }
                    (None, None) => {}
                }
                ops
            }
            _ => Vec::new(),
        }
    }

    fn observed_states(cur: &Current) -> Vec<Option<VertexState>> {
        cur.observed
            .iter()
            .map(|r| r.as_ref().and_then(VertexRecord::live_state))
            .collect()
    }

    fn record(&mut self, now: Micros, result: OpResult) {
        let cur = self.current.as_ref().expect("current operation");
        let op = match &cur.program {
            Some((name, starts, params)) => Operation::Program {
                name: name.clone(),
                starts: starts.clone(),
                params: params.clone(),
            },
            None => Operation::Tx {
                reads: cur.reads.clone(),
                writes: cur.writes.clone(),
            },
        };
        self.history.push(HistoryRecord {
            client: self.id,
            op,
            invoke: cur.invoke,
            response: now.max(cur.invoke + 1),
            result,
        });
    }

    /// Retries the current operation from scratch, or gives up after the
    /// attempt budget.
    fn retry(&mut self, ctx: &mut Ctx<'_>, rotate: bool, keep_invoke: bool) {
        if rotate {
            self.rotate();
        }
        let cur = self.current.take().expect("current operation");
        if cur.attempt + 1 >= self.cfg.attempts {
            self.stats.completed += 1;
            self.schedule_next(ctx, self.cfg.think);
            return;
        }
        let next = Current {
            invoke: if keep_invoke { cur.invoke } else { ctx.now + self.cfg.backoff },
            attempt: cur.attempt + 1,
            reads: cur.reads,
            observed: Vec::new(),
            versions: Vec::new(),
            writes: Vec::new(),
            program: cur.program,
            kind: cur.kind,
        };
        self.current = Some(next);
        self.phase = Phase::Idle;
        // Token 0 is never a correlation id.
        ctx.schedule(self.cfg.backoff.max(1), 0);
    }

    fn on_reply(&mut self, ctx: &mut Ctx<'_>, msg: Message) {
        match (&self.phase, msg) {
            (_, Message::Unavailable { .. }) => {
                self.stats.unavailable += 1;
                self.retry(ctx, true, true);
            }
            (Phase::Begin, Message::BeginTxReply { .. }) => self.read_next(ctx, 0),
            (Phase::Reading(i), Message::TxReadReply { record, version, .. }) => {
                let i = *i;
                let cur = self.current.as_mut().expect("current operation");
                cur.observed.push(record);
                cur.versions.push((cur.reads[i].clone(), version));
                self.read_next(ctx, i + 1);
            }
            (Phase::Committing, Message::TxCommitReply { outcome, .. }) => {
                let reads = Self::observed_states(self.current.as_ref().expect("current operation"));
                match outcome {
                    CommitOutcome::Committed(ts) => {
                        self.stats.committed += 1;
                        self.stats.completed += 1;
                        self.record(ctx.now, OpResult::Committed { ts, reads });
                        self.current = None;
                        self.schedule_next(ctx, self.cfg.think);
                    }
                    CommitOutcome::Aborted(AbortReason::Unavailable) => {
                        self.stats.unavailable += 1;
                        self.retry(ctx, true, true);
                    }
                    CommitOutcome::Aborted(reason) => {
                        self.stats.aborted += 1;
                        self.record(ctx.now, OpResult::Aborted(reason.clone()));
                        if reason.retryable() {
                            self.retry(ctx, false, false);
                        } else {
                            self.stats.completed += 1;
                            self.current = None;
                            self.schedule_next(ctx, self.cfg.think);
                        }
                    }
                }
            }
            (Phase::Program, Message::ProgramResult { ts, result, .. }) => {
                if result == Err(ProgramFailure::Unavailable) {
                    self.stats.unavailable += 1;
                    self.retry(ctx, true, true);
                    return;
                }
                self.stats.programs += 1;
                self.stats.completed += 1;
                self.record(ctx.now, OpResult::Program { ts, result });
                self.current = None;
                self.schedule_next(ctx, self.cfg.think);
            }
            _ => {}
        }
    }

    fn read_next(&mut self, ctx: &mut Ctx<'_>, i: usize) {
        let cur = self.current.as_ref().expect("current operation");
        if i < cur.reads.len() {
            let handle = cur.reads[i].clone();
            self.phase = Phase::Reading(i);
            self.request(ctx, |corr| Message::TxRead { corr, handle });
            return;
        }
        let writes = self.writes();
        let cur = self.current.as_mut().expect("current operation");
        cur.writes = writes.clone();
        let reads = cur.versions.clone();
        self.phase = Phase::Committing;
        self.request(ctx, |corr| Message::TxCommit {
            corr,
            ops: writes,
            reads,
        });
    }

    fn on_timeout(&mut self, ctx: &mut Ctx<'_>) {
        self.stats.timeouts += 1;
        match self.phase {
            Phase::Committing => {
                let reads = Self::observed_states(self.current.as_ref().expect("current operation"));
                self.record(ctx.now, OpResult::Unknown { reads });
                self.stats.completed += 1;
                self.current = None;
                self.rotate();
                self.schedule_next(ctx, self.cfg.think);
            }
            Phase::Idle => {}
            _ => self.retry(ctx, true, true),
        }
    }
}

impl Actor for Driver {
    fn start(&mut self, ctx: &mut Ctx<'_>) {
        ctx.schedule(self.cfg.start_at.max(1), NEXT);
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, _from: NodeId, msg: Message) {
        let Some(corr) = crate::runtime::threaded::reply_corr(&msg) else {
            return;
        };
        if corr != self.corr || matches!(self.phase, Phase::Idle) {
            return;
        }
        self.on_reply(ctx, msg);
    }

    fn timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        match token {
            NEXT => self.start_next(ctx),
            0 => {
                if self.current.is_some() && matches!(self.phase, Phase::Idle) {
                    self.send_current(ctx);
                }
            }
            corr if corr == self.corr && !matches!(self.phase, Phase::Idle) => self.on_timeout(ctx),
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
