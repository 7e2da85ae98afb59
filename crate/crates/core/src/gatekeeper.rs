//! Gatekeepers: timestamp assignment, the transaction commit path, clock
//! announces, NOPs, node-program coordination and GC watermarks.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::messages::{
    AbortReason, CommitOutcome, Message, Micros, NodeId, ProgramFailure, ProgramId, ShardBody,
    ViewPhase,
};
use crate::model::{Handle, ShardId, TxOp};
use crate::oracle::{EventInfo, EventKind};
use crate::program::{merge_fragments, Params, ProgramError, ProgramRegistry};
use crate::runtime::{Actor, Ctx};
use crate::services::{OracleService, StoreService};
use crate::store::StoreAbort;
use crate::timestamp::{Epoch, GatekeeperId, VectorTimestamp};

const TICK: u64 = 1;

#[derive(Debug, Clone)]
pub struct GatekeeperConfig {
    pub gatekeepers: u16,
    pub shards: u16,
    /// Clock announce period; `None` disables announces.
    pub tau: Option<Micros>,
    pub nop_period: Micros,
    pub gc_period: Micros,
    pub heartbeat_period: Micros,
    pub gc_enabled: bool,
}

impl Default for GatekeeperConfig {
    fn default() -> Self {
        GatekeeperConfig {
            gatekeepers: 1,
            shards: 1,
            tau: Some(10_000),
            nop_period: 1_000,
            gc_period: 50_000,
            heartbeat_period: 100_000,
            gc_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatekeeperCounters {
    pub announces_sent: u64,
    pub nops_sent: u64,
    pub committed: u64,
    pub aborted_conflict: u64,
    pub aborted_invalid: u64,
    pub aborted_stale: u64,
    pub programs_started: u64,
    pub programs_finished: u64,
    pub oracle_registrations: u64,
}

#[derive(Debug)]
struct Ongoing {
    ts: VectorTimestamp,
    client: NodeId,
    corr: u64,
    name: String,
    outstanding: u64,
    fragments: Vec<Params>,
}

pub struct Gatekeeper {
    id: GatekeeperId,
    cfg: GatekeeperConfig,
    epoch: Epoch,
    clock: VectorTimestamp,
    paused: bool,
    store: Arc<dyn StoreService>,
    oracle: Arc<dyn OracleService>,
    registry: ProgramRegistry,
    seq: Vec<u64>,
    last_send: Vec<Micros>,
    last_announce: Micros,
    last_gc: Micros,
    last_heartbeat: Micros,
    ongoing: BTreeMap<ProgramId, Ongoing>,
    next_prog: u64,
    shard_cache: BTreeMap<Handle, ShardId>,
    counters: GatekeeperCounters,
}

impl Gatekeeper {
    pub fn new(
        id: GatekeeperId,
        epoch: Epoch,
        cfg: GatekeeperConfig,
        store: Arc<dyn StoreService>,
        oracle: Arc<dyn OracleService>,
        registry: ProgramRegistry,
    ) -> Self {
        let shards = cfg.shards as usize;
        Gatekeeper {
            id,
            clock: VectorTimestamp::zero(epoch, id, cfg.gatekeepers as usize),
            epoch,
            paused: false,
            store,
            oracle,
            registry,
            seq: vec![0; shards],
            last_send: vec![0; shards],
            last_announce: 0,
            last_gc: 0,
            last_heartbeat: 0,
            ongoing: BTreeMap::new(),
            next_prog: 0,
            shard_cache: BTreeMap::new(),
            counters: GatekeeperCounters::default(),
            cfg,
        }
    }

    /// A gatekeeper standing in for a failed one. It admits no work until
    /// the manager activates `epoch`.
    pub fn replacement(
        id: GatekeeperId,
        epoch: Epoch,
        cfg: GatekeeperConfig,
        store: Arc<dyn StoreService>,
        oracle: Arc<dyn OracleService>,
        registry: ProgramRegistry,
    ) -> Self {
        let mut gk = Gatekeeper::new(id, epoch, cfg, store, oracle, registry);
        gk.paused = true;
        gk
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn id(&self) -> GatekeeperId {
        self.id
    }

    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn clock(&self) -> &VectorTimestamp {
        &self.clock
    }

    pub fn counters(&self) -> GatekeeperCounters {
        self.counters
    }

    pub fn ongoing_programs(&self) -> usize {
        self.ongoing.len()
    }

    pub fn assign_timestamp(&mut self) -> VectorTimestamp {
        self.clock = self.clock.increment_local();
        self.clock.clone()
    }

    /// Merges a peer's announced clock; announces from other epochs are
    /// dropped.
    pub fn observe(&mut self, announced: &VectorTimestamp) {
        if let Ok(merged) = self.clock.merge(announced) {
            self.clock = merged;
        }
    }

    fn tick_interval(&self) -> Micros {
        let mut t = self.cfg.nop_period.max(1);
        if let Some(tau) = self.cfg.tau {
            t = t.min(tau.max(1));
        }
        t
    }

    fn send_channel(&mut self, ctx: &mut Ctx<'_>, shard: ShardId, body: ShardBody) {
        let s = shard as usize;
        self.seq[s] += 1;
        self.last_send[s] = ctx.now;
        ctx.send(
            NodeId::Shard(shard),
            Message::Channel {
                gk: self.id,
                epoch: self.epoch,
                seq: self.seq[s],
                body,
            },
        );
    }

    fn register_event(&mut self, ts: &VectorTimestamp, kind: EventKind, arrival: u64) {
        self.counters.oracle_registrations += 1;
        // The oracle is a linearizable service that must not lose
        // registrations; a failure here is a deployment error.
        if let Err(e) = self.oracle.create_event(ts, EventInfo { kind, arrival }) {
            panic!("gatekeeper {}: oracle registration failed: {e}", self.id);
        }
    }

    fn shard_of(&mut self, h: &str) -> Option<ShardId> {
        if let Some(s) = self.shard_cache.get(h) {
            return Some(*s);
        }
        let s = self.store.get_shard(h).ok().flatten()?;
        self.shard_cache.insert(h.to_owned(), s);
        Some(s)
    }

    fn commit(
        &mut self,
        ctx: &mut Ctx<'_>,
        ops: Vec<TxOp>,
        reads: Vec<(Handle, u64)>,
    ) -> CommitOutcome {
        let ts = self.assign_timestamp();
        let result = match self.store.execute(&ops, &reads, &ts) {
            Ok(r) => r,
            Err(_) => return CommitOutcome::Aborted(AbortReason::Unavailable),
        };
        match result {
            Ok(commit) => {
                self.counters.committed += 1;
                if !commit.shard_ops.is_empty() {
                    self.register_event(&ts, EventKind::Transaction, commit.index);
                }
                for (shard, ops) in commit.shard_ops {
                    self.send_channel(
                        ctx,
                        shard,
                        ShardBody::Tx {
                            ts: ts.clone(),
                            ops,
                        },
                    );
                }
                CommitOutcome::Committed(ts)
            }
            Err(StoreAbort::Conflict(_)) => {
                self.counters.aborted_conflict += 1;
                CommitOutcome::Aborted(AbortReason::Conflict)
            }
            Err(StoreAbort::InvalidOperation(why)) => {
                self.counters.aborted_invalid += 1;
                CommitOutcome::Aborted(AbortReason::InvalidOperation(why))
            }
            Err(StoreAbort::StaleTimestamp { last_update, .. }) => {
                self.counters.aborted_stale += 1;
                // Learn the newer write so the client's retry draws a
                // timestamp that follows it.
                self.observe(&last_update);
                CommitOutcome::Aborted(AbortReason::StaleTimestamp)
            }
        }
    }

    fn submit_program(
        &mut self,
        ctx: &mut Ctx<'_>,
        client: NodeId,
        corr: u64,
        name: String,
        starts: Vec<Handle>,
        params: Params,
    ) -> Result<(), ProgramFailure> {
        let program = self.registry.get(&name).map_err(failure)?;
        program.validate(&starts, &params).map_err(failure)?;
        let mut by_shard: BTreeMap<ShardId, Vec<Handle>> = BTreeMap::new();
        for h in &starts {
            let s = self
                .shard_of(h)
                .ok_or_else(|| ProgramFailure::NotFound(h.clone()))?;
            by_shard.entry(s).or_default().push(h.clone());
        }
        let arrival = self
            .store
            .commit_index()
            .map_err(|_| ProgramFailure::Unavailable)?;
        let ts = self.assign_timestamp();
        self.register_event(&ts, EventKind::Program, arrival);
        let prog = ((self.id as u64) << 48) | self.next_prog;
        self.next_prog += 1;
        self.counters.programs_started += 1;
        for shard in 0..self.cfg.shards {
            let starts = by_shard.get(&shard).cloned().unwrap_or_default();
            self.send_channel(
                ctx,
                shard,
                ShardBody::Program {
                    ts: ts.clone(),
                    prog,
                    name: name.clone(),
                    params: params.clone(),
                    starts,
                },
            );
        }
        self.ongoing.insert(
            prog,
            Ongoing {
                ts,
                client,
                corr,
                name,
                outstanding: by_shard.len() as u64,
                fragments: Vec::new(),
            },
        );
        if by_shard.is_empty() {
            self.finish_program(ctx, prog);
        }
        Ok(())
    }

    fn on_step_report(
        &mut self,
        ctx: &mut Ctx<'_>,
        prog: ProgramId,
        fragments: Vec<Params>,
        hops: Vec<(Handle, Params)>,
    ) {
        if !self.ongoing.contains_key(&prog) {
            return;
        }
        let mut by_shard: BTreeMap<ShardId, Vec<(Handle, Params)>> = BTreeMap::new();
        for (h, p) in hops {
            if let Some(s) = self.shard_of(&h) {
                by_shard.entry(s).or_default().push((h, p));
            }
        }
        let spawned = by_shard.len() as u64;
        for (shard, hops) in by_shard {
            self.send_channel(ctx, shard, ShardBody::Hop { prog, hops });
        }
        let done = {
            let entry = self.ongoing.get_mut(&prog).expect("checked above");
            entry.fragments.extend(fragments);
            entry.outstanding = entry.outstanding + spawned - 1;
            entry.outstanding == 0
        };
        if done {
            self.finish_program(ctx, prog);
        }
    }

    fn finish_program(&mut self, ctx: &mut Ctx<'_>, prog: ProgramId) {
        let Some(entry) = self.ongoing.remove(&prog) else {
            return;
        };
        self.counters.programs_finished += 1;
        let result = self
            .registry
            .get(&entry.name)
            .and_then(|p| merge_fragments(p.as_ref(), entry.fragments))
            .map_err(failure);
        for shard in 0..self.cfg.shards {
            self.send_channel(ctx, shard, ShardBody::Done { prog });
        }
        ctx.send(
            entry.client,
            Message::ProgramResult {
                corr: entry.corr,
                ts: Some(entry.ts),
                result,
            },
        );
    }

    fn abort_programs(&mut self, ctx: &mut Ctx<'_>) {
        for (_, entry) in std::mem::take(&mut self.ongoing) {
            ctx.send(
                entry.client,
                Message::ProgramResult {
                    corr: entry.corr,
                    ts: Some(entry.ts),
                    result: Err(ProgramFailure::Unavailable),
                },
            );
        }
    }

    /// Periodic work: announces, NOPs, GC watermarks and heartbeats.
    pub fn tick(&mut self, ctx: &mut Ctx<'_>) {
        if ctx.now.saturating_sub(self.last_heartbeat) >= self.cfg.heartbeat_period {
            self.last_heartbeat = ctx.now;
            ctx.send(
                NodeId::Manager,
                Message::Heartbeat {
                    node: NodeId::Gatekeeper(self.id),
                },
            );
        }
        if self.paused {
            return;
        }
        if let Some(tau) = self.cfg.tau {
            if ctx.now.saturating_sub(self.last_announce) >= tau {
                self.last_announce = ctx.now;
                for peer in 0..self.cfg.gatekeepers {
                    if peer != self.id {
                        self.counters.announces_sent += 1;
                        ctx.send(
                            NodeId::Gatekeeper(peer),
                            Message::Announce {
                                clock: self.clock.clone(),
                            },
                        );
                    }
                }
            }
        }
        let idle: Vec<ShardId> = (0..self.cfg.shards)
            .filter(|s| ctx.now.saturating_sub(self.last_send[*s as usize]) >= self.cfg.nop_period)
            .collect();
        if !idle.is_empty() {
            if let Ok(arrival) = self.store.commit_index() {
                let ts = self.assign_timestamp();
                self.register_event(&ts, EventKind::Nop, arrival);
                for shard in idle {
                    self.counters.nops_sent += 1;
                    self.send_channel(ctx, shard, ShardBody::Nop { ts: ts.clone() });
                }
            }
        }
        if self.cfg.gc_enabled && ctx.now.saturating_sub(self.last_gc) >= self.cfg.gc_period {
            self.last_gc = ctx.now;
            let watermark = self
                .ongoing
                .values()
                .map(|o| &o.ts)
                .min_by_key(|ts| ts.local())
                .cloned()
                .unwrap_or_else(|| self.clock.clone());
            for shard in 0..self.cfg.shards {
                self.send_channel(
                    ctx,
                    shard,
                    ShardBody::Gc {
                        threshold: watermark.clone(),
                    },
                );
            }
            let _ = self.oracle.report_watermark(
                NodeId::Gatekeeper(self.id),
                self.epoch,
                &watermark,
            );
        }
    }

    fn on_view(&mut self, ctx: &mut Ctx<'_>, epoch: Epoch, phase: ViewPhase) {
        match phase {
            ViewPhase::Prepare => {
                if epoch < self.epoch || (epoch == self.epoch && !self.paused) {
                    return;
                }
                self.paused = true;
                self.abort_programs(ctx);
                ctx.send(
                    NodeId::Manager,
                    Message::ViewAck {
                        epoch,
                        phase,
                        node: NodeId::Gatekeeper(self.id),
                    },
                );
            }
            ViewPhase::Activate => {
                if epoch < self.epoch {
                    return;
                }
                if epoch > self.epoch {
                    self.abort_programs(ctx);
                    self.epoch = epoch;
                    self.clock = VectorTimestamp::zero(epoch, self.id, self.cfg.gatekeepers as usize);
                    self.seq.iter_mut().for_each(|s| *s = 0);
                    self.last_send.iter_mut().for_each(|t| *t = 0);
                }
                self.paused = false;
                ctx.send(
                    NodeId::Manager,
                    Message::ViewAck {
                        epoch,
                        phase,
                        node: NodeId::Gatekeeper(self.id),
                    },
                );
            }
        }
    }
}

fn failure(e: ProgramError) -> ProgramFailure {
    e.into()
}

impl Actor for Gatekeeper {
    fn start(&mut self, ctx: &mut Ctx<'_>) {
        ctx.send(
            NodeId::Manager,
            Message::Register {
                node: NodeId::Gatekeeper(self.id),
            },
        );
        self.last_heartbeat = ctx.now;
        self.last_announce = ctx.now;
        self.last_gc = ctx.now;
        let interval = self.tick_interval();
        ctx.schedule(interval, TICK);
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        if self.paused {
            if let Some(corr) = msg.request_corr() {
                ctx.send(from, Message::Unavailable { corr });
                return;
            }
        }
        match msg {
            Message::BeginTx { corr } => ctx.send(from, Message::BeginTxReply { corr }),
            Message::TxRead { corr, handle } => match self.store.get_vertex(&handle) {
                Ok((record, version)) => ctx.send(
                    from,
                    Message::TxReadReply {
                        corr,
                        handle,
                        record,
                        version,
                    },
                ),
                Err(_) => ctx.send(from, Message::Unavailable { corr }),
            },
            Message::TxCommit { corr, ops, reads } => {
                let outcome = self.commit(ctx, ops, reads);
                ctx.send(from, Message::TxCommitReply { corr, outcome });
            }
            Message::SubmitProgram {
                corr,
                name,
                starts,
                params,
            } => {
                if let Err(failure) = self.submit_program(ctx, from, corr, name, starts, params) {
                    ctx.send(
                        from,
                        Message::ProgramResult {
                            corr,
                            ts: None,
                            result: Err(failure),
                        },
                    );
                }
            }
            Message::Announce { clock } => self.observe(&clock),
            Message::StepReport {
                epoch,
                prog,
                fragments,
                hops,
            } => {
                if epoch == self.epoch {
                    self.on_step_report(ctx, prog, fragments, hops);
                }
            }
            Message::View { epoch, phase, .. } => self.on_view(ctx, epoch, phase),
            _ => {}
        }
    }

    fn timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        if token == TICK {
            self.tick(ctx);
            let interval = self.tick_interval();
            ctx.schedule(interval, TICK);
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
