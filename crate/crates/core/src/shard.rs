//! Shards: per-gatekeeper queues merged into one execution order, the
//! multi-version graph partition, and node-program steps.
//!
//! Each gatekeeper channel delivers sequenced items. Timestamped items
//! (transactions, program announcements, NOPs) are executed in an order that
//! extends the vector-clock partial order; ties between concurrent heads are
//! broken by the timeline oracle. Control items (program hops, completions,
//! GC thresholds) take effect as soon as they reach the front of their
//! channel.
//!
//! A node program reads exactly the writes this shard executed before the
//! program's own position in the execution order.

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use crate::graph::MultiVersionGraph;
use crate::messages::{Message, Micros, NodeId, ProgramId, ShardBody, ViewPhase};
use crate::model::{Handle, ShardId, TxOp};
use crate::oracle::OrderPreference;
use crate::program::{Params, ProgState, ProgramRegistry, StepInput};
use crate::runtime::{Actor, Ctx};
use crate::services::{OracleService, StoreService};
use crate::timestamp::{Epoch, GatekeeperId, OrderRelation, VectorTimestamp};

const TICK: u64 = 1;
const PATIENCE: u64 = 2;
const RETRY: u64 = 3;

#[derive(Debug, Clone)]
pub struct ShardConfig {
    pub gatekeepers: u16,
    pub shards: u16,
    /// How long a transaction blocked only by concurrent NOP bounds waits
    /// for a newer NOP before asking the oracle.
    pub patience: Micros,
    pub heartbeat_period: Micros,
    pub preference: OrderPreference,
    pub gc_enabled: bool,
}

impl Default for ShardConfig {
    fn default() -> Self {
        ShardConfig {
            gatekeepers: 1,
            shards: 1,
            patience: 2_000,
            heartbeat_period: 100_000,
            preference: OrderPreference::ArrivalOrder,
            gc_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShardCounters {
    pub txs_applied: u64,
    pub programs_started: u64,
    pub steps_run: u64,
    pub nops_seen: u64,
    pub oracle_calls: u64,
    pub oracle_pairs: u64,
    pub cache_hits: u64,
    pub versions_reclaimed: u64,
    pub restores: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecKind {
    Transaction,
    Program(ProgramId),
}

/// One entry of the execution log: `ts` ran at `position` on `shard`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRecord {
    pub shard: ShardId,
    pub epoch: Epoch,
    pub position: u64,
    pub ts: VectorTimestamp,
    pub kind: ExecKind,
}

pub type ExecLog = Arc<Mutex<Vec<ExecRecord>>>;

/// Decided pairs, stored in both directions.
#[derive(Debug, Default)]
pub struct OrderCache {
    pairs: BTreeMap<(VectorTimestamp, VectorTimestamp), OrderRelation>,
}

impl OrderCache {
    pub fn get(&self, a: &VectorTimestamp, b: &VectorTimestamp) -> Option<OrderRelation> {
        self.pairs.get(&(a.clone(), b.clone())).copied()
    }

    pub fn insert(&mut self, a: &VectorTimestamp, b: &VectorTimestamp, rel: OrderRelation) {
        self.pairs.insert((a.clone(), b.clone()), rel);
        self.pairs.insert((b.clone(), a.clone()), rel.flip());
    }

    pub fn len(&self) -> usize {
        self.pairs.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn prune(&mut self, dead: impl Fn(&VectorTimestamp) -> bool) {
        self.pairs.retain(|(a, b), _| !dead(a) && !dead(b));
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Item {
    Tx {
        ts: VectorTimestamp,
        ops: Vec<TxOp>,
    },
    Program {
        ts: VectorTimestamp,
        prog: ProgramId,
        name: String,
        params: Params,
        starts: Vec<Handle>,
    },
    Nop(VectorTimestamp),
    Hop {
        prog: ProgramId,
        hops: Vec<(Handle, Params)>,
    },
    Done(ProgramId),
    Gc(VectorTimestamp),
}

impl Item {
    fn from_body(body: ShardBody) -> Item {
        match body {
            ShardBody::Tx { ts, ops } => Item::Tx { ts, ops },
            ShardBody::Nop { ts } => Item::Nop(ts),
            ShardBody::Program {
                ts,
                prog,
                name,
                params,
                starts,
            } => Item::Program {
                ts,
                prog,
                name,
                params,
                starts,
            },
            ShardBody::Hop { prog, hops } => Item::Hop { prog, hops },
            ShardBody::Done { prog } => Item::Done(prog),
            ShardBody::Gc { threshold } => Item::Gc(threshold),
        }
    }

    fn event_ts(&self) -> Option<&VectorTimestamp> {
        match self {
            Item::Tx { ts, .. } | Item::Program { ts, .. } => Some(ts),
            _ => None,
        }
    }
}

/// Items from one gatekeeper, repaired into sequence order.
#[derive(Debug, Default)]
pub struct GatekeeperQueue {
    next_seq: u64,
    early: BTreeMap<u64, Item>,
    items: VecDeque<Item>,
    /// Timestamp of the newest NOP popped from this queue while no event
    /// followed it; every later item from this gatekeeper is after it.
    floor: Option<VectorTimestamp>,
}

impl GatekeeperQueue {
    fn new() -> Self {
        GatekeeperQueue {
            next_seq: 1,
            ..Default::default()
        }
    }

    /// Accepts the item with sequence number `seq`; duplicates are dropped
    /// and gaps are held back until filled.
    fn offer(&mut self, seq: u64, item: Item) {
        if seq < self.next_seq {
            return;
        }
        self.early.insert(seq, item);
        while let Some(item) = self.early.remove(&self.next_seq) {
            self.items.push_back(item);
            self.next_seq += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn head_event(&self) -> Option<&VectorTimestamp> {
        self.items.front().and_then(Item::event_ts)
    }

    /// The earliest timestamp anything still to come from this gatekeeper
    /// can carry a bound for: its head event, or the last NOP.
    fn bound(&self) -> Option<&VectorTimestamp> {
        self.head_event().or(self.floor.as_ref())
    }
}

#[derive(Debug)]
struct LiveProgram {
    gk: GatekeeperId,
    name: String,
    position: u64,
    states: BTreeMap<Handle, ProgState>,
}

pub struct Shard {
    id: ShardId,
    cfg: ShardConfig,
    epoch: Epoch,
    graph: MultiVersionGraph,
    queues: Vec<GatekeeperQueue>,
    /// Channel traffic for epochs not yet activated here.
    future: Vec<(GatekeeperId, Epoch, u64, ShardBody)>,
    position: u64,
    /// Execution position of every write applied since the last restore.
    applied: BTreeMap<VectorTimestamp, u64>,
    programs: BTreeMap<ProgramId, LiveProgram>,
    /// Position of every program executed here, kept for replay checks
    /// while collection is disabled.
    program_positions: BTreeMap<VectorTimestamp, u64>,
    cache: OrderCache,
    gc_reports: BTreeMap<GatekeeperId, VectorTimestamp>,
    blocked_since: Option<Micros>,
    patience_armed: bool,
    retry_armed: bool,
    needs_restore: bool,
    store: Arc<dyn StoreService>,
    oracle: Arc<dyn OracleService>,
    registry: ProgramRegistry,
    exec_log: Option<ExecLog>,
    counters: ShardCounters,
}

enum Scan {
    Run(usize),
    Wait,
    Ask(Vec<(VectorTimestamp, VectorTimestamp)>),
}

impl Shard {
    pub fn new(
        id: ShardId,
        epoch: Epoch,
        cfg: ShardConfig,
        store: Arc<dyn StoreService>,
        oracle: Arc<dyn OracleService>,
        registry: ProgramRegistry,
    ) -> Self {
        Shard {
            id,
            epoch,
            graph: MultiVersionGraph::new(),
            queues: (0..cfg.gatekeepers).map(|_| GatekeeperQueue::new()).collect(),
            future: Vec::new(),
            position: 0,
            applied: BTreeMap::new(),
            programs: BTreeMap::new(),
            program_positions: BTreeMap::new(),
            cache: OrderCache::default(),
            gc_reports: BTreeMap::new(),
            blocked_since: None,
            patience_armed: false,
            retry_armed: false,
            needs_restore: false,
            store,
            oracle,
            registry,
            exec_log: None,
            counters: ShardCounters::default(),
            cfg,
        }
    }

    /// A shard standing in for a failed one; it loads its partition from
    /// the store when the manager activates `epoch`.
    pub fn replacement(
        id: ShardId,
        epoch: Epoch,
        cfg: ShardConfig,
        store: Arc<dyn StoreService>,
        oracle: Arc<dyn OracleService>,
        registry: ProgramRegistry,
    ) -> Self {
        let mut shard = Shard::new(id, epoch, cfg, store, oracle, registry);
        shard.needs_restore = true;
        shard
    }

    pub fn with_exec_log(mut self, log: ExecLog) -> Self {
        self.exec_log = Some(log);
        self
    }

    pub fn id(&self) -> ShardId {
        self.id
    }

    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn graph(&self) -> &MultiVersionGraph {
        &self.graph
    }

    pub fn counters(&self) -> ShardCounters {
        self.counters
    }

    pub fn cache(&self) -> &OrderCache {
        &self.cache
    }

    pub fn live_programs(&self) -> usize {
        self.programs.len()
    }

    pub fn queued(&self) -> usize {
        self.queues.iter().map(GatekeeperQueue::len).sum()
    }

    /// Position at which `ts` executed here, for writes and programs.
    pub fn position_of(&self, ts: &VectorTimestamp) -> Option<u64> {
        self.applied
            .get(ts)
            .or_else(|| self.program_positions.get(ts))
            .copied()
    }

    /// Whether a program executed at `program` sees the write `writer`.
    /// Writes restored from the store precede everything.
    pub fn visible_at(&self, program: u64, writer: &VectorTimestamp) -> bool {
        self.applied.get(writer).is_none_or(|p| *p < program)
    }

    /// Rebuilds the partition from the backing store and drops all queued
    /// and in-progress work.
    pub fn restore(&mut self) -> Result<usize, crate::services::ServiceError> {
        let records = self.store.restore_shard(self.id)?;
        let base = VectorTimestamp::zero(self.epoch, 0, self.cfg.gatekeepers as usize);
        self.graph = MultiVersionGraph::restore(&records, &base);
        self.queues = (0..self.cfg.gatekeepers)
            .map(|_| GatekeeperQueue::new())
            .collect();
        self.applied.clear();
        self.program_positions.clear();
        self.programs.clear();
        self.cache.clear();
        self.gc_reports.clear();
        self.blocked_since = None;
        self.counters.restores += 1;
        Ok(records.len())
    }

    /// Queues a channel item. Returns false when the item belongs to a
    /// different epoch and was buffered or dropped.
    pub fn enqueue(&mut self, gk: GatekeeperId, epoch: Epoch, seq: u64, body: ShardBody) -> bool {
        if epoch > self.epoch {
            self.future.push((gk, epoch, seq, body));
            return false;
        }
        if epoch < self.epoch || gk as usize >= self.queues.len() {
            return false;
        }
        self.queues[gk as usize].offer(seq, Item::from_body(body));
        true
    }

    fn relation(&mut self, a: &VectorTimestamp, b: &VectorTimestamp) -> OrderRelation {
        match a.relation(b) {
            OrderRelation::Concurrent => match self.cache.get(a, b) {
                Some(rel) => {
                    self.counters.cache_hits += 1;
                    rel
                }
                None => OrderRelation::Concurrent,
            },
            rel => rel,
        }
    }

    /// Applies every control item and superseded NOP at queue fronts.
    fn drain_fronts(&mut self, ctx: &mut Ctx<'_>) {
        for g in 0..self.queues.len() {
            loop {
                let Some(front) = self.queues[g].items.front() else {
                    break;
                };
                if front.event_ts().is_some() {
                    break;
                }
                let item = self.queues[g].items.pop_front().expect("front exists");
                match item {
                    Item::Nop(ts) => {
                        self.counters.nops_seen += 1;
                        self.queues[g].floor = Some(ts);
                    }
                    Item::Hop { prog, hops } => self.run_hops(ctx, prog, hops),
                    Item::Done(prog) => {
                        self.programs.remove(&prog);
                    }
                    Item::Gc(threshold) => self.on_gc(g as GatekeeperId, threshold),
                    Item::Tx { .. } | Item::Program { .. } => unreachable!("events stay queued"),
                }
            }
        }
    }

    fn scan(&mut self, now: Micros) -> Scan {
        let bounds: Vec<Option<VectorTimestamp>> =
            self.queues.iter().map(|q| q.bound().cloned()).collect();
        let mut unknown = Vec::new();
        let mut urgent = false;
        let mut candidates: Vec<(usize, VectorTimestamp)> = self
            .queues
            .iter()
            .enumerate()
            .filter_map(|(g, q)| q.head_event().map(|t| (g, t.clone())))
            .collect();
        candidates.sort_by_key(|(_, t)| t.clock_sum());
        for (g, c) in &candidates {
            let mut ready = true;
            for (k, bound) in bounds.iter().enumerate() {
                if k == *g {
                    continue;
                }
                let Some(b) = bound else {
                    ready = false;
                    continue;
                };
                match self.relation(c, b) {
                    OrderRelation::Before => {}
                    OrderRelation::Concurrent => {
                        ready = false;
                        if self.queues[k].head_event().is_some() {
                            urgent = true;
                        }
                        unknown.push((c.clone(), b.clone()));
                    }
                    _ => ready = false,
                }
            }
            if ready {
                return Scan::Run(*g);
            }
        }
        if unknown.is_empty() {
            self.blocked_since = None;
            return Scan::Wait;
        }
        let since = *self.blocked_since.get_or_insert(now);
        if urgent || now.saturating_sub(since) >= self.cfg.patience {
            unknown.sort();
            unknown.dedup();
            Scan::Ask(unknown)
        } else {
            Scan::Wait
        }
    }

    /// Executes everything that is ready.
    pub fn step_all(&mut self, ctx: &mut Ctx<'_>) {
        loop {
            self.drain_fronts(ctx);
            match self.scan(ctx.now) {
                Scan::Run(g) => {
                    self.blocked_since = None;
                    self.execute_head(ctx, g);
                }
                Scan::Wait => {
                    if let Some(since) = self.blocked_since {
                        if !self.patience_armed {
                            self.patience_armed = true;
                            let due = (since + self.cfg.patience).saturating_sub(ctx.now);
                            ctx.schedule(due.max(1), PATIENCE);
                        }
                    }
                    return;
                }
                Scan::Ask(pairs) => {
                    self.counters.oracle_calls += 1;
                    self.counters.oracle_pairs += pairs.len() as u64;
                    match self.oracle.order_or_assign(&pairs, self.cfg.preference) {
                        Ok(rels) => {
                            for ((a, b), rel) in pairs.iter().zip(rels) {
                                self.cache.insert(a, b, rel);
                            }
                        }
                        Err(_) => {
                            // Stall rather than guess; try again shortly.
                            if !self.retry_armed {
                                self.retry_armed = true;
                                ctx.schedule(self.cfg.patience.max(1), RETRY);
                            }
                            return;
                        }
                    }
                }
            }
        }
    }

    fn log_exec(&self, ts: &VectorTimestamp, kind: ExecKind) {
        if let Some(log) = &self.exec_log {
            log.lock().expect("exec log").push(ExecRecord {
                shard: self.id,
                epoch: self.epoch,
                position: self.position,
                ts: ts.clone(),
                kind,
            });
        }
    }

    fn execute_head(&mut self, ctx: &mut Ctx<'_>, g: usize) {
        let item = self.queues[g].items.pop_front().expect("head exists");
        self.queues[g].floor = None;
        match item {
            Item::Tx { ts, ops } => {
                self.apply_transaction(&ops, &ts);
            }
            Item::Program {
                ts,
                prog,
                name,
                params,
                starts,
            } => {
                self.counters.programs_started += 1;
                self.log_exec(&ts, ExecKind::Program(prog));
                self.program_positions.insert(ts, self.position);
                self.programs.insert(
                    prog,
                    LiveProgram {
                        gk: g as GatekeeperId,
                        name,
                        position: self.position,
                        states: BTreeMap::new(),
                    },
                );
                self.position += 1;
                if !starts.is_empty() {
                    let hops = starts.into_iter().map(|h| (h, params.clone())).collect();
                    self.run_hops(ctx, prog, hops);
                }
            }
            _ => unreachable!("only events reach execution"),
        }
    }

    /// Applies a committed transaction's operations at `ts`. Idempotent.
    pub fn apply_transaction(&mut self, ops: &[TxOp], ts: &VectorTimestamp) {
        if self.applied.contains_key(ts) {
            return;
        }
        self.log_exec(ts, ExecKind::Transaction);
        for op in ops {
            self.graph.apply(op, ts);
        }
        self.applied.insert(ts.clone(), self.position);
        self.position += 1;
        self.counters.txs_applied += 1;
    }

    fn run_hops(&mut self, ctx: &mut Ctx<'_>, prog: ProgramId, hops: Vec<(Handle, Params)>) {
        let Some(live) = self.programs.get(&prog) else {
            return;
        };
        let Ok(program) = self.registry.get(&live.name) else {
            return;
        };
        let at = live.position;
        let gk = live.gk;
        let mut fragments = Vec::new();
        let mut next = Vec::new();
        let mut views = Vec::with_capacity(hops.len());
        {
            let applied = &self.applied;
            let sees = |w: &VectorTimestamp| applied.get(w).is_none_or(|p| *p < at);
            for (h, _) in &hops {
                views.push(self.graph.view(h, &sees));
            }
        }
        let live = self.programs.get_mut(&prog).expect("checked above");
        for ((h, params), view) in hops.iter().zip(views) {
            let state = live.states.entry(h.clone()).or_default();
            let out = program.step(StepInput {
                handle: h,
                vertex: view.as_ref(),
                state,
                params,
            });
            if let Some(f) = out.fragment {
                fragments.push(f);
            }
            next.extend(out.hops);
        }
        self.counters.steps_run += hops.len() as u64;
        ctx.send(
            NodeId::Gatekeeper(gk),
            Message::StepReport {
                epoch: self.epoch,
                prog,
                fragments,
                hops: next,
            },
        );
    }

    fn on_gc(&mut self, gk: GatekeeperId, threshold: VectorTimestamp) {
        if !self.cfg.gc_enabled || threshold.epoch != self.epoch {
            return;
        }
        self.gc_reports.insert(gk, threshold);
        if self.gc_reports.len() < self.queues.len() {
            return;
        }
        let mut reports = std::mem::take(&mut self.gc_reports).into_values();
        let first = reports.next().expect("one report per gatekeeper");
        let min = reports.fold(first, |acc, t| acc.pointwise_min(&t));
        let dead = |t: &VectorTimestamp| t.happens_before(&min);
        self.counters.versions_reclaimed += self.graph.gc(&dead) as u64;
        let oldest = self
            .programs
            .values()
            .map(|p| p.position)
            .min()
            .unwrap_or(self.position);
        self.applied.retain(|t, p| *p >= oldest || !dead(t));
        self.program_positions.retain(|t, _| !dead(t));
        self.cache.prune(dead);
        if let Some(frontier) = self.frontier() {
            let _ = self
                .oracle
                .report_watermark(NodeId::Shard(self.id), self.epoch, &frontier);
        }
    }

    /// Pointwise minimum of the queue bounds: every pair this shard may
    /// still ask the oracle about is at or above it.
    fn frontier(&self) -> Option<VectorTimestamp> {
        let mut acc: Option<VectorTimestamp> = None;
        for q in &self.queues {
            let b = q.bound()?;
            acc = Some(match acc {
                None => b.clone(),
                Some(a) => a.pointwise_min(b),
            });
        }
        acc
    }

    fn activate(&mut self, ctx: &mut Ctx<'_>, epoch: Epoch) {
        if epoch < self.epoch {
            return;
        }
        if epoch > self.epoch || self.needs_restore {
            let prev = self.epoch;
            self.epoch = epoch;
            if self.restore().is_err() {
                // Store unreachable: stay in the old epoch and let the
                // manager retry the view.
                self.epoch = prev;
                return;
            }
            self.needs_restore = false;
            let pending = std::mem::take(&mut self.future);
            for (gk, e, seq, body) in pending {
                self.enqueue(gk, e, seq, body);
            }
        }
        ctx.send(
            NodeId::Manager,
            Message::ViewAck {
                epoch,
                phase: ViewPhase::Activate,
                node: NodeId::Shard(self.id),
            },
        );
        self.step_all(ctx);
    }
}

impl Actor for Shard {
    fn start(&mut self, ctx: &mut Ctx<'_>) {
        ctx.send(
            NodeId::Manager,
            Message::Register {
                node: NodeId::Shard(self.id),
            },
        );
        ctx.schedule(self.cfg.heartbeat_period.max(1), TICK);
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, _from: NodeId, msg: Message) {
        match msg {
            Message::Channel {
                gk,
                epoch,
                seq,
                body,
            } => {
                if self.enqueue(gk, epoch, seq, body) {
                    self.step_all(ctx);
                }
            }
            Message::View {
                epoch,
                phase: ViewPhase::Activate,
            } => self.activate(ctx, epoch),
            _ => {}
        }
    }

    fn timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        match token {
            TICK => {
                ctx.send(
                    NodeId::Manager,
                    Message::Heartbeat {
                        node: NodeId::Shard(self.id),
                    },
                );
                ctx.schedule(self.cfg.heartbeat_period.max(1), TICK);
            }
            PATIENCE => {
                self.patience_armed = false;
                self.step_all(ctx);
            }
            RETRY => {
                self.retry_armed = false;
                self.step_all(ctx);
            }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Outbox;
    use crate::services::{LocalOracle, LocalStore, OracleHost};
    use crate::oracle::{EventInfo, EventKind, TimelineOracle};
    use crate::store::BackingStore;

    fn ts(issuer: u16, clocks: &[u64]) -> VectorTimestamp {
        VectorTimestamp::new(0, issuer, clocks.to_vec())
    }

    struct Rig {
        shard: Shard,
        oracle: LocalOracle,
        now: Micros,
    }

    impl Rig {
        fn new(gatekeepers: u16) -> Rig {
            let store = LocalStore::new(BackingStore::in_memory(1));
            let oracle = LocalOracle::new(OracleHost::new(TimelineOracle::new(), 2, false));
            let cfg = ShardConfig {
                gatekeepers,
                patience: 100,
                gc_enabled: false,
                ..ShardConfig::default()
            };
            let shard = Shard::new(
                0,
                0,
                cfg,
                Arc::new(store),
                Arc::new(oracle.clone()),
                ProgramRegistry::with_stock(),
            )
            .with_exec_log(Arc::new(Mutex::new(Vec::new())));
            Rig {
                shard,
                oracle,
                now: 0,
            }
        }

        fn register(&self, t: &VectorTimestamp, arrival: u64) {
            self.oracle
                .create_event(
                    t,
                    EventInfo {
                        kind: EventKind::Transaction,
                        arrival,
                    },
                )
                .unwrap();
        }

        fn deliver(&mut self, gk: u16, seq: u64, body: ShardBody) -> Outbox {
            let mut out = Outbox::default();
            let mut ctx = Ctx::new(self.now, NodeId::Shard(0), &mut out);
            self.shard.handle(
                &mut ctx,
                NodeId::Gatekeeper(gk),
                Message::Channel {
                    gk,
                    epoch: 0,
                    seq,
                    body,
                },
            );
            out
        }

        fn fire(&mut self, token: u64) {
            let mut out = Outbox::default();
            let mut ctx = Ctx::new(self.now, NodeId::Shard(0), &mut out);
            self.shard.timer(&mut ctx, token);
        }

        fn executed(&self) -> Vec<VectorTimestamp> {
            self.shard
                .exec_log
                .as_ref()
                .unwrap()
                .lock()
                .unwrap()
                .iter()
                .map(|r| r.ts.clone())
                .collect()
        }
    }

    fn create(h: &str) -> Vec<TxOp> {
        vec![TxOp::CreateVertex { handle: h.into() }]
    }

    fn tx(t: &VectorTimestamp, h: &str) -> ShardBody {
        ShardBody::Tx {
            ts: t.clone(),
            ops: create(h),
        }
    }

    #[test]
    fn fifo_repair_delivers_in_sequence() {
        let mut q = GatekeeperQueue::new();
        q.offer(1, Item::Nop(ts(0, &[1])));
        q.offer(3, Item::Nop(ts(0, &[3])));
        q.offer(2, Item::Nop(ts(0, &[2])));
        q.offer(2, Item::Nop(ts(0, &[9])));
        let got: Vec<_> = q.items.iter().cloned().collect();
        assert_eq!(
            got,
            vec![
                Item::Nop(ts(0, &[1])),
                Item::Nop(ts(0, &[2])),
                Item::Nop(ts(0, &[3]))
            ]
        );
    }

    #[test]
    fn single_gatekeeper_executes_in_channel_order() {
        let mut rig = Rig::new(1);
        let a = ts(0, &[1]);
        let b = ts(0, &[2]);
        rig.deliver(0, 2, tx(&b, "b"));
        assert!(rig.executed().is_empty());
        rig.deliver(0, 1, tx(&a, "a"));
        assert_eq!(rig.executed(), vec![a, b]);
        assert_eq!(rig.shard.counters().oracle_calls, 0);
    }

    #[test]
    fn vector_clock_minimum_runs_without_oracle() {
        let mut rig = Rig::new(2);
        let t1 = ts(0, &[1, 1]);
        let t2 = ts(1, &[3, 4]);
        rig.deliver(1, 1, tx(&t2, "b"));
        rig.deliver(0, 1, tx(&t1, "a"));
        assert_eq!(rig.executed(), vec![t1.clone()]);
        // t2 waits for a bound from gatekeeper 0 that follows it.
        rig.deliver(0, 2, ShardBody::Nop { ts: ts(0, &[5, 4]) });
        assert_eq!(rig.executed(), vec![t1, t2]);
        assert_eq!(rig.shard.counters().oracle_calls, 0);
    }

    #[test]
    fn concurrent_heads_resolved_by_one_oracle_call() {
        let mut rig = Rig::new(2);
        let a = ts(0, &[1, 0]);
        let b = ts(1, &[0, 1]);
        rig.register(&a, 2);
        rig.register(&b, 1);
        rig.deliver(0, 1, tx(&a, "a"));
        rig.deliver(1, 1, tx(&b, "b"));
        // b arrived first at the store, so it goes first.
        assert_eq!(rig.executed(), vec![b.clone()]);
        assert_eq!(rig.shard.counters().oracle_calls, 1);
        assert_eq!(rig.shard.cache().get(&a, &b), Some(OrderRelation::After));
    }

    #[test]
    fn nop_bound_waits_for_patience_then_asks() {
        let mut rig = Rig::new(2);
        let a = ts(0, &[1, 0]);
        let n = ts(1, &[0, 1]);
        rig.register(&a, 1);
        rig.register(&n, 0);
        rig.deliver(0, 1, tx(&a, "a"));
        rig.deliver(1, 1, ShardBody::Nop { ts: n.clone() });
        assert!(rig.executed().is_empty());
        assert_eq!(rig.shard.counters().oracle_calls, 0);
        // A newer NOP that saw `a` releases it without the oracle.
        let n2 = ts(1, &[1, 2]);
        rig.register(&n2, 9);
        rig.deliver(1, 2, ShardBody::Nop { ts: n2 });
        assert_eq!(rig.executed(), vec![a]);
        assert_eq!(rig.shard.counters().oracle_calls, 0);

        let b = ts(0, &[2, 0]);
        rig.register(&b, 5);
        rig.deliver(0, 2, tx(&b, "b"));
        assert_eq!(rig.executed().len(), 1);
        rig.now = 150;
        rig.fire(PATIENCE);
        assert_eq!(rig.shard.counters().oracle_calls, 1);
        assert_eq!(rig.executed().len(), 2);
    }

    #[test]
    fn apply_is_idempotent() {
        let mut rig = Rig::new(1);
        let t = ts(0, &[1]);
        rig.shard.apply_transaction(&create("x"), &t);
        let h = rig.shard.graph().state_hash();
        rig.shard.apply_transaction(&create("x"), &t);
        assert_eq!(rig.shard.graph().state_hash(), h);
    }

    #[test]
    fn program_sees_only_writes_executed_before_it() {
        let mut rig = Rig::new(1);
        rig.deliver(0, 1, tx(&ts(0, &[1]), "a"));
        let out = rig.deliver(
            0,
            2,
            ShardBody::Program {
                ts: ts(0, &[2]),
                prog: 7,
                name: "get_node".into(),
                params: Params::new(),
                starts: vec!["b".into()],
            },
        );
        rig.deliver(0, 3, tx(&ts(0, &[3]), "b"));
        let Message::StepReport { fragments, .. } = &out.messages[0].1 else {
            panic!("expected a step report");
        };
        // b was created after the program, so the program does not find it.
        assert!(fragments.iter().all(|f| !f.contains_key("vertex")));
        assert_eq!(rig.shard.live_programs(), 1);
        rig.deliver(0, 4, ShardBody::Done { prog: 7 });
        assert_eq!(rig.shard.live_programs(), 0);
    }
}
