//! Cluster manager: membership, heartbeat failure detection and the epoch
//! barrier.
//!
//! A view change to epoch `n` runs in three rounds, each waiting for every
//! addressed server to acknowledge:
//!
//! 1. `Prepare(n)` to surviving gatekeepers, which stop admitting work.
//! 2. `Activate(n)` to every shard, which rebuilds from the backing store.
//! 3. `Activate(n)` to every gatekeeper, which resumes with a zeroed clock.
//!
//! Replacements for failed servers are requested when the change starts and
//! join the barrier. A failure detected mid-change restarts it at `n + 1`.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};

use crate::messages::{Message, Micros, NodeId, ViewPhase};
use crate::runtime::{Actor, Ctx, SpawnRequest};
use crate::timestamp::Epoch;

const CHECK: u64 = 1;

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub gatekeepers: u16,
    pub shards: u16,
    pub heartbeat_period: Micros,
    pub heartbeat_timeout: Micros,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            gatekeepers: 1,
            shards: 1,
            heartbeat_period: 100_000,
            heartbeat_timeout: 500_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Round {
    Prepare,
    ActivateShards,
    ActivateGatekeepers,
}

#[derive(Debug, Clone)]
struct Change {
    epoch: Epoch,
    round: Round,
    waiting: BTreeSet<NodeId>,
}

/// A completed view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterView {
    pub epoch: Epoch,
    pub gatekeepers: Vec<NodeId>,
    pub shards: Vec<NodeId>,
    pub installed_at: Micros,
}

pub struct ClusterManager {
    cfg: ManagerConfig,
    epoch: Epoch,
    last_seen: BTreeMap<NodeId, Micros>,
    failed: BTreeSet<NodeId>,
    change: Option<Change>,
    deferred: Vec<NodeId>,
    views: Vec<ClusterView>,
    failures: Vec<(Micros, NodeId)>,
}

impl ClusterManager {
    pub fn new(cfg: ManagerConfig) -> Self {
        ClusterManager {
            cfg,
            epoch: 0,
            last_seen: BTreeMap::new(),
            failed: BTreeSet::new(),
            change: None,
            deferred: Vec::new(),
            views: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn in_transition(&self) -> bool {
        self.change.is_some()
    }

    pub fn views(&self) -> &[ClusterView] {
        &self.views
    }

    pub fn failures(&self) -> &[(Micros, NodeId)] {
        &self.failures
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.last_seen.keys().copied()
    }

    fn gatekeepers(&self) -> impl Iterator<Item = NodeId> {
        (0..self.cfg.gatekeepers).map(NodeId::Gatekeeper)
    }

    fn shards(&self) -> impl Iterator<Item = NodeId> {
        (0..self.cfg.shards).map(NodeId::Shard)
    }

    fn servers(&self) -> Vec<NodeId> {
        self.gatekeepers().chain(self.shards()).collect()
    }

    fn register(&mut self, now: Micros, node: NodeId) {
        if self.change.is_some() && !self.failed.contains(&node) && !self.last_seen.contains_key(&node) {
            self.deferred.push(node);
            return;
        }
        self.last_seen.insert(node, now);
    }

    fn on_failure(&mut self, ctx: &mut Ctx<'_>, node: NodeId) {
        self.failures.push((ctx.now, node));
        self.failed.insert(node);
        self.last_seen.remove(&node);
        let epoch = self.change.as_ref().map_or(self.epoch, |c| c.epoch) + 1;
        self.begin(ctx, epoch);
    }

    fn begin(&mut self, ctx: &mut Ctx<'_>, epoch: Epoch) {
        for node in std::mem::take(&mut self.failed) {
            // The replacement counts as live from the moment it is requested;
            // if it never shows up the heartbeat timeout fires again.
            self.last_seen.insert(node, ctx.now);
            ctx.spawn(SpawnRequest { node, epoch });
        }
        let waiting: BTreeSet<NodeId> = self.gatekeepers().collect();
        for node in &waiting {
            ctx.send(
                *node,
                Message::View {
                    epoch,
                    phase: ViewPhase::Prepare,
                },
            );
        }
        self.change = Some(Change {
            epoch,
            round: Round::Prepare,
            waiting,
        });
    }

    fn on_ack(&mut self, ctx: &mut Ctx<'_>, epoch: Epoch, phase: ViewPhase, node: NodeId) {
        let Some(change) = self.change.as_mut() else {
            return;
        };
        if epoch != change.epoch {
            return;
        }
        let expected = match change.round {
            Round::Prepare => ViewPhase::Prepare,
            Round::ActivateShards | Round::ActivateGatekeepers => ViewPhase::Activate,
        };
        if phase != expected {
            return;
        }
        change.waiting.remove(&node);
        if !change.waiting.is_empty() {
            return;
        }
        let next = match change.round {
            Round::Prepare => Some((Round::ActivateShards, self.shards().collect::<Vec<_>>())),
            Round::ActivateShards => Some((
                Round::ActivateGatekeepers,
                self.gatekeepers().collect::<Vec<_>>(),
            )),
            Round::ActivateGatekeepers => None,
        };
        match next {
            Some((round, targets)) => {
                for node in &targets {
                    ctx.send(
                        *node,
                        Message::View {
                            epoch,
                            phase: ViewPhase::Activate,
                        },
                    );
                }
                let change = self.change.as_mut().expect("in transition");
                change.round = round;
                change.waiting = targets.into_iter().collect();
            }
            None => {
                self.change = None;
                self.epoch = epoch;
                self.views.push(ClusterView {
                    epoch,
                    gatekeepers: self.gatekeepers().collect(),
                    shards: self.shards().collect(),
                    installed_at: ctx.now,
                });
                for node in std::mem::take(&mut self.deferred) {
                    self.last_seen.insert(node, ctx.now);
                }
            }
        }
    }

    fn check(&mut self, ctx: &mut Ctx<'_>) {
        let timeout = self.cfg.heartbeat_timeout;
        let dead: Vec<NodeId> = self
            .servers()
            .into_iter()
            .filter(|n| {
                self.last_seen
                    .get(n)
                    .is_some_and(|t| ctx.now.saturating_sub(*t) > timeout)
            })
            .collect();
        for node in dead {
            self.on_failure(ctx, node);
        }
    }
}

impl Actor for ClusterManager {
    fn start(&mut self, ctx: &mut Ctx<'_>) {
        for node in self.servers() {
            self.last_seen.insert(node, ctx.now);
        }
        self.views.push(ClusterView {
            epoch: self.epoch,
            gatekeepers: self.gatekeepers().collect(),
            shards: self.shards().collect(),
            installed_at: ctx.now,
        });
        ctx.schedule(self.cfg.heartbeat_period.max(1), CHECK);
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, _from: NodeId, msg: Message) {
        match msg {
            Message::Register { node } => self.register(ctx.now, node),
            Message::Heartbeat { node } => {
                if let Some(t) = self.last_seen.get_mut(&node) {
                    *t = ctx.now;
                }
            }
            Message::ViewAck { epoch, phase, node } => self.on_ack(ctx, epoch, phase, node),
            _ => {}
        }
    }

    fn timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        if token == CHECK {
            self.check(ctx);
            ctx.schedule(self.cfg.heartbeat_period.max(1), CHECK);
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
