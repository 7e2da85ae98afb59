//! Seeded discrete-event simulation.
//!
//! All actors share one logical clock. Deliveries and timers sit in a single
//! priority queue ordered by (instant, insertion number), and link latencies
//! come from a seeded RNG, so a seed fixes the whole run. Links are FIFO.
//!
//! Killing a node drops its timers and everything addressed to it; messages
//! it already sent stay in flight.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Actor, Ctx, Outbox, SpawnRequest};
use crate::messages::{Message, Micros, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    pub min_latency: Micros,
    pub max_latency: Micros,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            min_latency: 50,
            max_latency: 300,
        }
    }
}

enum Event {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Message,
    },
    Timer {
        node: NodeId,
        incarnation: u64,
        token: u64,
    },
    Kill(NodeId),
}

struct Slot {
    actor: Box<dyn Actor>,
    alive: bool,
    incarnation: u64,
}

pub type Spawner = Box<dyn FnMut(SpawnRequest) -> Option<Box<dyn Actor>>>;

pub struct Sim {
    now: Micros,
    cfg: SimConfig,
    rng: ChaCha8Rng,
    next_id: u64,
    queue: BinaryHeap<Reverse<(Micros, u64)>>,
    events: BTreeMap<u64, Event>,
    nodes: BTreeMap<NodeId, Slot>,
    links: BTreeMap<(NodeId, NodeId), Micros>,
    spawner: Option<Spawner>,
    delivered: BTreeMap<&'static str, u64>,
    dropped: u64,
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Self {
        Sim {
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            next_id: 0,
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
            spawner: None,
            delivered: BTreeMap::new(),
            dropped: 0,
        }
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn set_spawner(&mut self, spawner: Spawner) {
        self.spawner = Some(spawner);
    }

    /// Adds (or replaces) a node and runs its `start` hook.
    pub fn add(&mut self, node: NodeId, actor: Box<dyn Actor>) {
        let incarnation = self.nodes.get(&node).map_or(0, |s| s.incarnation + 1);
        self.nodes.insert(
            node,
            Slot {
                actor,
                alive: true,
                incarnation,
            },
        );
        let mut out = Outbox::default();
        {
            let slot = self.nodes.get_mut(&node).expect("just inserted");
            let mut ctx = Ctx::new(self.now, node, &mut out);
            slot.actor.start(&mut ctx);
        }
        self.dispatch(node, incarnation, out);
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.nodes.get(&node).is_some_and(|s| s.alive)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn kill(&mut self, node: NodeId) {
        if let Some(slot) = self.nodes.get_mut(&node) {
            slot.alive = false;
        }
    }

    pub fn kill_at(&mut self, node: NodeId, at: Micros) {
        self.push(at.max(self.now), Event::Kill(node));
    }

    pub fn actor<T: 'static>(&self, node: NodeId) -> Option<&T> {
        self.nodes
            .get(&node)
            .and_then(|s| s.actor.as_any().downcast_ref::<T>())
    }

    pub fn actor_mut<T: 'static>(&mut self, node: NodeId) -> Option<&mut T> {
        self.nodes
            .get_mut(&node)
            .and_then(|s| s.actor.as_any_mut().downcast_mut::<T>())
    }

    /// Injects a message from outside the simulation.
    pub fn send(&mut self, from: NodeId, to: NodeId, msg: Message) {
        self.route(from, to, msg);
    }

    /// Messages delivered so far, by kind.
    pub fn delivered(&self) -> &BTreeMap<&'static str, u64> {
        &self.delivered
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    fn push(&mut self, at: Micros, ev: Event) {
        let id = self.next_id;
        self.next_id += 1;
        self.events.insert(id, ev);
        self.queue.push(Reverse((at, id)));
    }

    fn route(&mut self, from: NodeId, to: NodeId, msg: Message) {
        let lat = self
            .rng
            .gen_range(self.cfg.min_latency..=self.cfg.max_latency.max(self.cfg.min_latency));
        let last = self.links.entry((from, to)).or_insert(0);
        let at = (self.now + lat).max(*last);
        *last = at;
        self.push(at, Event::Deliver { from, to, msg });
    }

    fn dispatch(&mut self, node: NodeId, incarnation: u64, out: Outbox) {
        for (to, msg) in out.messages {
            self.route(node, to, msg);
        }
        for (delay, token) in out.timers {
            self.push(
                self.now + delay,
                Event::Timer {
                    node,
                    incarnation,
                    token,
                },
            );
        }
        for req in out.spawns {
            let actor = self.spawner.as_mut().and_then(|f| f(req));
            if let Some(actor) = actor {
                self.add(req.node, actor);
            }
        }
    }

    /// Processes the next event. Returns false when nothing is pending.
    pub fn step(&mut self) -> bool {
        let Some(Reverse((at, id))) = self.queue.pop() else {
            return false;
        };
        self.now = self.now.max(at);
        let ev = self.events.remove(&id).expect("queued event");
        match ev {
            Event::Kill(node) => self.kill(node),
            Event::Deliver { from, to, msg } => {
                let Some(slot) = self.nodes.get_mut(&to) else {
                    self.dropped += 1;
                    return true;
                };
                if !slot.alive {
                    self.dropped += 1;
                    return true;
                }
                *self.delivered.entry(msg.kind()).or_default() += 1;
                let incarnation = slot.incarnation;
                let mut out = Outbox::default();
                {
                    let mut ctx = Ctx::new(self.now, to, &mut out);
                    slot.actor.handle(&mut ctx, from, msg);
                }
                self.dispatch(to, incarnation, out);
            }
            Event::Timer {
                node,
                incarnation,
                token,
            } => {
                let Some(slot) = self.nodes.get_mut(&node) else {
                    return true;
                };
                if !slot.alive || slot.incarnation != incarnation {
                    return true;
                }
                let mut out = Outbox::default();
                {
                    let mut ctx = Ctx::new(self.now, node, &mut out);
                    slot.actor.timer(&mut ctx, token);
                }
                self.dispatch(node, incarnation, out);
            }
        }
        true
    }

    /// Runs every event scheduled at or before `until`.
    pub fn run_until(&mut self, until: Micros) {
        while let Some(Reverse((at, _))) = self.queue.peek() {
            if *at > until {
                break;
            }
            self.step();
        }
        self.now = self.now.max(until);
    }

    /// Runs until `done` holds or simulated time passes `deadline`.
    /// Returns whether `done` held.
    pub fn run_while(&mut self, deadline: Micros, mut done: impl FnMut(&Sim) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            match self.queue.peek() {
                Some(Reverse((at, _))) if *at <= deadline => {
                    self.step();
                }
                _ => {
                    self.now = self.now.max(deadline);
                    return done(self);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::any::Any;

    /// Sends `count` pings to `peer`, one per millisecond, and records what
    /// it receives.
    struct Pinger {
        peer: NodeId,
        count: u64,
        got: Vec<(Micros, u64)>,
    }

    impl Actor for Pinger {
        fn start(&mut self, ctx: &mut Ctx<'_>) {
            ctx.schedule(1_000, 0);
        }

        fn handle(&mut self, ctx: &mut Ctx<'_>, _from: NodeId, msg: Message) {
            if let Message::Heartbeat { .. } = msg {
                self.got.push((ctx.now, self.got.len() as u64));
            }
        }

        fn timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
            if token < self.count {
                ctx.send(self.peer, Message::Heartbeat { node: ctx.me });
                ctx.schedule(1_000, token + 1);
            }
        }

        fn as_any(&self) -> &dyn Any {
            self
        }

        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    fn pinger(peer: NodeId, count: u64) -> Box<dyn Actor> {
        Box::new(Pinger {
            peer,
            count,
            got: Vec::new(),
        })
    }

    fn trace(seed: u64) -> Vec<(Micros, u64)> {
        let mut sim = Sim::new(SimConfig {
            seed,
            ..SimConfig::default()
        });
        sim.add(NodeId::Client(0), pinger(NodeId::Client(1), 20));
        sim.add(NodeId::Client(1), pinger(NodeId::Client(0), 20));
        sim.run_until(100_000);
        sim.actor::<Pinger>(NodeId::Client(1)).unwrap().got.clone()
    }

    #[test]
    fn same_seed_same_trace() {
        assert_eq!(trace(7), trace(7));
        assert_eq!(trace(7).len(), 20);
    }

    #[test]
    fn kill_drops_deliveries_and_timers() {
        let mut sim = Sim::new(SimConfig::default());
        sim.add(NodeId::Client(0), pinger(NodeId::Client(1), 100));
        sim.add(NodeId::Client(1), pinger(NodeId::Client(0), 100));
        sim.kill_at(NodeId::Client(1), 10_500);
        sim.run_until(200_000);
        let got = &sim.actor::<Pinger>(NodeId::Client(1)).unwrap().got;
        assert_eq!(got.len(), 10);
        // Client 1 stopped sending at its death.
        let got0 = sim.actor::<Pinger>(NodeId::Client(0)).unwrap().got.len();
        assert!(got0 <= 11, "{got0}");
        assert!(sim.dropped() > 0);
    }
}
