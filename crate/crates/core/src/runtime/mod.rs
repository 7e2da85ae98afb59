//! Actor plumbing shared by the runtimes.
//!
//! Every server is an [`Actor`]: a state machine fed one message or timer at
//! a time. Actors talk to the world only through [`Ctx`], so the same code
//! runs under the deterministic simulator, on threads, or over TCP.

pub mod sim;
pub mod tcp;
pub mod threaded;

use std::any::Any;

use crate::messages::{Message, Micros, NodeId};
use crate::timestamp::Epoch;

/// A request from the cluster manager to start a replacement server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpawnRequest {
    pub node: NodeId,
    pub epoch: Epoch,
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub messages: Vec<(NodeId, Message)>,
    pub timers: Vec<(Micros, u64)>,
    pub spawns: Vec<SpawnRequest>,
}

pub struct Ctx<'a> {
    pub now: Micros,
    pub me: NodeId,
    out: &'a mut Outbox,
}

impl<'a> Ctx<'a> {
    pub fn new(now: Micros, me: NodeId, out: &'a mut Outbox) -> Self {
        Ctx { now, me, out }
    }

    pub fn send(&mut self, to: NodeId, msg: Message) {
        self.out.messages.push((to, msg));
    }

    /// Fires `timer(token)` after `delay` microseconds.
    pub fn schedule(&mut self, delay: Micros, token: u64) {
        self.out.timers.push((delay, token));
    }

    pub fn spawn(&mut self, req: SpawnRequest) {
        self.out.spawns.push(req);
    }
}

pub trait Actor: Send {
    fn start(&mut self, ctx: &mut Ctx<'_>);
    fn handle(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message);
    fn timer(&mut self, ctx: &mut Ctx<'_>, token: u64);
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}
