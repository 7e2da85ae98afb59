//! Runs each actor on its own OS thread.
//!
//! A [`Router`] moves messages between hosts; [`LocalRouter`] does it with
//! in-process channels, and the TCP runtime provides one backed by sockets.
//! Time is wall-clock microseconds since the runtime started.

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::{Actor, Ctx, Outbox, SpawnRequest};
use crate::messages::{Message, Micros, NodeId};

#[derive(Debug)]
pub enum Envelope {
    Deliver { from: NodeId, msg: Message },
    Stop,
}

pub trait Router: Send + Sync {
    /// Best-effort delivery; messages to unknown or dead nodes vanish.
    fn send(&self, from: NodeId, to: NodeId, msg: Message);
}

/// Channel-backed routing between hosts in one process.
#[derive(Default)]
pub struct LocalRouter {
    inboxes: RwLock<HashMap<NodeId, Sender<Envelope>>>,
}

impl LocalRouter {
    pub fn new() -> Arc<Self> {
        Arc::new(LocalRouter::default())
    }

    /// Creates (or replaces) the inbox for `node`.
    pub fn register(&self, node: NodeId) -> Receiver<Envelope> {
        let (tx, rx) = unbounded();
        self.inboxes.write().expect("router lock").insert(node, tx);
        rx
    }

    pub fn unregister(&self, node: NodeId) {
        self.inboxes.write().expect("router lock").remove(&node);
    }

    pub fn stop(&self, node: NodeId) {
        if let Some(tx) = self.inboxes.read().expect("router lock").get(&node) {
            let _ = tx.send(Envelope::Stop);
        }
    }
}

impl Router for LocalRouter {
    fn send(&self, from: NodeId, to: NodeId, msg: Message) {
        if let Some(tx) = self.inboxes.read().expect("router lock").get(&to) {
            let _ = tx.send(Envelope::Deliver { from, msg });
        }
    }
}

pub type SpawnHook = Arc<dyn Fn(SpawnRequest) + Send + Sync>;

#[derive(Clone)]
pub struct Clock {
    start: Instant,
}

impl Clock {
    pub fn new() -> Self {
        Clock {
            start: Instant::now(),
        }
    }

    pub fn now(&self) -> Micros {
        self.start.elapsed().as_micros() as Micros
    }
}

impl Default for Clock {
    fn default() -> Self {
        Clock::new()
    }
}

/// A running actor thread. The actor is returned by [`HostHandle::join`].
pub struct HostHandle {
    node: NodeId,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Box<dyn Actor>>>,
}

impl HostHandle {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn join(mut self) -> Box<dyn Actor> {
        self.request_stop();
        self.thread
            .take()
            .expect("joined once")
            .join()
            .expect("actor thread panicked")
    }
}

/// Drives `actor` from `inbox` on a new thread until stopped.
pub fn spawn_host(
    node: NodeId,
    mut actor: Box<dyn Actor>,
    inbox: Receiver<Envelope>,
    router: Arc<dyn Router>,
    clock: Clock,
    spawn_hook: Option<SpawnHook>,
) -> HostHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::Builder::new()
        .name(node.to_string())
        .spawn(move || {
            let mut timers: BinaryHeap<Reverse<(Micros, u64, u64)>> = BinaryHeap::new();
            let mut timer_seq = 0u64;
            let mut run = |actor: &mut Box<dyn Actor>,
                           timers: &mut BinaryHeap<Reverse<(Micros, u64, u64)>>,
                           f: &mut dyn FnMut(&mut Box<dyn Actor>, &mut Ctx<'_>)| {
                let now = clock.now();
                let mut out = Outbox::default();
                {
                    let mut ctx = Ctx::new(now, node, &mut out);
                    f(actor, &mut ctx);
                }
                for (to, msg) in out.messages {
                    router.send(node, to, msg);
                }
                for (delay, token) in out.timers {
                    timer_seq += 1;
                    timers.push(Reverse((now + delay, timer_seq, token)));
                }
                if let Some(hook) = &spawn_hook {
                    for req in out.spawns {
                        hook(req);
                    }
                }
            };
            run(&mut actor, &mut timers, &mut |a, ctx| a.start(ctx));
            while !flag.load(Ordering::SeqCst) {
                let now = clock.now();
                if let Some(Reverse((due, _, token))) = timers.peek().copied() {
                    if due <= now {
                        timers.pop();
                        run(&mut actor, &mut timers, &mut |a, ctx| a.timer(ctx, token));
                        continue;
                    }
                }
                let wait = timers
                    .peek()
                    .map(|Reverse((due, _, _))| due.saturating_sub(now))
                    .unwrap_or(50_000)
                    .min(50_000);
                match inbox.recv_timeout(Duration::from_micros(wait.max(1))) {
                    Ok(Envelope::Deliver { from, msg }) => {
                        let mut msg = Some(msg);
                        run(&mut actor, &mut timers, &mut |a, ctx| {
                            if let Some(m) = msg.take() {
                                a.handle(ctx, from, m);
                            }
                        });
                    }
                    Ok(Envelope::Stop) => break,
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            }
            actor
        })
        .expect("spawn actor thread");
    HostHandle {
        node,
        stop,
        thread: Some(thread),
    }
}

pub type Factory = Arc<dyn Fn(SpawnRequest) -> Option<Box<dyn Actor>> + Send + Sync>;

/// A set of actor threads wired through one [`LocalRouter`].
pub struct ThreadedCluster {
    router: Arc<LocalRouter>,
    clock: Clock,
    hosts: Arc<Mutex<BTreeMap<NodeId, HostHandle>>>,
    factory: Option<Factory>,
}

impl ThreadedCluster {
    pub fn new() -> Self {
        ThreadedCluster {
            router: LocalRouter::new(),
            clock: Clock::new(),
            hosts: Arc::new(Mutex::new(BTreeMap::new())),
            factory: None,
        }
    }

    /// Installs the constructor used when the manager asks for a
    /// replacement server.
    pub fn set_factory(&mut self, factory: Factory) {
        self.factory = Some(factory);
    }

    pub fn router(&self) -> Arc<LocalRouter> {
        self.router.clone()
    }

    pub fn clock(&self) -> Clock {
        self.clock.clone()
    }

    fn hook(&self) -> Option<SpawnHook> {
        let factory = self.factory.clone()?;
        let router = self.router.clone();
        let clock = self.clock.clone();
        let hosts = Arc::downgrade(&self.hosts);
        Some(Arc::new(move |req: SpawnRequest| {
            let Some(hosts) = hosts.upgrade() else {
                return;
            };
            if let Some(actor) = factory(req) {
                let inbox = router.register(req.node);
                let handle = spawn_host(
                    req.node,
                    actor,
                    inbox,
                    router.clone() as Arc<dyn Router>,
                    clock.clone(),
                    None,
                );
                if let Some(old) = hosts.lock().expect("hosts").insert(req.node, handle) {
                    old.request_stop();
                }
            }
        }))
    }

    pub fn add(&self, node: NodeId, actor: Box<dyn Actor>) {
        let inbox = self.router.register(node);
        let hook = if node == NodeId::Manager {
            self.hook()
        } else {
            None
        };
        let handle = spawn_host(
            node,
            actor,
            inbox,
            self.router.clone() as Arc<dyn Router>,
            self.clock.clone(),
            hook,
        );
        self.hosts.lock().expect("hosts").insert(node, handle);
    }

    /// Stops `node` abruptly: its inbox disappears and its thread exits.
    pub fn kill(&self, node: NodeId) {
        self.router.stop(node);
        self.router.unregister(node);
        if let Some(h) = self.hosts.lock().expect("hosts").remove(&node) {
            h.request_stop();
        }
    }

    /// Stops every actor and returns them for inspection.
    pub fn shutdown(self) -> BTreeMap<NodeId, Box<dyn Actor>> {
        let hosts = std::mem::take(&mut *self.hosts.lock().expect("hosts"));
        for node in hosts.keys() {
            self.router.stop(*node);
        }
        hosts.into_iter().map(|(n, h)| (n, h.join())).collect()
    }
}

impl Default for ThreadedCluster {
    fn default() -> Self {
        ThreadedCluster::new()
    }
}

/// A client endpoint on a [`LocalRouter`].
pub struct ChannelTransport {
    me: NodeId,
    router: Arc<LocalRouter>,
    inbox: Receiver<Envelope>,
}

impl ChannelTransport {
    pub fn new(me: NodeId, router: Arc<LocalRouter>) -> Self {
        let inbox = router.register(me);
        ChannelTransport { me, router, inbox }
    }
}

impl Drop for ChannelTransport {
    fn drop(&mut self) {
        self.router.unregister(self.me);
    }
}

impl crate::client::Transport for ChannelTransport {
    fn call(
        &mut self,
        to: NodeId,
        corr: u64,
        msg: Message,
        timeout: Duration,
    ) -> Result<Message, crate::client::ClientError> {
        self.router.send(self.me, to, msg);
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.inbox.recv_timeout(left) {
                Ok(Envelope::Deliver { msg, .. }) => {
                    if reply_corr(&msg) == Some(corr) {
                        return Ok(msg);
                    }
                }
                Ok(Envelope::Stop) | Err(RecvTimeoutError::Disconnected) => {
                    return Err(crate::client::ClientError::Transport("endpoint closed".into()))
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(crate::client::ClientError::Transport(format!(
                        "no reply from {to} within {timeout:?}"
                    )))
                }
            }
        }
    }
}

/// Correlation id of a reply to a client request.
pub fn reply_corr(msg: &Message) -> Option<u64> {
    match msg {
        Message::BeginTxReply { corr }
        | Message::TxReadReply { corr, .. }
        | Message::TxCommitReply { corr, .. }
        | Message::ProgramResult { corr, .. }
        | Message::Unavailable { corr } => Some(*corr),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::any::Any;

    struct Echo;

    impl Actor for Echo {
        fn start(&mut self, _ctx: &mut Ctx<'_>) {}

        fn handle(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
            if let Message::BeginTx { corr } = msg {
                ctx.send(from, Message::BeginTxReply { corr });
            }
        }

        fn timer(&mut self, _ctx: &mut Ctx<'_>, _token: u64) {}

        fn as_any(&self) -> &dyn Any {
            self
        }

        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    #[test]
    fn echo_roundtrip_over_threads() {
        let cluster = ThreadedCluster::new();
        cluster.add(NodeId::Gatekeeper(0), Box::new(Echo));
        let inbox = cluster.router().register(NodeId::Client(0));
        cluster
            .router()
            .send(NodeId::Client(0), NodeId::Gatekeeper(0), Message::BeginTx { corr: 9 });
        match inbox.recv_timeout(Duration::from_secs(5)).unwrap() {
            Envelope::Deliver { msg, .. } => assert_eq!(msg, Message::BeginTxReply { corr: 9 }),
            Envelope::Stop => panic!("unexpected stop"),
        }
        let actors = cluster.shutdown();
        assert_eq!(actors.len(), 1);
    }
}
