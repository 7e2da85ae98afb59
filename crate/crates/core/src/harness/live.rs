//! Clusters over real TCP sockets and a closed-loop load driver for them.

use std::net::TcpListener;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::{ClusterConfig, ConfigError};
use super::graphs::SeedGraph;
use super::workload::{Generator, OpKind, WorkloadMix};
use crate::client::{Client, ClientError, RetryPolicy};
use crate::cluster::{ClusterManager, ManagerConfig};
use crate::gatekeeper::{Gatekeeper, GatekeeperConfig};
use crate::messages::NodeId;
use crate::model::{Handle, Target};
use crate::oracle::{OrderPreference, TimelineOracle};
use crate::program::{Params, ProgramRegistry};
use crate::runtime::tcp::{
    ephemeral, serve_actor, serve_services, AddressBook, RemoteOracle, RemoteStore, ServiceHost,
    TcpHost, TcpTransport,
};
use crate::runtime::Actor;
use crate::services::{LocalOracle, LocalStore, OracleHost, OracleService, StoreService};
use crate::shard::{Shard, ShardConfig};
use crate::store::wal::FileLog;
use crate::store::BackingStore;
use crate::timestamp::VectorTimestamp;

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("store: {0}")]
    Store(String),
    #[error("preload rejected: {0}")]
    Preload(String),
}

pub fn gatekeeper_config(cfg: &ClusterConfig) -> GatekeeperConfig {
    GatekeeperConfig {
        gatekeepers: cfg.gatekeepers,
        shards: cfg.shards,
        tau: cfg.tau_micros(),
        nop_period: cfg.nop_ms.max(1) * 1_000,
        gc_period: 100_000,
        heartbeat_period: cfg.heartbeat_ms * 1_000,
        gc_enabled: cfg.gc,
    }
}

pub fn shard_config(cfg: &ClusterConfig) -> ShardConfig {
    ShardConfig {
        gatekeepers: cfg.gatekeepers,
        shards: cfg.shards,
        patience: 2 * cfg.nop_ms.max(1) * 1_000,
        heartbeat_period: cfg.heartbeat_ms * 1_000,
        preference: OrderPreference::ArrivalOrder,
        gc_enabled: cfg.gc,
    }
}

pub fn manager_config(cfg: &ClusterConfig) -> ManagerConfig {
    ManagerConfig {
        gatekeepers: cfg.gatekeepers,
        shards: cfg.shards,
        heartbeat_period: cfg.heartbeat_ms * 1_000,
        heartbeat_timeout: cfg.heartbeat_timeout_ms * 1_000,
    }
}

/// Opens the backing store, persistent when `data_dir` is set.
pub fn open_store(cfg: &ClusterConfig) -> Result<BackingStore, LiveError> {
    match &cfg.data_dir {
        Some(dir) => {
            let log = FileLog::open(dir, true)?;
            BackingStore::open(Box::new(log), cfg.shards, 1_000).map_err(|e| LiveError::Store(e.to_string()))
        }
        None => Ok(BackingStore::in_memory(cfg.shards)),
    }
}

pub fn new_oracle(cfg: &ClusterConfig) -> LocalOracle {
    LocalOracle::new(OracleHost::new(
        TimelineOracle::new(),
        (cfg.gatekeepers + cfg.shards) as usize,
        cfg.gc,
    ))
}

/// Writes `graph` straight into the store, stamped before every
/// gatekeeper timestamp.
pub fn preload(store: &LocalStore, graph: &SeedGraph, gatekeepers: u16) -> Result<(), LiveError> {
    let ops = graph.ops();
    if ops.is_empty() {
        return Ok(());
    }
    let zero = VectorTimestamp::zero(0, 0, gatekeepers as usize);
    store
        .lock()
        .execute(&ops, &[], &zero)
        .map(|_| ())
        .map_err(|e| LiveError::Preload(format!("{e:?}")))
}

fn remote(cfg: &ClusterConfig) -> Result<(Arc<dyn StoreService>, Arc<dyn OracleService>), LiveError> {
    Ok((
        Arc::new(RemoteStore::new(cfg.addr(NodeId::Store)?)),
        Arc::new(RemoteOracle::new(cfg.addr(NodeId::Oracle)?)),
    ))
}

/// Builds the actor for `node` against the remote store and oracle named
/// in `cfg`. Shards load their partition before returning.
pub fn build_server(cfg: &ClusterConfig, node: NodeId) -> Result<Box<dyn Actor>, LiveError> {
    let registry = ProgramRegistry::with_stock();
    match node {
        NodeId::Gatekeeper(i) => {
            let (store, oracle) = remote(cfg)?;
            Ok(Box::new(Gatekeeper::new(i, 0, gatekeeper_config(cfg), store, oracle, registry)))
        }
        NodeId::Shard(i) => {
            let (store, oracle) = remote(cfg)?;
            let mut shard = Shard::new(i, 0, shard_config(cfg), store, oracle, registry);
            shard.restore().map_err(|e| LiveError::Store(e.to_string()))?;
            Ok(Box::new(shard))
        }
        NodeId::Manager => Ok(Box::new(ClusterManager::new(manager_config(cfg)))),
        other => Err(LiveError::Config(ConfigError::MissingAddress(other))),
    }
}

/// Every server of a cluster on loopback sockets in this process.
pub struct LiveCluster {
    cfg: ClusterConfig,
    services: Option<ServiceHost>,
    hosts: Vec<(NodeId, TcpHost)>,
    store: LocalStore,
    oracle: LocalOracle,
}

impl LiveCluster {
    /// Binds ephemeral ports for every server, preloads `graph` and starts
    /// everything. Addresses in `cfg.book` are replaced.
    pub fn start(mut cfg: ClusterConfig, graph: &SeedGraph) -> Result<Self, LiveError> {
        let services = ephemeral()?;
        let mut listeners: Vec<(NodeId, TcpListener)> = vec![(NodeId::Manager, ephemeral()?)];
        for i in 0..cfg.shards {
            listeners.push((NodeId::Shard(i), ephemeral()?));
        }
        for i in 0..cfg.gatekeepers {
            listeners.push((NodeId::Gatekeeper(i), ephemeral()?));
        }
        cfg.book.clear();
        let services_addr = services.local_addr()?;
        cfg.book.insert(NodeId::Oracle, services_addr);
        cfg.book.insert(NodeId::Store, services_addr);
        for (n, l) in &listeners {
            cfg.book.insert(*n, l.local_addr()?);
        }

        let store = LocalStore::new(open_store(&cfg)?);
        preload(&store, graph, cfg.gatekeepers)?;
        let oracle = new_oracle(&cfg);
        let services = serve_services(services, Some(oracle.clone()), Some(store.clone()))?;

        let mut hosts = Vec::new();
        for (node, listener) in listeners {
            let actor = build_server(&cfg, node)?;
            hosts.push((node, serve_actor(node, actor, listener, cfg.book.clone())?));
        }
        Ok(LiveCluster {
            cfg,
            services: Some(services),
            hosts,
            store,
            oracle,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn book(&self) -> &AddressBook {
        &self.cfg.book
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    pub fn oracle(&self) -> &LocalOracle {
        &self.oracle
    }

    /// Stops every server and returns the actors.
    pub fn shutdown(mut self) -> Vec<(NodeId, Box<dyn Actor>)> {
        let actors = std::mem::take(&mut self.hosts)
            .into_iter()
            .map(|(n, h)| (n, h.shutdown()))
            .collect();
        if let Some(s) = self.services.take() {
            s.shutdown();
        }
        actors
    }
}

impl Drop for LiveCluster {
    fn drop(&mut self) {
        for (_, h) in std::mem::take(&mut self.hosts) {
            h.shutdown();
        }
        if let Some(s) = self.services.take() {
            s.shutdown();
        }
    }
}

pub type TcpClient = Client<TcpTransport>;

pub fn connect(book: &AddressBook, id: u32, gatekeepers: u16) -> TcpClient {
    let gk = NodeId::Gatekeeper((id % gatekeepers.max(1) as u32) as u16);
    Client::new(TcpTransport::new(NodeId::Client(id), book.clone()), gk).with_retry(RetryPolicy {
        attempts: 20,
        backoff: Duration::from_millis(20),
        timeout: Duration::from_secs(10),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LoadReport {
    pub completed: u64,
    pub committed: u64,
    pub programs: u64,
    pub failed: u64,
    pub elapsed: Duration,
}

impl LoadReport {
    pub fn throughput(&self) -> f64 {
        self.completed as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

#[derive(Default)]
struct Tally {
    completed: AtomicU64,
    committed: AtomicU64,
    programs: AtomicU64,
    failed: AtomicU64,
}

fn pick(rng: &mut ChaCha8Rng, vertices: &[Handle]) -> Handle {
    vertices[rng.gen_range(0..vertices.len())].clone()
}

/// Runs one operation of `kind` through `client`. Returns whether it was a
/// program.
pub fn run_op(
    client: &mut TcpClient,
    kind: OpKind,
    rng: &mut ChaCha8Rng,
    vertices: &[Handle],
    fresh: &mut u64,
    id: u32,
) -> Result<bool, ClientError> {
    let mut next_handle = |p: &str| {
        *fresh += 1;
        format!("{p}{id}_{fresh}")
    };
    let program = |c: &mut TcpClient, name: &str, v: Handle, params: Params| {
        c.run_program(name, &[v], &params).map(|_| true)
    };
    match kind {
        OpKind::GetNode | OpKind::GetEdges | OpKind::CountEdges | OpKind::Clustering => {
            program(client, kind.name(), pick(rng, vertices), Params::new())
        }
        OpKind::Reachability => {
            let to = pick(rng, vertices);
            program(client, "reachability", pick(rng, vertices), [("to".into(), to)].into())
        }
        OpKind::SwapProbe => program(client, "reachability", "n1".into(), [("to".into(), "n7".into())].into()),
        OpKind::ReadTx => {
            let vs: Vec<Handle> = (0..rng.gen_range(1..=3)).map(|_| pick(rng, vertices)).collect();
            client.transact(5, |c| vs.iter().try_for_each(|v| c.get_vertex(v).map(|_| ())))?;
            Ok(false)
        }
        OpKind::CreateEdge => {
            let (src, dst, h) = (pick(rng, vertices), pick(rng, vertices), next_handle("e"));
            client.transact(5, |c| {
                if c.get_vertex(&src)?.is_some() && c.get_vertex(&dst)?.is_some() {
                    c.create_edge(&h, &src, &dst)?;
                }
                Ok(())
            })?;
            Ok(false)
        }
        OpKind::DeleteEdge => {
            let src = pick(rng, vertices);
            let seed: u64 = rng.gen();
            client.transact(5, |c| {
                if let Some(v) = c.get_vertex(&src)? {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    if let Some(e) = v.edges.keys().choose(&mut r) {
                        c.delete_edge(e, &src)?;
                    }
                }
                Ok(())
            })?;
            Ok(false)
        }
        OpKind::SetProperty | OpKind::MultiWrite => {
            let n = if kind == OpKind::MultiWrite { 2 } else { 1 };
            let vs: Vec<Handle> = (0..n).map(|_| pick(rng, vertices)).collect();
            let value = rng.gen_range(0..1000).to_string();
            client.transact(5, |c| {
                for v in &vs {
                    if c.get_vertex(v)?.is_some() {
                        c.set_property(Target::Vertex(v.clone()), "p", &value)?;
                    }
                }
                Ok(())
            })?;
            Ok(false)
        }
        OpKind::CreateVertex => {
            let h = next_handle("c");
            client.transact(5, |c| c.create_vertex(&h))?;
            Ok(false)
        }
        OpKind::Swap => Err(ClientError::Protocol("swap is simulator-only".into())),
    }
}

/// Drives `clients` closed-loop threads against the cluster for
/// `duration`.
pub fn drive(
    book: &AddressBook,
    gatekeepers: u16,
    mix: &WorkloadMix,
    vertices: Arc<Vec<Handle>>,
    clients: u32,
    duration: Duration,
    seed: u64,
) -> LoadReport {
    let tally = Arc::new(Tally::default());
    let start = Instant::now();
    let deadline = start + duration;
    let threads: Vec<_> = (0..clients)
        .map(|id| {
            let (book, mix, vertices, tally) = (book.clone(), mix.clone(), vertices.clone(), tally.clone());
            std::thread::spawn(move || {
                let mut client = connect(&book, id, gatekeepers);
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(id as u64));
                let mut gen = Generator::new(&mix);
                let mut fresh = 0;
                while Instant::now() < deadline && !vertices.is_empty() {
                    let kind = gen.next(&mut rng);
                    match run_op(&mut client, kind, &mut rng, &vertices, &mut fresh, id) {
                        Ok(is_program) => {
                            let c = if is_program { &tally.programs } else { &tally.committed };
                            c.fetch_add(1, Ordering::Relaxed);
                            tally.completed.fetch_add(1, Ordering::Relaxed);
                        }
                        // A program that ran to a definite failure still counts.
                        Err(ClientError::Program(_)) => {
                            tally.programs.fetch_add(1, Ordering::Relaxed);
                            tally.completed.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(_) => {
                            tally.failed.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
            })
        })
        .collect();
    for t in threads {
        let _ = t.join();
    }
    LoadReport {
        completed: tally.completed.load(Ordering::Relaxed),
        committed: tally.committed.load(Ordering::Relaxed),
        programs: tally.programs.load(Ordering::Relaxed),
        failed: tally.failed.load(Ordering::Relaxed),
        elapsed: start.elapsed(),
    }
}
