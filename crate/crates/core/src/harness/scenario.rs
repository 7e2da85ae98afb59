//! Simulated cluster runs: build the servers, preload a graph, drive
//! clients, inject crashes and collect histories and counters.

use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::driver::{Driver, DriverConfig, DriverStats};
use super::graphs::SeedGraph;
use super::history::{HistoryLog, HistoryRecord, OpResult, Operation, LOADER};
use super::reference::view_of;
use super::workload::{Generator, OpKind, WorkloadMix};
use crate::cluster::{ClusterManager, ClusterView, ManagerConfig};
use crate::gatekeeper::{Gatekeeper, GatekeeperConfig};
use crate::messages::{Micros, NodeId, ProgramFailure};
use crate::model::{shard_for, Handle};
use crate::oracle::{OrderPreference, TimelineOracle};
use crate::program::{run_local, Params, ProgramRegistry};
use crate::runtime::sim::{Sim, SimConfig};
use crate::runtime::{Actor, SpawnRequest};
use crate::services::{LocalOracle, LocalStore, OracleHost};
use crate::shard::{ExecLog, ExecRecord, Shard, ShardConfig};
use crate::store::BackingStore;
use crate::timestamp::VectorTimestamp;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("preload rejected: {0}")]
    Preload(String),
    #[error("shard restore failed: {0}")]
    Restore(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub gatekeepers: u16,
    pub shards: u16,
    pub clients: u32,
    pub ops_per_client: usize,
    /// When set, one deck of exactly this many operations is dealt across
    /// the clients instead of `ops_per_client` each.
    pub total_ops: Option<usize>,
    pub mix: WorkloadMix,
    pub graph: SeedGraph,
    pub tau: Option<Micros>,
    pub nop_period: Micros,
    pub patience: Micros,
    pub gc_enabled: bool,
    pub preference: OrderPreference,
    pub think: Micros,
    pub timeout: Micros,
    pub min_latency: Micros,
    pub max_latency: Micros,
    /// Picks drawn from the first `hot` vertices with probability
    /// `hot_share`.
    pub hot: usize,
    pub hot_share: f64,
    pub heartbeat_period: Micros,
    pub heartbeat_timeout: Micros,
    /// Servers to kill and when.
    pub faults: Vec<(NodeId, Micros)>,
    /// Simulated-time limit for the run.
    pub deadline: Micros,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            gatekeepers: 1,
            shards: 1,
            clients: 1,
            ops_per_client: 10,
            total_ops: None,
            mix: WorkloadMix::mixed(0.9),
            graph: SeedGraph::default(),
            tau: Some(10_000),
            nop_period: 1_000,
            patience: 2_000,
            gc_enabled: true,
            preference: OrderPreference::ArrivalOrder,
            think: 500,
            timeout: 400_000,
            min_latency: 50,
            max_latency: 300,
            hot: 0,
            hot_share: 0.0,
            heartbeat_period: 20_000,
            heartbeat_timeout: 100_000,
            faults: Vec::new(),
            deadline: 600_000_000,
        }
    }
}

/// Coordination work done during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoordinationCounters {
    pub announces: u64,
    pub oracle_calls: u64,
    pub queries: u64,
}

impl CoordinationCounters {
    pub fn announces_per_query(&self) -> f64 {
        self.announces as f64 / self.queries.max(1) as f64
    }

    pub fn oracle_calls_per_query(&self) -> f64 {
        self.oracle_calls as f64 / self.queries.max(1) as f64
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub history: HistoryLog,
    pub counters: CoordinationCounters,
    pub exec: Vec<ExecRecord>,
    pub views: Vec<ClusterView>,
    pub failures: Vec<(Micros, NodeId)>,
    pub drivers: DriverStats,
    pub finished: bool,
    pub elapsed: Micros,
}

pub struct Cluster {
    pub sim: Sim,
    cfg: ScenarioConfig,
    store: LocalStore,
    oracle: LocalOracle,
    registry: ProgramRegistry,
    exec: ExecLog,
    clients: Vec<NodeId>,
    preload: HistoryRecord,
    vertices: Arc<Vec<Handle>>,
}

fn gatekeeper_config(cfg: &ScenarioConfig) -> GatekeeperConfig {
    GatekeeperConfig {
        gatekeepers: cfg.gatekeepers,
        shards: cfg.shards,
        tau: cfg.tau,
        nop_period: cfg.nop_period,
        gc_period: 50_000,
        heartbeat_period: cfg.heartbeat_period,
        gc_enabled: cfg.gc_enabled,
    }
}

fn shard_config(cfg: &ScenarioConfig) -> ShardConfig {
    ShardConfig {
        gatekeepers: cfg.gatekeepers,
        shards: cfg.shards,
        patience: cfg.patience,
        heartbeat_period: cfg.heartbeat_period,
        preference: cfg.preference,
        gc_enabled: cfg.gc_enabled,
    }
}

impl Cluster {
    pub fn build(cfg: ScenarioConfig) -> Result<Self, ScenarioError> {
        if cfg.gatekeepers == 0 || cfg.shards == 0 {
            return Err(ScenarioError::Invalid("need at least one gatekeeper and shard".into()));
        }
        let g = cfg.gatekeepers;
        let store = LocalStore::new(BackingStore::in_memory(cfg.shards));
        let oracle = LocalOracle::new(OracleHost::new(
            TimelineOracle::new(),
            (cfg.gatekeepers + cfg.shards) as usize,
            cfg.gc_enabled,
        ));
        let registry = ProgramRegistry::with_stock();
        let exec: ExecLog = Arc::new(Mutex::new(Vec::new()));

        let ops = cfg.graph.ops();
        let zero = VectorTimestamp::zero(0, 0, g as usize);
        if !ops.is_empty() {
            store
                .lock()
                .execute(&ops, &[], &zero)
                .map_err(|e| ScenarioError::Preload(format!("{e:?}")))?;
        }
        let preload = HistoryRecord {
            client: LOADER,
            op: Operation::Tx {
                reads: Vec::new(),
                writes: ops,
            },
            invoke: 0,
            response: 1,
            result: OpResult::Committed {
                ts: zero,
                reads: Vec::new(),
            },
        };

        let mut sim = Sim::new(SimConfig {
            seed: cfg.seed,
            min_latency: cfg.min_latency,
            max_latency: cfg.max_latency,
        });
        let store_arc: Arc<LocalStore> = Arc::new(store.clone());
        let oracle_arc: Arc<LocalOracle> = Arc::new(oracle.clone());

        {
            let (gk_cfg, sh_cfg) = (gatekeeper_config(&cfg), shard_config(&cfg));
            let (store, oracle, registry, exec) =
                (store_arc.clone(), oracle_arc.clone(), registry.clone(), exec.clone());
            sim.set_spawner(Box::new(move |req: SpawnRequest| -> Option<Box<dyn Actor>> {
                match req.node {
                    NodeId::Gatekeeper(i) => Some(Box::new(Gatekeeper::replacement(
                        i,
                        req.epoch,
                        gk_cfg.clone(),
                        store.clone(),
                        oracle.clone(),
                        registry.clone(),
                    ))),
                    NodeId::Shard(i) => Some(Box::new(
                        Shard::replacement(
                            i,
                            req.epoch,
                            sh_cfg.clone(),
                            store.clone(),
                            oracle.clone(),
                            registry.clone(),
                        )
                        .with_exec_log(exec.clone()),
                    )),
                    _ => None,
                }
            }));
        }

        sim.add(
            NodeId::Manager,
            Box::new(ClusterManager::new(ManagerConfig {
                gatekeepers: cfg.gatekeepers,
                shards: cfg.shards,
                heartbeat_period: cfg.heartbeat_period,
                heartbeat_timeout: cfg.heartbeat_timeout,
            })),
        );
        for i in 0..cfg.shards {
            let mut shard = Shard::new(
                i,
                0,
                shard_config(&cfg),
                store_arc.clone(),
                oracle_arc.clone(),
                registry.clone(),
            )
            .with_exec_log(exec.clone());
            shard
                .restore()
                .map_err(|e| ScenarioError::Restore(e.to_string()))?;
            sim.add(NodeId::Shard(i), Box::new(shard));
        }
        for i in 0..cfg.gatekeepers {
            sim.add(
                NodeId::Gatekeeper(i),
                Box::new(Gatekeeper::new(
                    i,
                    0,
                    gatekeeper_config(&cfg),
                    store_arc.clone(),
                    oracle_arc.clone(),
                    registry.clone(),
                )),
            );
        }
        for (node, at) in &cfg.faults {
            sim.kill_at(*node, *at);
        }

        let vertices = Arc::new(cfg.graph.vertices.clone());
        let mut cluster = Cluster {
            sim,
            store,
            oracle,
            registry,
            exec,
            clients: Vec::new(),
            preload,
            vertices,
            cfg,
        };
        let mix = cluster.cfg.mix.clone();
        let (clients, ops) = (cluster.cfg.clients, cluster.cfg.ops_per_client);
        match cluster.cfg.total_ops {
            Some(total) if clients > 0 => {
                let mut deck = mix.deck(total);
                let mut rng = ChaCha8Rng::seed_from_u64(cluster.cfg.seed ^ 0x5eed);
                deck.shuffle(&mut rng);
                let mut scripts = vec![Vec::new(); clients as usize];
                for (i, k) in deck.into_iter().enumerate() {
                    scripts[i % clients as usize].push(k);
                }
                cluster.add_scripted(scripts, &mix, 1_000);
            }
            _ => cluster.add_clients(clients, ops, &mix, 1_000),
        }
        Ok(cluster)
    }

    /// Starts `count` more clients issuing `ops` operations each, `delay`
    /// after now.
    pub fn add_clients(&mut self, count: u32, ops: usize, mix: &WorkloadMix, delay: Micros) {
        self.spawn_drivers((0..count).map(|_| (ops, None)).collect(), mix, delay);
    }

    /// Starts one client per script.
    pub fn add_scripted(&mut self, scripts: Vec<Vec<OpKind>>, mix: &WorkloadMix, delay: Micros) {
        self.spawn_drivers(scripts.into_iter().map(|s| (s.len(), Some(s))).collect(), mix, delay);
    }

    fn spawn_drivers(&mut self, plans: Vec<(usize, Option<Vec<OpKind>>)>, mix: &WorkloadMix, delay: Micros) {
        if self.vertices.is_empty() {
            return;
        }
        let base = self.clients.len() as u32;
        for (k, (ops, script)) in plans.into_iter().enumerate() {
            let k = k as u32;
            let id = base + k;
            let cfg = DriverConfig {
                gatekeepers: self.cfg.gatekeepers,
                ops,
                think: self.cfg.think,
                timeout: self.cfg.timeout,
                backoff: 2_000,
                attempts: 50,
                hot: self.cfg.hot,
                hot_share: self.cfg.hot_share,
                start_at: delay + k as Micros * 37,
            };
            let rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(id as u64));
            let mut driver = Driver::new(id, cfg, rng, Generator::new(mix), self.vertices.clone());
            if let Some(script) = script {
                driver = driver.with_script(script);
            }
            let node = NodeId::Client(id);
            self.sim.add(node, Box::new(driver));
            self.clients.push(node);
        }
    }

    fn drivers(&self) -> impl Iterator<Item = &Driver> {
        self.clients
            .iter()
            .filter_map(|n| self.sim.actor::<Driver>(*n))
    }

    pub fn clients_finished(&self) -> bool {
        self.drivers().all(Driver::finished)
    }

    /// Runs until every client is done or the deadline passes.
    pub fn run(&mut self) -> bool {
        let clients = self.clients.clone();
        self.sim.run_while(self.cfg.deadline, |sim| {
            clients
                .iter()
                .all(|n| sim.actor::<Driver>(*n).is_none_or(Driver::finished))
        })
    }

    /// Lets in-flight work drain for `extra` more microseconds.
    pub fn settle(&mut self, extra: Micros) {
        let until = self.sim.now() + extra;
        self.sim.run_until(until);
    }

    pub fn history(&self) -> HistoryLog {
        let mut log = HistoryLog::new();
        log.push(self.preload.clone());
        for d in self.drivers() {
            log.records.extend(d.history().records.iter().cloned());
        }
        log.sort();
        log
    }

    pub fn counters(&self) -> CoordinationCounters {
        let announces = (0..self.cfg.gatekeepers)
            .filter_map(|i| self.sim.actor::<Gatekeeper>(NodeId::Gatekeeper(i)))
            .map(|g| g.counters().announces_sent)
            .sum();
        let queries = self
            .drivers()
            .flat_map(|d| d.history().records.iter())
            .filter(|r| matches!(r.result, OpResult::Program { .. }))
            .count() as u64;
        CoordinationCounters {
            announces,
            oracle_calls: self.oracle.stats().order_calls,
            queries,
        }
    }

    pub fn driver_stats(&self) -> DriverStats {
        self.drivers().fold(DriverStats::default(), |mut acc, d| {
            let s = d.stats();
            acc.issued += s.issued;
            acc.completed += s.completed;
            acc.committed += s.committed;
            acc.aborted += s.aborted;
            acc.programs += s.programs;
            acc.unavailable += s.unavailable;
            acc.timeouts += s.timeouts;
            acc
        })
    }

    pub fn exec_log(&self) -> Vec<ExecRecord> {
        self.exec.lock().expect("exec log").clone()
    }

    pub fn manager(&self) -> &ClusterManager {
        self.sim
            .actor::<ClusterManager>(NodeId::Manager)
            .expect("manager present")
    }

    pub fn shard(&self, i: u16) -> Option<&Shard> {
        self.sim.actor::<Shard>(NodeId::Shard(i))
    }

    pub fn gatekeeper(&self, i: u16) -> Option<&Gatekeeper> {
        self.sim.actor::<Gatekeeper>(NodeId::Gatekeeper(i))
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    pub fn oracle(&self) -> &LocalOracle {
        &self.oracle
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Re-executes a program against the snapshot it originally ran at,
    /// using each shard's execution positions. `None` when some shard no
    /// longer knows where the program ran.
    pub fn rerun(
        &self,
        name: &str,
        starts: &[Handle],
        params: &Params,
        ts: &VectorTimestamp,
    ) -> Option<Result<Params, ProgramFailure>> {
        let shards = self.cfg.shards;
        let mut positions = Vec::with_capacity(shards as usize);
        for i in 0..shards {
            let shard = self.shard(i)?;
            positions.push(shard.position_of(ts)?);
        }
        let program = match self.registry.get(name) {
            Ok(p) => p,
            Err(e) => return Some(Err(e.into())),
        };
        let view = |h: &str| {
            let s = shard_for(h, shards);
            let shard = self.shard(s)?;
            let pos = positions[s as usize];
            shard
                .graph()
                .view(h, &|w: &VectorTimestamp| shard.visible_at(pos, w))
        };
        Some(run_local(program.as_ref(), starts, params, view).map_err(ProgramFailure::from))
    }

    /// Compares every shard's latest state with the backing store. Returns
    /// the handles that differ.
    pub fn divergent_vertices(&self) -> Vec<Handle> {
        let records = self.store.lock().all_vertices().unwrap_or_default();
        let latest = |_: &VectorTimestamp| true;
        records
            .iter()
            .filter(|r| {
                let stored = view_of(r);
                let live = self
                    .shard(r.shard)
                    .and_then(|s| s.graph().view(&r.handle, &latest));
                stored != live
            })
            .map(|r| r.handle.clone())
            .collect()
    }

    pub fn report(&self, finished: bool) -> ScenarioReport {
        let m = self.manager();
        ScenarioReport {
            history: self.history(),
            counters: self.counters(),
            exec: self.exec_log(),
            views: m.views().to_vec(),
            failures: m.failures().to_vec(),
            drivers: self.driver_stats(),
            finished,
            elapsed: self.sim.now(),
        }
    }
}

/// Builds a cluster, runs it to completion and lets it settle.
pub fn run_scenario(cfg: ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    let mut cluster = Cluster::build(cfg)?;
    let finished = cluster.run();
    cluster.settle(50_000);
    Ok(cluster.report(finished))
}
