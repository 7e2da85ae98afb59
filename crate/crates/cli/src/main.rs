use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refgraph_core::gatekeeper::Gatekeeper;
use refgraph_core::harness::analysis::{realtime_inversions, recovery_order_violations};
use refgraph_core::harness::checker::{check_strict_serializability, Verdict, MAX_WINDOW};
use refgraph_core::harness::config::ClusterConfig;
use refgraph_core::harness::graphs::{parse_edge_list, random_graph, SeedGraph};
use refgraph_core::harness::history::HistoryLog;
use refgraph_core::harness::live::{self, LiveCluster};
use refgraph_core::harness::scenario::{run_scenario, ScenarioConfig, ScenarioReport};
use refgraph_core::harness::workload::WorkloadMix;
use refgraph_core::messages::{Micros, NodeId};
use refgraph_core::runtime::tcp::{serve_actor, serve_services};
use refgraph_core::services::LocalStore;

#[derive(Parser)]
#[command(name = "refgraph", version, about = "Run, load, benchmark and check a refgraph cluster")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Gatekeeper,
    Shard,
    Oracle,
    Store,
    Manager,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one server process.
    Serve {
        role: Role,
        #[arg(long)]
        config: PathBuf,
        /// Index of the gatekeeper or shard.
        #[arg(long, default_value_t = 0)]
        id: u16,
    },
    /// Load an edge list (`src dst` per line) into a running cluster, or
    /// just validate it when no config is given.
    Load {
        edgelist: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Operations per transaction.
        #[arg(long, default_value_t = 200)]
        batch: usize,
    },
    /// Closed-loop benchmark against an in-process TCP cluster.
    Bench {
        /// tao, readmix:<r>, traverse, mixed, get_node or clustering.
        #[arg(long, default_value = "tao")]
        workload: String,
        #[arg(long, default_value_t = 8)]
        clients: u32,
        /// Seconds.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gatekeepers: Option<u16>,
        #[arg(long)]
        shards: Option<u16>,
        /// Edge list to preload; a random graph otherwise.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        vertices: usize,
    },
    /// Coordination cost across clock announce periods (simulated).
    SweepTau {
        /// Announce periods in milliseconds.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,256")]
        values: Vec<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 800)]
        ops: usize,
        #[arg(long, default_value = "mixed")]
        workload: String,
    },
    /// Check a history file for strict serializability.
    Check {
        history: PathBuf,
        #[arg(long, default_value_t = MAX_WINDOW)]
        window: usize,
    },
    /// Simulate a run, crash a server mid-way and verify recovery.
    Fault {
        /// gatekeeperN or shardN.
        #[arg(long)]
        kill: NodeId,
        /// Simulated instant: microseconds, or with an `ms` or `s` suffix.
        #[arg(long, value_parser = parse_instant)]
        at: Micros,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Simulate a run and optionally write its history.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        gatekeepers: u16,
        #[arg(long, default_value_t = 3)]
        shards: u16,
        #[arg(long, default_value_t = 8)]
        clients: u32,
        #[arg(long, default_value_t = 550)]
        ops: usize,
        #[arg(long, default_value = "mixed")]
        workload: String,
        #[arg(long)]
        history: Option<PathBuf>,
    },
}

fn parse_instant(s: &str) -> Result<Micros, String> {
    let (num, scale) = if let Some(n) = s.strip_suffix("ms") {
        (n, 1_000)
    } else if let Some(n) = s.strip_suffix("us") {
        (n, 1)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1_000_000)
    } else {
        (s, 1)
    };
    num.trim()
        .parse::<f64>()
        .map(|v| (v * scale as f64) as Micros)
        .map_err(|e| format!("bad instant `{s}`: {e}"))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Serve { role, config, id } => serve(role, &config, id),
        Cmd::Load {
            edgelist,
            config,
            batch,
        } => load(&edgelist, config.as_deref(), batch),
        Cmd::Bench {
            workload,
            clients,
            duration,
            config,
            gatekeepers,
            shards,
            graph,
            vertices,
        } => {
            let mut cfg = match config {
                Some(p) => ClusterConfig::load(&p)?,
                None => ClusterConfig::default(),
            };
            cfg.gatekeepers = gatekeepers.unwrap_or(cfg.gatekeepers);
            cfg.shards = shards.unwrap_or(cfg.shards);
            let graph = match graph {
                Some(p) => read_edge_list(&p)?,
                None => random_graph(vertices, 4, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
            };
            bench(cfg, &graph, &workload, clients, Duration::from_secs_f64(duration))
        }
        Cmd::SweepTau {
            values,
            seed,
            ops,
            workload,
        } => sweep_tau(&values, seed, ops, &workload),
        Cmd::Check { history, window } => check(&history, window),
        Cmd::Fault {
            kill,
            at,
            seed,
            history,
        } => fault(kill, at, seed, history.as_deref()),
        Cmd::Simulate {
            seed,
            gatekeepers,
            shards,
            clients,
            ops,
            workload,
            history,
        } => {
            let cfg = ScenarioConfig {
                gatekeepers,
                shards,
                clients,
                total_ops: Some(ops),
                mix: WorkloadMix::parse(&workload)?,
                ..sim_config(seed)
            };
            let r = run_scenario(cfg)?;
            summarize(&r);
            finish_history(&r, history.as_deref())
        }
    }
}

fn read_edge_list(path: &Path) -> Result<SeedGraph> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_edge_list(&text).with_context(|| format!("parsing {}", path.display()))
}

fn serve(role: Role, config: &Path, id: u16) -> Result<()> {
    let cfg = ClusterConfig::load(config)?;
    let node = match role {
        Role::Gatekeeper => NodeId::Gatekeeper(id),
        Role::Shard => NodeId::Shard(id),
        Role::Manager => NodeId::Manager,
        Role::Oracle => NodeId::Oracle,
        Role::Store => NodeId::Store,
    };
    let addr = cfg.addr(node)?;
    let listener = std::net::TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    match role {
        Role::Oracle | Role::Store => {
            // One process serves both when they share an address.
            let shared = cfg.addr(NodeId::Oracle).ok() == cfg.addr(NodeId::Store).ok();
            let oracle = (matches!(role, Role::Oracle) || shared).then(|| live::new_oracle(&cfg));
            let store = if matches!(role, Role::Store) || shared {
                Some(LocalStore::new(live::open_store(&cfg)?))
            } else {
                None
            };
            let _host = serve_services(listener, oracle, store)?;
            eprintln!("{node} listening on {addr}");
            park()
        }
        _ => {
            let actor = live::build_server(&cfg, node)?;
            let _host = serve_actor(node, actor, listener, cfg.book.clone())?;
            eprintln!("{node} listening on {addr}");
            park()
        }
    }
}

fn park() -> Result<()> {
    loop {
        std::thread::park();
    }
}

fn load(path: &Path, config: Option<&Path>, batch: usize) -> Result<()> {
    let graph = read_edge_list(path)?;
    println!("{}: {} vertices, {} edges", path.display(), graph.vertices.len(), graph.edges.len());
    let Some(config) = config else {
        return Ok(());
    };
    let cfg = ClusterConfig::load(config)?;
    let mut client = live::connect(&cfg.book, 0, cfg.gatekeepers);
    let ops = graph.ops();
    for (i, chunk) in ops.chunks(batch.max(1)).enumerate() {
        client
            .transact(10, |c| chunk.iter().try_for_each(|op| c.session().write(op.clone())))
            .with_context(|| format!("loading batch {i}"))?;
    }
    println!("loaded {} operations in {} transactions", ops.len(), ops.len().div_ceil(batch.max(1)));
    Ok(())
}

fn bench(cfg: ClusterConfig, graph: &SeedGraph, workload: &str, clients: u32, duration: Duration) -> Result<()> {
    let mix = WorkloadMix::parse(workload)?;
    let gatekeepers = cfg.gatekeepers;
    let shards = cfg.shards;
    let cluster = LiveCluster::start(cfg, graph)?;
    let report = live::drive(
        cluster.book(),
        gatekeepers,
        &mix,
        Arc::new(graph.vertices.clone()),
        clients,
        duration,
        1,
    );
    let oracle_calls = cluster.oracle().stats().order_calls;
    let actors = cluster.shutdown();
    let announces: u64 = actors
        .iter()
        .filter_map(|(_, a)| a.as_any().downcast_ref::<Gatekeeper>())
        .map(|g| g.counters().announces_sent)
        .sum();
    println!("workload        {workload}");
    println!("gatekeepers     {gatekeepers}");
    println!("shards          {shards}");
    println!("clients         {clients}");
    println!("completed       {}", report.completed);
    println!("  transactions  {}", report.committed);
    println!("  programs      {}", report.programs);
    println!("failed          {}", report.failed);
    println!("throughput      {:.1} ops/s", report.throughput());
    println!("announces       {announces}");
    println!("oracle calls    {oracle_calls}");
    Ok(())
}

fn sim_config(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        gatekeepers: 3,
        shards: 3,
        clients: 8,
        total_ops: Some(550),
        mix: WorkloadMix::mixed(500.0 / 550.0),
        graph: random_graph(200, 3, &mut ChaCha8Rng::seed_from_u64(seed)),
        hot: 10,
        hot_share: 0.3,
        ..ScenarioConfig::default()
    }
}

fn sweep_tau(values: &[u64], seed: u64, ops: usize, workload: &str) -> Result<()> {
    let mix = WorkloadMix::parse(workload)?;
    println!("{:>8} {:>12} {:>14} {:>10} {:>10} {:>8}", "tau_ms", "announces/q", "oracle_calls/q", "announces", "oracle", "queries");
    for &tau in values {
        let cfg = ScenarioConfig {
            tau: (tau > 0).then_some(tau * 1_000),
            total_ops: Some(ops),
            mix: mix.clone(),
            ..sim_config(seed)
        };
        let c = run_scenario(cfg)?.counters;
        println!(
            "{tau:>8} {:>12.3} {:>14.3} {:>10} {:>10} {:>8}",
            c.announces_per_query(),
            c.oracle_calls_per_query(),
            c.announces,
            c.oracle_calls,
            c.queries
        );
    }
    Ok(())
}

fn check(path: &Path, window: usize) -> Result<()> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let history = HistoryLog::read_from(BufReader::new(file))?;
    match check_strict_serializability(&history, window)? {
        Verdict::Pass(order) => {
            println!("PASS: {} operations, {} ordered", history.len(), order.len());
            Ok(())
        }
        Verdict::Violation(w) => {
            println!("VIOLATION: {}", w.reason);
            println!("placed {} operations before getting stuck; involved records:", w.ordered);
            for i in &w.ops {
                let r = &history.records[*i];
                println!("  #{i} client {} [{}, {}] {:?}", r.client, r.invoke, r.response, r.op);
            }
            bail!("history is not strictly serializable")
        }
    }
}

fn summarize(r: &ScenarioReport) {
    println!("finished        {}", r.finished);
    println!("simulated       {} us", r.elapsed);
    println!("operations      {}", r.drivers.completed);
    println!("committed       {}", r.drivers.committed);
    println!("aborted         {}", r.drivers.aborted);
    println!("programs        {}", r.drivers.programs);
    println!("announces       {}", r.counters.announces);
    println!("oracle calls    {}", r.counters.oracle_calls);
}

fn finish_history(r: &ScenarioReport, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        r.history.write_to(&mut w)?;
        w.flush()?;
        println!("history         {}", path.display());
    }
    let verdict = check_strict_serializability(&r.history, MAX_WINDOW)?;
    println!("checker         {}", if verdict.is_pass() { "pass" } else { "VIOLATION" });
    if !verdict.is_pass() {
        bail!("history is not strictly serializable: {verdict:?}");
    }
    Ok(())
}

fn fault(kill: NodeId, at: Micros, seed: u64, history: Option<&Path>) -> Result<()> {
    if !matches!(kill, NodeId::Gatekeeper(_) | NodeId::Shard(_)) {
        bail!("only gatekeepers and shards can be killed, not {kill}");
    }
    let cfg = ScenarioConfig {
        faults: vec![(kill, at)],
        ..sim_config(seed)
    };
    let shards = cfg.shards;
    let r = run_scenario(cfg)?;
    summarize(&r);
    for (t, n) in &r.failures {
        println!("failure         {n} detected at {t} us");
    }
    for v in &r.views {
        println!("view            epoch {} installed at {} us", v.epoch, v.installed_at);
    }
    let recovered = r.views.last().filter(|v| v.epoch > 0).map(|v| v.installed_at);
    match recovered {
        Some(t) => {
            let bad = recovery_order_violations(&r.history, at, t).len();
            println!("epoch order     {}", if bad == 0 { "ok".to_string() } else { format!("{bad} violations") });
        }
        None => println!("epoch order     no recovery observed"),
    }
    let inversions = realtime_inversions(&r.history, &r.exec, shards).len();
    println!("real-time order {}", if inversions == 0 { "ok".to_string() } else { format!("{inversions} inversions") });
    finish_history(&r, history)
}
