//! `key=value` cluster configuration files.
//!
//! ```text
//! # timing
//! tau_ms = 10
//! nop_ms = 1
//! gatekeepers = 2
//! shards = 2
//! seed = 7
//! data_dir = /var/lib/refgraph
//! # addresses, keyed by server name
//! oracle = 127.0.0.1:7000
//! store = 127.0.0.1:7000
//! manager = 127.0.0.1:7001
//! gatekeeper0 = 127.0.0.1:7100
//! shard0 = 127.0.0.1:7200
//! ```

use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::messages::NodeId;
use crate::runtime::tcp::AddressBook;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("missing address for {0}")]
    MissingAddress(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Announce period; 0 turns announces off.
    pub tau_ms: u64,
    pub nop_ms: u64,
    pub gatekeepers: u16,
    pub shards: u16,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub gc: bool,
    pub heartbeat_ms: u64,
    pub heartbeat_timeout_ms: u64,
    pub book: AddressBook,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            tau_ms: 10,
            nop_ms: 1,
            gatekeepers: 1,
            shards: 1,
            seed: 0,
            data_dir: None,
            gc: true,
            heartbeat_ms: 200,
            heartbeat_timeout_ms: 3_000,
            book: AddressBook::new(),
        }
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("`{v}`: {e}"))
}

impl ClusterConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ClusterConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Line { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key=value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "tau_ms" => cfg.tau_ms = num(v).map_err(err)?,
                "nop_ms" => cfg.nop_ms = num(v).map_err(err)?,
                "gatekeepers" => cfg.gatekeepers = num(v).map_err(err)?,
                "shards" => cfg.shards = num(v).map_err(err)?,
                "seed" => cfg.seed = num(v).map_err(err)?,
                "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                "gc" => cfg.gc = num(v).map_err(err)?,
                "heartbeat_ms" => cfg.heartbeat_ms = num(v).map_err(err)?,
                "heartbeat_timeout_ms" => cfg.heartbeat_timeout_ms = num(v).map_err(err)?,
                _ => {
                    let node: NodeId = k.parse().map_err(|_| err(format!("unknown key `{k}`")))?;
                    let addr: SocketAddr = num(v).map_err(err)?;
                    cfg.book.insert(node, addr);
                }
            }
        }
        if cfg.gatekeepers == 0 || cfg.shards == 0 {
            return Err(ConfigError::Line {
                line: 0,
                msg: "gatekeepers and shards must be positive".into(),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Line {
            line: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn addr(&self, node: NodeId) -> Result<SocketAddr, ConfigError> {
        self.book.get(&node).copied().ok_or(ConfigError::MissingAddress(node))
    }

    pub fn tau_micros(&self) -> Option<u64> {
        (self.tau_ms > 0).then_some(self.tau_ms * 1_000)
    }
}
