//! Workload mixes and the operation generator.
//!
//! Operations are dealt from shuffled decks: each deck holds every kind in
//! proportion to its probability (largest-remainder rounding), so empirical
//! frequencies track the mix closely while the order stays random.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    GetNode,
    GetEdges,
    CountEdges,
    Reachability,
    Clustering,
    /// Reads one to three vertices and commits nothing.
    ReadTx,
    CreateEdge,
    DeleteEdge,
    SetProperty,
    CreateVertex,
    /// Reads two vertices and writes a property on both.
    MultiWrite,
    /// Flips between the two halves of the swap graph in one transaction.
    Swap,
    /// reachability(n1 → n7) on the swap graph.
    SwapProbe,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::GetNode => "get_node",
            OpKind::GetEdges => "get_edges",
            OpKind::CountEdges => "count_edges",
            OpKind::Reachability => "reachability",
            OpKind::Clustering => "clustering_coefficient",
            OpKind::ReadTx => "read_tx",
            OpKind::CreateEdge => "create_edge",
            OpKind::DeleteEdge => "delete_edge",
            OpKind::SetProperty => "set_property",
            OpKind::CreateVertex => "create_vertex",
            OpKind::MultiWrite => "multi_write",
            OpKind::Swap => "swap",
            OpKind::SwapProbe => "probe",
        }
    }

    pub fn is_program(self) -> bool {
        matches!(
            self,
            OpKind::GetNode
                | OpKind::GetEdges
                | OpKind::CountEdges
                | OpKind::Reachability
                | OpKind::Clustering
                | OpKind::SwapProbe
        )
    }

    pub fn is_write(self) -> bool {
        matches!(
            self,
            OpKind::CreateEdge
                | OpKind::DeleteEdge
                | OpKind::SetProperty
                | OpKind::CreateVertex
                | OpKind::MultiWrite
                | OpKind::Swap
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixError {
    #[error("probabilities sum to {0}, not 1")]
    Sum(f64),
    #[error("negative probability for {0}")]
    Negative(OpKind),
    #[error("unknown workload `{0}`")]
    Unknown(String),
    #[error("read fraction {0} is outside [0, 1]")]
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadMix {
    entries: Vec<(OpKind, f64)>,
}

fn scaled(weight: f64, parts: &[(OpKind, f64)]) -> impl Iterator<Item = (OpKind, f64)> + '_ {
    parts.iter().map(move |&(k, p)| (k, weight * p))
}

impl WorkloadMix {
    pub fn new(entries: Vec<(OpKind, f64)>) -> Result<Self, MixError> {
        if let Some(&(k, _)) = entries.iter().find(|(_, p)| *p < 0.0) {
            return Err(MixError::Negative(k));
        }
        let sum: f64 = entries.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MixError::Sum(sum));
        }
        Ok(WorkloadMix {
            entries: entries.into_iter().filter(|(_, p)| *p > 0.0).collect(),
        })
    }

    /// The social-network mix: 99.8% reads, 0.2% writes.
    pub fn tao() -> Self {
        let reads = [
            (OpKind::GetEdges, 0.594),
            (OpKind::CountEdges, 0.117),
            (OpKind::GetNode, 0.289),
        ];
        let writes = [(OpKind::CreateEdge, 0.8), (OpKind::DeleteEdge, 0.2)];
        let entries = scaled(0.998, &reads).chain(scaled(0.002, &writes)).collect();
        WorkloadMix::new(entries).expect("fixed mix sums to 1")
    }

    /// `read` of get_node programs, the rest split among edge and
    /// property writes.
    pub fn readmix(read: f64) -> Result<Self, MixError> {
        if !(0.0..=1.0).contains(&read) {
            return Err(MixError::Fraction(read));
        }
        let writes = [
            (OpKind::CreateEdge, 0.5),
            (OpKind::DeleteEdge, 0.3),
            (OpKind::SetProperty, 0.2),
        ];
        let entries = std::iter::once((OpKind::GetNode, read))
            .chain(scaled(1.0 - read, &writes))
            .collect();
        WorkloadMix::new(entries)
    }

    pub fn traverse() -> Self {
        WorkloadMix::new(vec![
            (OpKind::Reachability, 0.9),
            (OpKind::CreateEdge, 0.05),
            (OpKind::DeleteEdge, 0.05),
        ])
        .expect("fixed mix sums to 1")
    }

    /// Transactions of every shape plus every stock program; `tx` is the
    /// transaction share.
    pub fn mixed(tx: f64) -> Self {
        let txs = [
            (OpKind::ReadTx, 0.25),
            (OpKind::CreateEdge, 0.25),
            (OpKind::DeleteEdge, 0.15),
            (OpKind::SetProperty, 0.2),
            (OpKind::CreateVertex, 0.1),
            (OpKind::MultiWrite, 0.05),
        ];
        let progs = [
            (OpKind::Reachability, 0.3),
            (OpKind::GetNode, 0.2),
            (OpKind::GetEdges, 0.2),
            (OpKind::CountEdges, 0.15),
            (OpKind::Clustering, 0.15),
        ];
        let entries = scaled(tx, &txs).chain(scaled(1.0 - tx, &progs)).collect();
        WorkloadMix::new(entries).expect("mixed mix sums to 1")
    }

    pub fn only(kind: OpKind) -> Self {
        WorkloadMix::new(vec![(kind, 1.0)]).expect("single entry")
    }

    /// Parses `tao`, `readmix:<r>`, `traverse` or `mixed`.
    pub fn parse(s: &str) -> Result<Self, MixError> {
        match s {
            "tao" => Ok(Self::tao()),
            "traverse" => Ok(Self::traverse()),
            "mixed" => Ok(Self::mixed(500.0 / 550.0)),
            "get_node" => Ok(Self::only(OpKind::GetNode)),
            "clustering" => Ok(Self::only(OpKind::Clustering)),
            _ => match s.strip_prefix("readmix:") {
                Some(r) => Self::readmix(r.parse().map_err(|_| MixError::Unknown(s.into()))?),
                None => Err(MixError::Unknown(s.into())),
            },
        }
    }

    pub fn entries(&self) -> &[(OpKind, f64)] {
        &self.entries
    }

    pub fn probability(&self, kind: OpKind) -> f64 {
        self.entries
            .iter()
            .filter(|(k, _)| *k == kind)
            .map(|(_, p)| p)
            .sum()
    }

    /// One deck of `size` cards with largest-remainder rounding.
    pub fn deck(&self, size: usize) -> Vec<OpKind> {
        let exact: Vec<f64> = self.entries.iter().map(|(_, p)| p * size as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut rest = size - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        self.entries
            .iter()
            .zip(counts)
            .flat_map(|(&(k, _), n)| std::iter::repeat_n(k, n))
            .collect()
    }
}

pub const DECK_SIZE: usize = 10_000;

/// Deals operation kinds from reshuffled decks.
#[derive(Debug, Clone)]
pub struct Generator {
    deck: Vec<OpKind>,
    pos: usize,
}

impl Generator {
    pub fn new(mix: &WorkloadMix) -> Self {
        Generator {
            deck: mix.deck(DECK_SIZE),
            pos: DECK_SIZE,
        }
    }

    pub fn next<R: Rng>(&mut self, rng: &mut R) -> OpKind {
        if self.pos >= self.deck.len() {
            self.deck.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.deck[self.pos - 1]
    }
}
