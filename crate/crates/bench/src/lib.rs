//! Shared fixtures for the benchmarks.

use refgraph_core::messages::Message;
use refgraph_core::model::{Target, TxOp};
use refgraph_core::timestamp::VectorTimestamp;

/// `n` pairwise-concurrent timestamps over `gatekeepers` entries: entry
/// `i % gatekeepers` runs ahead while the next one lags behind.
pub fn concurrent_timestamps(n: usize, gatekeepers: usize) -> Vec<VectorTimestamp> {
    (0..n)
        .map(|i| {
            let issuer = i % gatekeepers;
            let mut clocks = vec![n as u64; gatekeepers];
            clocks[issuer] = n as u64 + 1 + i as u64;
            clocks[(issuer + 1) % gatekeepers] = (n - i) as u64;
            VectorTimestamp::new(0, issuer as u16, clocks)
        })
        .collect()
}

/// A commit carrying `ops` writes on a handful of vertices.
pub fn commit_message(ops: usize) -> Message {
    let ops = (0..ops)
        .map(|i| match i % 3 {
            0 => TxOp::CreateEdge {
                handle: format!("e{i}"),
                src: format!("v{}", i % 7),
                dst: format!("v{}", i % 11),
            },
            1 => TxOp::SetProperty {
                target: Target::Vertex(format!("v{}", i % 7)),
                key: "name".into(),
                value: "x".repeat(24),
            },
            _ => TxOp::CreateVertex {
                handle: format!("n{i}"),
            },
        })
        .collect();
    Message::TxCommit {
        corr: 42,
        ops,
        reads: (0..4).map(|i| (format!("v{i}"), i as u64)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use refgraph_core::timestamp::OrderRelation;

    #[test]
    fn fixtures_are_concurrent() {
        let ts = concurrent_timestamps(16, 3);
        for a in &ts {
            for b in &ts {
                if a != b {
                    assert_eq!(a.relation(b), OrderRelation::Concurrent, "{a:?} {b:?}");
                }
            }
        }
    }
}
