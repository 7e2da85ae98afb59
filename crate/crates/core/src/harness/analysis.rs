//! Post-run checks over histories and execution logs.

use std::collections::BTreeMap;

use super::history::{HistoryLog, HistoryRecord, OpResult};
use crate::messages::Micros;
use crate::model::shard_for;
use crate::shard::ExecRecord;
use crate::timestamp::{Epoch, OrderRelation, VectorTimestamp};

/// Two operations on a shared vertex where the one that responded first
/// executed second on the vertex's shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inversion {
    pub first: usize,
    pub second: usize,
    pub vertex: String,
    pub shard: u16,
}

fn exec_index(exec: &[ExecRecord]) -> BTreeMap<(u16, &VectorTimestamp), (Epoch, u64)> {
    let mut idx = BTreeMap::new();
    for r in exec {
        idx.entry((r.shard, &r.ts)).or_insert((r.epoch, r.position));
    }
    idx
}

/// Checks that real-time order implies execution order: whenever
/// `a.response < b.invoke` and both touch vertex `v`, `a` ran before `b` on
/// the shard that owns `v`. Pairs where either side never executed there
/// (read-only transactions, aborts) are skipped.
pub fn realtime_inversions(history: &HistoryLog, exec: &[ExecRecord], shards: u16) -> Vec<Inversion> {
    let idx = exec_index(exec);
    let mut by_vertex: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in history.records.iter().enumerate() {
        if r.result.ts().is_none() {
            continue;
        }
        for v in r.op.vertices() {
            by_vertex.entry(v).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for (v, ops) in by_vertex {
        let shard = shard_for(v, shards);
        let placed: Vec<(&HistoryRecord, usize, (Epoch, u64))> = ops
            .iter()
            .filter_map(|&i| {
                let r = &history.records[i];
                let ts = r.result.ts()?;
                idx.get(&(shard, ts)).map(|p| (r, i, *p))
            })
            .collect();
        for (a, ia, pa) in &placed {
            for (b, ib, pb) in &placed {
                if a.response < b.invoke && pa >= pb {
                    out.push(Inversion {
                        first: *ia,
                        second: *ib,
                        vertex: v.to_string(),
                        shard,
                    });
                }
            }
        }
    }
    out
}

/// Timestamps issued after `recovered` that are not ordered after some
/// timestamp committed before `crash`. Returns offending index pairs.
pub fn recovery_order_violations(
    history: &HistoryLog,
    crash: Micros,
    recovered: Micros,
) -> Vec<(usize, usize)> {
    let stamped = |pred: &dyn Fn(&HistoryRecord) -> bool| -> Vec<(usize, &VectorTimestamp)> {
        history
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r))
            .filter_map(|(i, r)| r.result.ts().map(|t| (i, t)))
            .collect()
    };
    let before = stamped(&|r| r.response < crash);
    let after = stamped(&|r| r.invoke > recovered);
    let newest_before = before.iter().max_by_key(|(_, t)| t.epoch).map(|(_, t)| t.epoch);
    let mut out = Vec::new();
    for (j, tb) in &after {
        // Epoch dominance makes the per-pair check cheap once epochs differ.
        if newest_before.is_some_and(|e| tb.epoch > e) {
            continue;
        }
        for (i, ta) in &before {
            if ta.relation(tb) != OrderRelation::Before {
                out.push((*i, *j));
            }
        }
    }
    out
}

/// Reachability results that returned a path through the given vertices.
pub fn paths_through(history: &HistoryLog, path: &[&str]) -> usize {
    let want = serde_json::to_string(path).expect("strings serialize");
    history
        .records
        .iter()
        .filter(|r| match &r.result {
            OpResult::Program { result: Ok(out), .. } => out.get("path") == Some(&want),
            _ => false,
        })
        .count()
}

/// Counts reachability probes that completed, successful or not.
pub fn completed_programs(history: &HistoryLog, name: &str) -> usize {
    history
        .records
        .iter()
        .filter(|r| {
            matches!(&r.op, super::history::Operation::Program { name: n, .. } if n == name)
                && matches!(r.result, OpResult::Program { .. })
        })
        .count()
}
