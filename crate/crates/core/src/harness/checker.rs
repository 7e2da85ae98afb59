//! Brute-force strict-serializability checker.
//!
//! Searches for a total order of the history's effective operations that
//! respects real time (a record whose response precedes another's
//! invocation comes first) and under which replaying every operation
//! against a [`ReferenceGraph`] reproduces every recorded result. The search
//! is depth first with memoisation on (completed set, graph state); at each
//! step only operations overlapping the earliest pending response are
//! candidates, so the branching factor is bounded by the history's maximum
//! concurrency, which must not exceed the window.
//!
//! Aborted transactions and programs without an answer have no effect and
//! are dropped. Transactions with an unknown outcome may be placed anywhere
//! before their recorded response instant, or left out.

use std::collections::{BTreeSet, HashSet};

use thiserror::Error;

use super::history::{HistoryLog, HistoryRecord, OpResult, Operation};
use super::reference::ReferenceGraph;
use crate::messages::ProgramFailure;
use crate::program::ProgramRegistry;

pub const MAX_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error("window {0} exceeds the limit of {MAX_WINDOW}")]
    WindowLimit(usize),
    #[error("history has {found} mutually concurrent operations; window is {window}")]
    TooConcurrent { found: usize, window: usize },
    #[error("search budget of {0} states exhausted")]
    Budget(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Witness {
    /// Indices into the history of the operations that could not be placed.
    pub ops: Vec<usize>,
    /// Number of operations successfully ordered before getting stuck.
    pub ordered: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    /// Indices into the history, in a valid serial order.
    Pass(Vec<usize>),
    Violation(Witness),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass(_))
    }
}

struct Entry<'a> {
    index: usize,
    rec: &'a HistoryRecord,
    optional: bool,
}

/// Largest number of operations whose [invoke, response] intervals share an
/// instant.
pub fn max_concurrency(intervals: impl IntoIterator<Item = (u64, u64)>) -> usize {
    let mut events: Vec<(u64, i32)> = Vec::new();
    for (a, b) in intervals {
        events.push((a, 1));
        events.push((b, -1));
    }
    // Opens sort before closes at the same instant: touching intervals are
    // concurrent because precedence is strict.
    events.sort_by_key(|&(t, d)| (t, -d));
    let (mut cur, mut best) = (0i64, 0i64);
    for (_, d) in events {
        cur += d as i64;
        best = best.max(cur);
    }
    best as usize
}

pub struct Checker<'a> {
    registry: &'a ProgramRegistry,
    window: usize,
    budget: u64,
}

struct Search<'a, 'h> {
    registry: &'a ProgramRegistry,
    ops: Vec<Entry<'h>>,
    done: Vec<bool>,
    /// (response, position) of pending mandatory operations.
    pending: BTreeSet<(u64, usize)>,
    graph: ReferenceGraph,
    order: Vec<usize>,
    seen: HashSet<(Vec<usize>, u64)>,
    states: u64,
    budget: u64,
    deepest: (usize, Vec<usize>, String),
}

impl<'a> Checker<'a> {
    pub fn new(registry: &'a ProgramRegistry, window: usize) -> Result<Self, CheckError> {
        if window > MAX_WINDOW {
            return Err(CheckError::WindowLimit(window));
        }
        Ok(Checker {
            registry,
            window,
            budget: 5_000_000,
        })
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn check(&self, history: &HistoryLog) -> Result<Verdict, CheckError> {
        let mut ops: Vec<Entry<'_>> = history
            .records
            .iter()
            .enumerate()
            .filter_map(|(index, rec)| {
                let optional = match (&rec.op, &rec.result) {
                    (_, OpResult::Aborted(_)) => return None,
                    (Operation::Tx { .. }, OpResult::Unknown { .. }) => true,
                    (Operation::Program { .. }, OpResult::Unknown { .. }) => return None,
                    (_, OpResult::Program { result: Err(ProgramFailure::Unavailable), .. }) => return None,
                    _ => false,
                };
                Some(Entry { index, rec, optional })
            })
            .collect();
        ops.sort_by_key(|e| (e.rec.invoke, e.rec.response, e.index));
        let found = max_concurrency(ops.iter().map(|e| (e.rec.invoke, e.rec.response)));
        if found > self.window {
            return Err(CheckError::TooConcurrent {
                found,
                window: self.window,
            });
        }
        let pending = ops
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.optional)
            .map(|(i, e)| (e.rec.response, i))
            .collect();
        let n = ops.len();
        let mut s = Search {
            registry: self.registry,
            ops,
            done: vec![false; n],
            pending,
            graph: ReferenceGraph::new(),
            order: Vec::with_capacity(n),
            seen: HashSet::new(),
            states: 0,
            budget: self.budget,
            deepest: (0, Vec::new(), String::new()),
        };
        match s.run(0) {
            Ok(true) => Ok(Verdict::Pass(s.order.iter().map(|&i| s.ops[i].index).collect())),
            Ok(false) => {
                let (ordered, ops, reason) = s.deepest;
                Ok(Verdict::Violation(Witness { ops, ordered, reason }))
            }
            Err(e) => Err(e),
        }
    }
}

enum Step {
    Fits(Option<Vec<(String, Option<crate::model::VertexRecord>)>>),
    Mismatch(String),
}

impl Search<'_, '_> {
    fn key(&self, first: usize) -> (Vec<usize>, u64) {
        let mut k = vec![first];
        k.extend((first..self.done.len()).filter(|&i| self.done[i]));
        (k, self.graph.state_hash())
    }

    fn try_apply(&mut self, i: usize) -> Step {
        let rec = self.ops[i].rec;
        match (&rec.op, &rec.result) {
            (Operation::Tx { reads, writes }, OpResult::Committed { reads: seen, .. })
            | (Operation::Tx { reads, writes }, OpResult::Unknown { reads: seen }) => {
                for (h, want) in reads.iter().zip(seen) {
                    let got = self.graph.read(h);
                    if &got != want {
                        return Step::Mismatch(format!("read of {h} differs"));
                    }
                }
                match self.graph.apply(writes) {
                    Ok(undo) => Step::Fits(Some(undo)),
                    Err(why) => Step::Mismatch(format!("writes invalid here: {why}")),
                }
            }
            (Operation::Program { name, starts, params }, OpResult::Program { result, .. }) => {
                let got = self.graph.run_program(self.registry, name, starts, params);
                if &got == result {
                    Step::Fits(None)
                } else {
                    Step::Mismatch(format!("{name} result differs"))
                }
            }
            _ => Step::Mismatch("result does not match operation kind".into()),
        }
    }

    fn run(&mut self, first: usize) -> Result<bool, CheckError> {
        let mut first = first;
        while first < self.done.len() && self.done[first] {
            first += 1;
        }
        if first == self.done.len() {
            return Ok(true);
        }
        if self.pending.is_empty() {
            // Only optional operations remain; leaving them out is valid.
            return Ok(true);
        }
        self.states += 1;
        if self.states > self.budget {
            return Err(CheckError::Budget(self.budget));
        }
        let key = self.key(first);
        if self.seen.contains(&key) {
            return Ok(false);
        }
        let bound = self.pending.iter().next().map(|&(r, _)| r).unwrap_or(u64::MAX);
        let candidates: Vec<usize> = (first..self.done.len())
            .take_while(|&i| self.ops[i].rec.invoke <= bound)
            .filter(|&i| !self.done[i])
            .collect();
        let mut reasons = Vec::new();
        for &i in &candidates {
            let optional = self.ops[i].optional;
            if optional {
                let resp = self.ops[i].rec.response;
                if self.order.iter().any(|&j| self.ops[j].rec.invoke > resp) {
                    continue;
                }
            }
            match self.try_apply(i) {
                Step::Fits(undo) => {
                    self.mark(i, true);
                    if self.run(first)? {
                        return Ok(true);
                    }
                    self.mark(i, false);
                    if let Some(u) = undo {
                        self.graph.undo(u);
                    }
                }
                Step::Mismatch(why) => reasons.push(format!("#{}: {why}", self.ops[i].index)),
            }
            if optional {
                // Leave it out entirely.
                self.done[i] = true;
                if self.run(first)? {
                    return Ok(true);
                }
                self.done[i] = false;
            }
        }
        if self.order.len() >= self.deepest.0 {
            self.deepest = (
                self.order.len(),
                candidates.iter().map(|&i| self.ops[i].index).collect(),
                reasons.join("; "),
            );
        }
        self.seen.insert(key);
        Ok(false)
    }

    fn mark(&mut self, i: usize, on: bool) {
        self.done[i] = on;
        let e = &self.ops[i];
        if on {
            self.order.push(i);
            if !e.optional {
                self.pending.remove(&(e.rec.response, i));
            }
        } else {
            self.order.pop();
            if !e.optional {
                self.pending.insert((e.rec.response, i));
            }
        }
    }
}

/// Checks `history` with the stock program registry.
pub fn check_strict_serializability(history: &HistoryLog, window: usize) -> Result<Verdict, CheckError> {
    let registry = ProgramRegistry::with_stock();
    Checker::new(&registry, window)?.check(history)
}
