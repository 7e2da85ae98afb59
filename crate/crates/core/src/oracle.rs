//! The timeline oracle: an event-ordering state machine.
//!
//! Events are vector timestamps. Order between two events is the transitive
//! closure of explicitly assigned edges together with the edges implied by
//! vector-clock comparison. Implied edges are never materialized; a query
//! walks explicit edges and uses `compare` to hop between them.
//!
//! Once an order has been answered or established it never changes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timestamp::{OrderRelation, VectorTimestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Transaction,
    Program,
    Nop,
}

/// What the oracle knows about an event besides its timestamp.
///
/// `arrival` is the position of the event in the global arrival sequence. For
/// a write transaction it is the backing-store commit index; for node
/// programs and NOPs it is the commit index observed when the timestamp was
/// drawn. Events registered without info arrive in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInfo {
    pub kind: EventKind,
    pub arrival: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderPreference {
    ArrivalOrder,
    ProgramAfterTransactions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleOrder {
    Before,
    After,
    Unordered,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("event {0} is not registered")]
    NotRegistered(VectorTimestamp),
    #[error("ordering {before} before {after} would create a cycle")]
    Cycle {
        before: VectorTimestamp,
        after: VectorTimestamp,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleCommand {
    Create(VectorTimestamp, Option<EventInfo>),
    Assign(Vec<VectorTimestamp>, Vec<VectorTimestamp>),
    OrderOrAssign(Vec<(VectorTimestamp, VectorTimestamp)>, OrderPreference),
    Gc(VectorTimestamp),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OracleStats {
    pub creates: u64,
    pub assigns: u64,
    pub queries: u64,
    /// Number of `order_or_assign` calls, the unit shards pay for.
    pub order_calls: u64,
    pub pairs_asked: u64,
    pub orders_established: u64,
    pub gc_removed: u64,
}

#[derive(Debug, Clone)]
struct EventRecord {
    info: EventInfo,
}

#[derive(Debug, Clone, Default)]
pub struct TimelineOracle {
    events: BTreeMap<VectorTimestamp, EventRecord>,
    /// Explicit edges: source → targets. Targets may be events that were
    /// garbage collected; their timestamps still carry ordering information.
    edges: BTreeMap<VectorTimestamp, BTreeSet<VectorTimestamp>>,
    next_seq: u64,
    log: Option<Vec<OracleCommand>>,
    stats: OracleStats,
}

impl TimelineOracle {
    pub fn new() -> Self {
        Self::default()
    }

    /// An oracle that records every mutating command for crash replay.
    pub fn with_log() -> Self {
        TimelineOracle {
            log: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn replay(log: &[OracleCommand]) -> Result<Self, OracleError> {
        let mut oracle = TimelineOracle::with_log();
        for cmd in log {
            match cmd {
                OracleCommand::Create(id, None) => oracle.create_event(id.clone()),
                OracleCommand::Create(id, Some(info)) => {
                    oracle.create_event_with(id.clone(), *info)
                }
                OracleCommand::Assign(before, after) => oracle.assign_order(before, after)?,
                OracleCommand::OrderOrAssign(pairs, pref) => {
                    oracle.order_or_assign(pairs, *pref)?;
                }
                OracleCommand::Gc(threshold) => {
                    oracle.gc_events(threshold);
                }
            }
        }
        Ok(oracle)
    }

    pub fn command_log(&self) -> Option<&[OracleCommand]> {
        self.log.as_deref()
    }

    pub fn stats(&self) -> OracleStats {
        self.stats
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeSet::len).sum()
    }

    pub fn contains(&self, id: &VectorTimestamp) -> bool {
        self.events.contains_key(id)
    }

    pub fn events(&self) -> impl Iterator<Item = &VectorTimestamp> {
        self.events.keys()
    }

    pub fn explicit_edges(&self) -> impl Iterator<Item = (&VectorTimestamp, &VectorTimestamp)> {
        self.edges
            .iter()
            .flat_map(|(s, ts)| ts.iter().map(move |t| (s, t)))
    }

    fn record(&mut self, cmd: OracleCommand) {
        if let Some(log) = self.log.as_mut() {
            log.push(cmd);
        }
    }

    /// Registers an event that arrives now.
    pub fn create_event(&mut self, id: VectorTimestamp) {
        self.stats.creates += 1;
        if self.events.contains_key(&id) {
            return;
        }
        self.record(OracleCommand::Create(id.clone(), None));
        let info = EventInfo {
            kind: EventKind::Transaction,
            arrival: self.next_seq,
        };
        self.next_seq += 1;
        self.events.insert(id, EventRecord { info });
    }

    pub fn create_event_with(&mut self, id: VectorTimestamp, info: EventInfo) {
        self.stats.creates += 1;
        if self.events.contains_key(&id) {
            return;
        }
        self.record(OracleCommand::Create(id.clone(), Some(info)));
        self.next_seq = self.next_seq.max(info.arrival + 1);
        self.events.insert(id, EventRecord { info });
    }

    fn require(&self, id: &VectorTimestamp) -> Result<&EventRecord, OracleError> {
        self.events
            .get(id)
            .ok_or_else(|| OracleError::NotRegistered(id.clone()))
    }

    /// True iff `a` happens before `b` under explicit plus implied edges.
    fn reaches(&self, a: &VectorTimestamp, b: &VectorTimestamp) -> bool {
        if a == b {
            return false;
        }
        if a.happens_before(b) {
            return true;
        }
        if self.edges.is_empty() {
            return false;
        }
        let mut used: BTreeSet<&VectorTimestamp> = BTreeSet::new();
        let mut seen: BTreeSet<&VectorTimestamp> = BTreeSet::new();
        let mut work: VecDeque<&VectorTimestamp> = VecDeque::new();
        seen.insert(a);
        work.push_back(a);
        while let Some(x) = work.pop_front() {
            for (source, targets) in &self.edges {
                if used.contains(source) {
                    continue;
                }
                if source != x && !x.happens_before(source) {
                    continue;
                }
                used.insert(source);
                for t in targets {
                    if t == b || t.happens_before(b) {
                        return true;
                    }
                    if seen.insert(t) {
                        work.push_back(t);
                    }
                }
            }
        }
        false
    }

    /// Every explicit target reachable from `a`, with the sources visited.
    fn reachable_targets(&self, a: &VectorTimestamp) -> BTreeSet<VectorTimestamp> {
        let mut used: BTreeSet<&VectorTimestamp> = BTreeSet::new();
        let mut seen: BTreeSet<&VectorTimestamp> = BTreeSet::new();
        let mut out = BTreeSet::new();
        let mut work: VecDeque<&VectorTimestamp> = VecDeque::new();
        seen.insert(a);
        work.push_back(a);
        while let Some(x) = work.pop_front() {
            for (source, targets) in &self.edges {
                if used.contains(source) || (source != x && !x.happens_before(source)) {
                    continue;
                }
                used.insert(source);
                for t in targets {
                    out.insert(t.clone());
                    if seen.insert(t) {
                        work.push_back(t);
                    }
                }
            }
        }
        out
    }

    fn relation(&self, a: &VectorTimestamp, b: &VectorTimestamp) -> OrderRelation {
        if a == b {
            OrderRelation::Equal
        } else if self.reaches(a, b) {
            OrderRelation::Before
        } else if self.reaches(b, a) {
            OrderRelation::After
        } else {
            OrderRelation::Concurrent
        }
    }

    fn insert_edge(&mut self, before: &VectorTimestamp, after: &VectorTimestamp) -> bool {
        self.edges
            .entry(before.clone())
            .or_default()
            .insert(after.clone())
    }

    fn remove_edge(&mut self, before: &VectorTimestamp, after: &VectorTimestamp) {
        if let Some(set) = self.edges.get_mut(before) {
            set.remove(after);
            if set.is_empty() {
                self.edges.remove(before);
            }
        }
    }

    /// Atomically orders every event of `before` ahead of every event of
    /// `after`. On a cycle nothing is inserted.
    pub fn assign_order(
        &mut self,
        before: &[VectorTimestamp],
        after: &[VectorTimestamp],
    ) -> Result<(), OracleError> {
        self.stats.assigns += 1;
        for id in before.iter().chain(after) {
            self.require(id)?;
        }
        let mut inserted: Vec<(VectorTimestamp, VectorTimestamp)> = Vec::new();
        for b in before {
            for a in after {
                if a == b || self.reaches(a, b) {
                    for (x, y) in inserted.iter().rev() {
                        self.remove_edge(x, y);
                    }
                    return Err(OracleError::Cycle {
                        before: b.clone(),
                        after: a.clone(),
                    });
                }
                if self.reaches(b, a) {
                    continue;
                }
                if self.insert_edge(b, a) {
                    inserted.push((b.clone(), a.clone()));
                }
            }
        }
        self.stats.orders_established += inserted.len() as u64;
        self.record(OracleCommand::Assign(before.to_vec(), after.to_vec()));
        Ok(())
    }

    pub fn query_order(
        &mut self,
        a: &VectorTimestamp,
        b: &VectorTimestamp,
    ) -> Result<OracleOrder, OracleError> {
        self.stats.queries += 1;
        self.require(a)?;
        self.require(b)?;
        Ok(match self.relation(a, b) {
            OrderRelation::Before => OracleOrder::Before,
            OrderRelation::After => OracleOrder::After,
            _ => OracleOrder::Unordered,
        })
    }

    /// Ranks an unordered pair by preference. Arrival order compares
    /// `(epoch, arrival, class, clock sum, issuer, clocks)` where write
    /// transactions sort ahead of programs and NOPs that arrived at the same
    /// commit index. The rank is a linear extension of vector-clock order.
    fn prefer_first(
        &self,
        a: (&VectorTimestamp, EventInfo),
        b: (&VectorTimestamp, EventInfo),
        pref: OrderPreference,
    ) -> bool {
        if pref == OrderPreference::ProgramAfterTransactions {
            match (a.1.kind, b.1.kind) {
                (EventKind::Transaction, EventKind::Program) => return true,
                (EventKind::Program, EventKind::Transaction) => return false,
                _ => {}
            }
        }
        arrival_rank(a.0, a.1) < arrival_rank(b.0, b.1)
    }

    /// Returns the order of each pair, establishing one where none exists.
    pub fn order_or_assign(
        &mut self,
        pairs: &[(VectorTimestamp, VectorTimestamp)],
        pref: OrderPreference,
    ) -> Result<Vec<OrderRelation>, OracleError> {
        self.stats.order_calls += 1;
        self.stats.pairs_asked += pairs.len() as u64;
        for (a, b) in pairs {
            self.require(a)?;
            self.require(b)?;
        }
        let mut out = Vec::with_capacity(pairs.len());
        let mut established = false;
        for (a, b) in pairs {
            let rel = match self.relation(a, b) {
                OrderRelation::Concurrent => {
                    let ia = self.events[a].info;
                    let ib = self.events[b].info;
                    established = true;
                    self.stats.orders_established += 1;
                    if self.prefer_first((a, ia), (b, ib), pref) {
                        self.insert_edge(a, b);
                        OrderRelation::Before
                    } else {
                        self.insert_edge(b, a);
                        OrderRelation::After
                    }
                }
                rel => rel,
            };
            out.push(rel);
        }
        if established {
            self.record(OracleCommand::OrderOrAssign(pairs.to_vec(), pref));
        }
        Ok(out)
    }

    /// Orders a whole set in one call and returns it sorted earliest first.
    pub fn order_set(
        &mut self,
        set: &[VectorTimestamp],
        pref: OrderPreference,
    ) -> Result<Vec<VectorTimestamp>, OracleError> {
        let mut pairs = Vec::new();
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                pairs.push((set[i].clone(), set[j].clone()));
            }
        }
        let rels = self.order_or_assign(&pairs, pref)?;
        let mut preds = vec![0usize; set.len()];
        let mut k = 0;
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                match rels[k] {
                    OrderRelation::Before => preds[j] += 1,
                    OrderRelation::After => preds[i] += 1,
                    _ => {}
                }
                k += 1;
            }
        }
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.sort_by_key(|&i| preds[i]);
        Ok(idx.into_iter().map(|i| set[i].clone()).collect())
    }

    /// Removes events that happen before `threshold` by vector clock. Edges
    /// out of surviving events are rewritten so that every surviving pair
    /// keeps its answer.
    pub fn gc_events(&mut self, threshold: &VectorTimestamp) -> usize {
        let doomed: Vec<VectorTimestamp> = self
            .events
            .keys()
            .filter(|e| e.happens_before(threshold))
            .cloned()
            .collect();
        if doomed.is_empty() {
            return 0;
        }
        self.record(OracleCommand::Gc(threshold.clone()));
        let doomed_set: BTreeSet<&VectorTimestamp> = doomed.iter().collect();
        let mut rewritten: BTreeMap<VectorTimestamp, BTreeSet<VectorTimestamp>> = BTreeMap::new();
        for source in self.edges.keys() {
            if doomed_set.contains(source) {
                continue;
            }
            let minimal = minimal_elements(self.reachable_targets(source));
            if !minimal.is_empty() {
                rewritten.insert(source.clone(), minimal);
            }
        }
        self.edges = rewritten;
        for id in &doomed {
            self.events.remove(id);
        }
        self.stats.gc_removed += doomed.len() as u64;
        doomed.len()
    }
}

/// The elements of `set` with no predecessor in `set`. Predecessors sort
/// first by (epoch, clock sum), and anything below a non-minimal element is
/// also below a minimal one, so each candidate is checked against the
/// minimal elements found so far.
fn minimal_elements(set: BTreeSet<VectorTimestamp>) -> BTreeSet<VectorTimestamp> {
    let mut sorted: Vec<VectorTimestamp> = set.into_iter().collect();
    sorted.sort_by_key(|t| (t.epoch, t.clock_sum()));
    let mut minimal: Vec<VectorTimestamp> = Vec::new();
    for t in sorted {
        if !minimal.iter().any(|m| m.happens_before(&t)) {
            minimal.push(t);
        }
    }
    minimal.into_iter().collect()
}

pub fn arrival_rank(
    ts: &VectorTimestamp,
    info: EventInfo,
) -> (u64, u64, u8, u64, u16, Vec<u64>) {
    let class = match info.kind {
        EventKind::Transaction => 0,
        EventKind::Program | EventKind::Nop => 1,
    };
    (
        ts.epoch,
        info.arrival,
        class,
        ts.clock_sum(),
        ts.issuer,
        ts.clocks.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(issuer: u16, clocks: &[u64]) -> VectorTimestamp {
        VectorTimestamp::new(0, issuer, clocks.to_vec())
    }

    #[test]
    fn fresh_events_are_unordered() {
        let mut o = TimelineOracle::new();
        let a = ts(0, &[1, 0]);
        let b = ts(1, &[0, 1]);
        o.create_event(a.clone());
        o.create_event(b.clone());
        o.create_event(a.clone());
        assert_eq!(o.event_count(), 2);
        assert_eq!(o.edge_count(), 0);
        assert_eq!(o.query_order(&a, &b).unwrap(), OracleOrder::Unordered);
    }

    #[test]
    fn two_cycle_is_rejected() {
        let mut o = TimelineOracle::new();
        let a = ts(1, &[0, 1]);
        let b = ts(0, &[1, 0]);
        o.create_event(a.clone());
        o.create_event(b.clone());
        o.assign_order(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        assert!(matches!(
            o.assign_order(std::slice::from_ref(&b), std::slice::from_ref(&a)),
            Err(OracleError::Cycle { .. })
        ));
    }

    #[test]
    fn implied_edges_extend_explicit_order() {
        // ⟨0,1⟩ ≺ ⟨1,0⟩ assigned; ⟨1,0⟩ ≺ ⟨2,0⟩ by vector clock.
        let mut o = TimelineOracle::new();
        let a = ts(1, &[0, 1]);
        let b = ts(0, &[1, 0]);
        let c = ts(0, &[2, 0]);
        for e in [&a, &b, &c] {
            o.create_event(e.clone());
        }
        o.assign_order(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        assert_eq!(o.query_order(&a, &c).unwrap(), OracleOrder::Before);
        assert_eq!(o.query_order(&c, &a).unwrap(), OracleOrder::After);
    }

    #[test]
    fn rejected_assign_is_atomic() {
        let mut o = TimelineOracle::new();
        let a = ts(0, &[1, 0, 0]);
        let b = ts(1, &[0, 1, 0]);
        let c = ts(2, &[0, 0, 1]);
        for e in [&a, &b, &c] {
            o.create_event(e.clone());
        }
        o.assign_order(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap();
        let before = o.edge_count();
        // c ≺ a is fine on its own but a ≺ b closes a cycle.
        let err = o.assign_order(&[c.clone(), a.clone()], &[a.clone(), b.clone()]);
        assert!(err.is_err());
        assert_eq!(o.edge_count(), before);
        assert_eq!(o.query_order(&c, &a).unwrap(), OracleOrder::Unordered);
    }

    #[test]
    fn unknown_event_is_reported() {
        let mut o = TimelineOracle::new();
        let a = ts(0, &[1, 0]);
        assert!(matches!(
            o.query_order(&a, &a),
            Err(OracleError::NotRegistered(_))
        ));
    }

    #[test]
    fn program_after_transaction_preference() {
        let mut o = TimelineOracle::new();
        let prog = ts(0, &[1, 0]);
        let tx = ts(1, &[0, 1]);
        o.create_event_with(
            prog.clone(),
            EventInfo {
                kind: EventKind::Program,
                arrival: 0,
            },
        );
        o.create_event_with(
            tx.clone(),
            EventInfo {
                kind: EventKind::Transaction,
                arrival: 5,
            },
        );
        let rel = o
            .order_or_assign(
                &[(prog.clone(), tx.clone())],
                OrderPreference::ProgramAfterTransactions,
            )
            .unwrap();
        assert_eq!(rel, vec![OrderRelation::After]);
        // Once decided, arrival preference cannot flip it.
        let again = o
            .order_or_assign(&[(tx.clone(), prog.clone())], OrderPreference::ArrivalOrder)
            .unwrap();
        assert_eq!(again, vec![OrderRelation::Before]);
    }

    #[test]
    fn order_set_is_total() {
        let mut o = TimelineOracle::new();
        let set = vec![ts(0, &[1, 0, 0]), ts(1, &[0, 1, 0]), ts(2, &[0, 0, 1])];
        for e in &set {
            o.create_event(e.clone());
        }
        let sorted = o.order_set(&set, OrderPreference::ArrivalOrder).unwrap();
        assert_eq!(sorted.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(
                    o.query_order(&sorted[i], &sorted[j]).unwrap(),
                    OracleOrder::Before
                );
            }
        }
        assert_eq!(o.stats().order_calls, 1);
    }

    #[test]
    fn gc_threshold_extremes() {
        let mut o = TimelineOracle::new();
        for i in 1..=5 {
            o.create_event(ts(0, &[i, 0]));
        }
        assert_eq!(o.gc_events(&ts(0, &[0, 0])), 0);
        assert_eq!(o.gc_events(&ts(0, &[10, 10])), 5);
        assert_eq!(o.event_count(), 0);
    }

    #[test]
    fn gc_keeps_orders_through_removed_events() {
        let mut o = TimelineOracle::new();
        // a → x explicit, x ≺vc y, y → b explicit; x is collected.
        let a3 = ts(1, &[0, 3, 0]);
        let x3 = ts(0, &[1, 0, 0]);
        let y3 = ts(0, &[2, 0, 0]);
        let b3 = ts(2, &[0, 0, 1]);
        for e in [&a3, &x3, &y3, &b3] {
            o.create_event(e.clone());
        }
        o.assign_order(std::slice::from_ref(&a3), std::slice::from_ref(&x3)).unwrap();
        o.assign_order(std::slice::from_ref(&y3), std::slice::from_ref(&b3)).unwrap();
        assert_eq!(o.query_order(&a3, &b3).unwrap(), OracleOrder::Before);
        let removed = o.gc_events(&ts(0, &[2, 0, 0]));
        assert_eq!(removed, 1);
        assert_eq!(o.query_order(&a3, &b3).unwrap(), OracleOrder::Before);
        assert_eq!(o.query_order(&a3, &y3).unwrap(), OracleOrder::Before);
    }

    #[test]
    fn replay_reproduces_answers() {
        let mut o = TimelineOracle::with_log();
        let events: Vec<_> = (0..4u16)
            .map(|i| {
                let mut c = vec![0; 4];
                c[i as usize] = 1;
                ts(i, &c)
            })
            .collect();
        for e in &events {
            o.create_event(e.clone());
        }
        o.order_set(&events, OrderPreference::ArrivalOrder).unwrap();
        let mut r = TimelineOracle::replay(o.command_log().unwrap()).unwrap();
        for a in &events {
            for b in &events {
                assert_eq!(o.query_order(a, b).unwrap(), r.query_order(a, b).unwrap());
            }
        }
    }
}
