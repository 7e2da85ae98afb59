//! Vector timestamps with epochs.
//!
//! A timestamp is issued by one gatekeeper and doubles as the identity of the
//! transaction or node program it stamps: `(epoch, issuer, clocks[issuer])`
//! is unique across the cluster.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, DecodeError, Reader};

pub type GatekeeperId = u16;
pub type Epoch = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrderRelation {
    Before,
    After,
    Equal,
    Concurrent,
}

impl OrderRelation {
    pub fn flip(self) -> OrderRelation {
        match self {
            OrderRelation::Before => OrderRelation::After,
            OrderRelation::After => OrderRelation::Before,
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimestampError {
    #[error("clock length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("stale announce from epoch {announced} while at epoch {local}")]
    StaleAnnounce { local: Epoch, announced: Epoch },
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VectorTimestamp {
    pub epoch: Epoch,
    pub issuer: GatekeeperId,
    pub clocks: Vec<u64>,
}

impl VectorTimestamp {
    /// The all-zero clock a gatekeeper starts each epoch with.
    pub fn zero(epoch: Epoch, issuer: GatekeeperId, gatekeepers: usize) -> Self {
        VectorTimestamp {
            epoch,
            issuer,
            clocks: vec![0; gatekeepers],
        }
    }

    pub fn new(epoch: Epoch, issuer: GatekeeperId, clocks: Vec<u64>) -> Self {
        VectorTimestamp {
            epoch,
            issuer,
            clocks,
        }
    }

    pub fn len(&self) -> usize {
        self.clocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clocks.is_empty()
    }

    /// The issuer's own counter; together with epoch and issuer it identifies
    /// the event.
    pub fn local(&self) -> u64 {
        self.clocks[self.issuer as usize]
    }

    pub fn compare(&self, other: &VectorTimestamp) -> Result<OrderRelation, TimestampError> {
        if self.clocks.len() != other.clocks.len() {
            return Err(TimestampError::LengthMismatch {
                left: self.clocks.len(),
                right: other.clocks.len(),
            });
        }
        match self.epoch.cmp(&other.epoch) {
            Ordering::Less => return Ok(OrderRelation::Before),
            Ordering::Greater => return Ok(OrderRelation::After),
            Ordering::Equal => {}
        }
        let mut le = true;
        let mut ge = true;
        for (a, b) in self.clocks.iter().zip(&other.clocks) {
            le &= a <= b;
            ge &= a >= b;
        }
        Ok(match (le, ge) {
            (true, true) if self.issuer == other.issuer => OrderRelation::Equal,
            // Identical counters from different issuers cannot both be issued
            // timestamps; treat them as unordered rather than equal.
            (true, true) => OrderRelation::Concurrent,
            (true, false) => OrderRelation::Before,
            (false, true) => OrderRelation::After,
            (false, false) => OrderRelation::Concurrent,
        })
    }

    /// Panicking variant of [`compare`](Self::compare) for callers that have
    /// already validated cluster configuration.
    pub fn relation(&self, other: &VectorTimestamp) -> OrderRelation {
        self.compare(other).expect("vector timestamps of one cluster")
    }

    pub fn happens_before(&self, other: &VectorTimestamp) -> bool {
        matches!(self.compare(other), Ok(OrderRelation::Before))
    }

    pub fn merge(&self, announced: &VectorTimestamp) -> Result<VectorTimestamp, TimestampError> {
        if self.epoch != announced.epoch {
            return Err(TimestampError::StaleAnnounce {
                local: self.epoch,
                announced: announced.epoch,
            });
        }
        if self.clocks.len() != announced.clocks.len() {
            return Err(TimestampError::LengthMismatch {
                left: self.clocks.len(),
                right: announced.clocks.len(),
            });
        }
        let clocks = self
            .clocks
            .iter()
            .zip(&announced.clocks)
            .map(|(a, b)| *a.max(b))
            .collect();
        Ok(VectorTimestamp {
            epoch: self.epoch,
            issuer: self.issuer,
            clocks,
        })
    }

    pub fn increment_local(&self) -> VectorTimestamp {
        let mut next = self.clone();
        next.clocks[self.issuer as usize] += 1;
        next
    }

    /// Pointwise minimum; used to combine garbage-collection watermarks.
    pub fn pointwise_min(&self, other: &VectorTimestamp) -> VectorTimestamp {
        let clocks = self
            .clocks
            .iter()
            .zip(&other.clocks)
            .map(|(a, b)| *a.min(b))
            .collect();
        VectorTimestamp {
            epoch: self.epoch.min(other.epoch),
            issuer: self.issuer,
            clocks,
        }
    }

    pub fn clock_sum(&self) -> u64 {
        self.clocks.iter().sum()
    }

    pub fn encode(&self, buf: &mut Vec<u8>) {
        codec::put_u64(buf, self.epoch);
        codec::put_u16(buf, self.issuer);
        codec::put_u16(buf, self.clocks.len() as u16);
        for c in &self.clocks {
            codec::put_u64(buf, *c);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * self.clocks.len());
        self.encode(&mut buf);
        buf
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<VectorTimestamp, DecodeError> {
        let epoch = r.u64()?;
        let issuer = r.u16()?;
        let n = r.u16()? as usize;
        if issuer as usize >= n.max(1) && n > 0 {
            return Err(DecodeError::Malformed("issuer outside clock array"));
        }
        let mut clocks = Vec::with_capacity(n);
        for _ in 0..n {
            clocks.push(r.u64()?);
        }
        Ok(VectorTimestamp {
            epoch,
            issuer,
            clocks,
        })
    }
}

impl fmt::Debug for VectorTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for VectorTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}/g{}⟨", self.epoch, self.issuer)?;
        for (i, c) in self.clocks.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("⟩")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(issuer: u16, clocks: &[u64]) -> VectorTimestamp {
        VectorTimestamp::new(0, issuer, clocks.to_vec())
    }

    #[test]
    fn announced_clock_precedes_later_issue() {
        let t1 = ts(0, &[1, 1, 0]);
        let t2 = ts(1, &[3, 4, 2]);
        assert_eq!(t1.compare(&t2).unwrap(), OrderRelation::Before);
        assert_eq!(t2.compare(&t1).unwrap(), OrderRelation::After);
    }

    #[test]
    fn crossing_clocks_are_concurrent() {
        let t2 = ts(1, &[3, 4, 2]);
        let t4 = ts(2, &[3, 1, 5]);
        assert_eq!(t2.compare(&t4).unwrap(), OrderRelation::Concurrent);
    }

    #[test]
    fn identical_is_equal() {
        let a = ts(1, &[2, 3]);
        assert_eq!(a.compare(&a).unwrap(), OrderRelation::Equal);
    }

    #[test]
    fn epoch_dominates_counters() {
        let old = VectorTimestamp::new(0, 0, vec![9, 9, 9]);
        let new = VectorTimestamp::new(1, 0, vec![1, 0, 0]);
        assert_eq!(old.compare(&new).unwrap(), OrderRelation::Before);
    }

    #[test]
    fn length_mismatch_is_structural_error() {
        let a = ts(0, &[1, 2]);
        let b = ts(0, &[1, 2, 3]);
        assert!(matches!(
            a.compare(&b),
            Err(TimestampError::LengthMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn merge_is_pointwise_max() {
        let local = ts(0, &[3, 1, 0]);
        let announced = ts(1, &[1, 4, 2]);
        let merged = local.merge(&announced).unwrap();
        let expected: Vec<u64> = local
            .clocks
            .iter()
            .zip(&announced.clocks)
            .map(|(a, b)| std::cmp::max(*a, *b))
            .collect();
        assert_eq!(merged.clocks, expected);
        assert_eq!(merged.clocks, vec![3, 4, 2]);
        assert_eq!(merged.issuer, 0);
    }

    #[test]
    fn merge_identity_cases() {
        let x = ts(0, &[4, 2]);
        assert_eq!(x.merge(&x).unwrap(), x);
        let zero = ts(0, &[0, 0]);
        assert_eq!(zero.merge(&ts(1, &[0, 5])).unwrap().clocks, vec![0, 5]);
    }

    #[test]
    fn merge_rejects_other_epoch() {
        let a = VectorTimestamp::new(1, 0, vec![1, 0]);
        let b = VectorTimestamp::new(0, 1, vec![0, 1]);
        assert!(matches!(
            a.merge(&b),
            Err(TimestampError::StaleAnnounce {
                local: 1,
                announced: 0
            })
        ));
    }

    #[test]
    fn increment_touches_only_issuer() {
        assert_eq!(ts(0, &[2, 7]).increment_local().clocks, vec![3, 7]);
        assert_eq!(ts(1, &[2, 7]).increment_local().clocks, vec![2, 8]);
    }

    #[test]
    fn repeated_increments_count() {
        let mut t = ts(2, &[5, 5, 5]);
        let n = 37;
        let mut expected = t.clocks.clone();
        for _ in 0..n {
            t = t.increment_local();
            expected[2] += 1;
        }
        assert_eq!(t.clocks, expected);
    }

    #[test]
    fn canonical_encoding_layout() {
        let t = VectorTimestamp::new(2, 1, vec![7, 9]);
        let bytes = t.to_bytes();
        let mut expected = Vec::new();
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(&7u64.to_le_bytes());
        expected.extend_from_slice(&9u64.to_le_bytes());
        assert_eq!(bytes, expected);
        let mut r = Reader::new(&bytes);
        assert_eq!(VectorTimestamp::decode(&mut r).unwrap(), t);
        r.finish().unwrap();
    }

    fn arb_ts(n: usize) -> impl Strategy<Value = VectorTimestamp> {
        (0..n as u16, prop::collection::vec(0u64..6, n))
            .prop_map(|(issuer, clocks)| VectorTimestamp::new(0, issuer, clocks))
    }

    proptest! {
        #[test]
        fn antisymmetry(a in arb_ts(3), b in arb_ts(3)) {
            let ab = a.compare(&b).unwrap();
            let ba = b.compare(&a).unwrap();
            prop_assert_eq!(ab, ba.flip());
        }

        #[test]
        fn before_is_transitive(a in arb_ts(3), b in arb_ts(3), c in arb_ts(3)) {
            if a.happens_before(&b) && b.happens_before(&c) {
                prop_assert!(a.happens_before(&c));
            }
        }

        #[test]
        fn merge_semilattice(a in arb_ts(4), b in arb_ts(4), c in arb_ts(4)) {
            let ab = a.merge(&b).unwrap();
            let ba = b.merge(&a).unwrap();
            prop_assert_eq!(&ab.clocks, &ba.clocks);
            let left = a.merge(&b).unwrap().merge(&c).unwrap();
            let right = a.merge(&b.merge(&c).unwrap()).unwrap();
            prop_assert_eq!(&left.clocks, &right.clocks);
            prop_assert_eq!(a.merge(&a).unwrap(), a);
        }

        #[test]
        fn announce_then_increment_orders(a in arb_ts(3), local in arb_ts(3)) {
            // `a` was issued (its issuer counter is positive) and announced;
            // the receiver merges and issues its next timestamp.
            let mut issued = a.clone();
            issued.clocks[issued.issuer as usize] += 1;
            let next = local.merge(&issued).unwrap().increment_local();
            prop_assert_eq!(issued.compare(&next).unwrap(), OrderRelation::Before);
        }

        #[test]
        fn encoding_round_trips(a in arb_ts(5), epoch in 0u64..1000) {
            let a = VectorTimestamp { epoch, ..a };
            let bytes = a.to_bytes();
            let mut r = Reader::new(&bytes);
            prop_assert_eq!(VectorTimestamp::decode(&mut r).unwrap(), a);
        }
    }
}
