//! Client-observed operation histories.
//!
//! A history file holds one record per line with six tab-separated fields:
//! client id, op kind (`tx` or `program`), arguments (JSON), invocation
//! instant, response instant, result (JSON). Lines starting with `#` are
//! comments.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::messages::{AbortReason, Micros, ProgramFailure};
use crate::model::{Handle, TxOp, VertexState};
use crate::program::Params;
use crate::timestamp::VectorTimestamp;

/// Client id used for the bulk load that seeds a run.
pub const LOADER: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operation {
    /// Reads every handle in `reads`, then applies `writes`.
    Tx { reads: Vec<Handle>, writes: Vec<TxOp> },
    Program {
        name: String,
        starts: Vec<Handle>,
        params: Params,
    },
}

impl Operation {
    pub fn kind(&self) -> &'static str {
        match self {
            Operation::Tx { .. } => "tx",
            Operation::Program { .. } => "program",
        }
    }

    /// Vertices the operation reads or writes directly.
    pub fn vertices(&self) -> Vec<&str> {
        let mut v: Vec<&str> = match self {
            Operation::Tx { reads, writes } => reads
                .iter()
                .map(String::as_str)
                .chain(writes.iter().map(TxOp::owner))
                .collect(),
            Operation::Program { starts, .. } => starts.iter().map(String::as_str).collect(),
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn is_write(&self) -> bool {
        matches!(self, Operation::Tx { writes, .. } if !writes.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpResult {
    /// `reads` holds the live state observed for each handle of the
    /// operation's read list, in order.
    Committed {
        ts: VectorTimestamp,
        reads: Vec<Option<VertexState>>,
    },
    Aborted(AbortReason),
    Program {
        ts: Option<VectorTimestamp>,
        result: Result<Params, ProgramFailure>,
    },
    /// The client gave up waiting; the operation may or may not have taken
    /// effect.
    Unknown { reads: Vec<Option<VertexState>> },
}

impl OpResult {
    pub fn ts(&self) -> Option<&VectorTimestamp> {
        match self {
            OpResult::Committed { ts, .. } => Some(ts),
            OpResult::Program { ts, .. } => ts.as_ref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub client: u32,
    pub op: Operation,
    pub invoke: Micros,
    pub response: Micros,
    pub result: OpResult,
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryLog {
    pub records: Vec<HistoryRecord>,
}

impl HistoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: HistoryRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Orders records by invocation, then response, then client.
    pub fn sort(&mut self) {
        self.records
            .sort_by_key(|a| (a.invoke, a.response, a.client));
    }

    pub fn committed(&self) -> impl Iterator<Item = &HistoryRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r.result, OpResult::Committed { .. }))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# client\tkind\targs\tinvoke\tresponse\tresult")?;
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.client,
                r.op.kind(),
                serde_json::to_string(&r.op).expect("operations serialize"),
                r.invoke,
                r.response,
                serde_json::to_string(&r.result).expect("results serialize"),
            )?;
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a vec");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, HistoryError> {
        let mut log = HistoryLog::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| HistoryError::Parse { line: n, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let client = fields[0].parse().map_err(|e| err(format!("client: {e}")))?;
            let op: Operation =
                serde_json::from_str(fields[2]).map_err(|e| err(format!("args: {e}")))?;
            if op.kind() != fields[1] {
                return Err(err(format!("kind `{}` does not match arguments", fields[1])));
            }
            let invoke = fields[3].parse().map_err(|e| err(format!("invoke: {e}")))?;
            let response = fields[4].parse().map_err(|e| err(format!("response: {e}")))?;
            if response < invoke {
                return Err(err("response precedes invocation".into()));
            }
            let result = serde_json::from_str(fields[5]).map_err(|e| err(format!("result: {e}")))?;
            log.push(HistoryRecord {
                client,
                op,
                invoke,
                response,
                result,
            });
        }
        Ok(log)
    }

    pub fn parse(s: &str) -> Result<Self, HistoryError> {
        Self::read_from(s.as_bytes())
    }
}
