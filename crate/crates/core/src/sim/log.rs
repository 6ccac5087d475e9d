//! JSONL event log.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::ids::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Seconds since the start of the run.
    pub t: f64,
    pub node: String,
    pub kind: String,
    pub detail: Value,
}

impl LogRecord {
    pub fn new(t: SimTime, node: impl Into<String>, kind: &str, detail: Value) -> Self {
        LogRecord {
            t: t.as_secs_f64(),
            node: node.into(),
            kind: kind.to_string(),
            detail,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }

    /// String field of `detail`, if present.
    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.detail.get(key).and_then(Value::as_str)
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[LogRecord]) -> io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: time goes backwards ({prev} > {t})")]
    NonMonotone { line: usize, prev: f64, t: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LogRecord>, LogError> {
    let mut out: Vec<LogRecord> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|source| LogError::Parse {
            line: i + 1,
            source,
        })?;
        if let Some(prev) = out.last() {
            if prev.t > rec.t {
                return Err(LogError::NonMonotone {
                    line: i + 1,
                    prev: prev.t,
                    t: rec.t,
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Record counts by kind plus a sha256 over the canonical lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogSummary {
    pub records: usize,
    pub end_time: f64,
    pub kinds: BTreeMap<String, usize>,
    pub delivered: Vec<String>,
    pub sha256: String,
}

pub fn summarize(records: &[LogRecord]) -> LogSummary {
    let mut kinds = BTreeMap::new();
    let mut hasher = Sha256::new();
    let mut delivered = Vec::new();
    for r in records {
        *kinds.entry(r.kind.clone()).or_insert(0) += 1;
        hasher.update(r.to_line().as_bytes());
        hasher.update(b"\n");
        if r.kind == "DELIVERED" {
            if let Some(id) = r.str_field("id") {
                delivered.push(id.to_string());
            }
        }
    }
    LogSummary {
        records: records.len(),
        end_time: records.last().map_or(0.0, |r| r.t),
        kinds,
        delivered,
        sha256: hex::encode(hasher.finalize()),
    }
}
