//! Training traces and their JSON-lines encoding.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Version tag written into every trace line as `"v"`.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// One logged training step.
///
/// Fields: `step`, `loss` (minibatch objective at the iterate before the
/// step), `dist_to_z` (‖x − z‖₂), `dist_to_constraint` (‖x − proj(x)‖₂),
/// `lambda`, `lr`, `rho`, `sparsity` (of the iterate), `dual_update`
/// (whether z/u were refreshed this step), optional `config_hash`, plus any
/// evaluation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(default = "schema_version")]
    pub v: u32,
    pub step: usize,
    pub loss: f64,
    pub dist_to_z: f64,
    pub dist_to_constraint: f64,
    pub lambda: f64,
    pub lr: f64,
    pub rho: f64,
    pub sparsity: f64,
    pub dual_update: bool,
    /// Hash of the experiment configuration that produced this record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

fn schema_version() -> u32 {
    TRACE_SCHEMA_VERSION
}

impl TraceRecord {
    pub fn new(step: usize, loss: f64) -> Self {
        Self {
            v: TRACE_SCHEMA_VERSION,
            step,
            loss,
            dist_to_z: 0.0,
            dist_to_constraint: 0.0,
            lambda: 0.0,
            lr: 0.0,
            rho: 0.0,
            sparsity: 0.0,
            dual_update: false,
            config_hash: None,
            metrics: BTreeMap::new(),
        }
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
