//! JSON-lines routing traces: one record per (batch, layer, token, rank).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Phase;
use crate::sim::LayerDecision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub run_id: String,
    pub layer: usize,
    pub batch_id: usize,
    pub phase: Phase,
    pub token_id: usize,
    pub rank: usize,
    pub expert_original: usize,
    pub expert_assigned: usize,
    pub weight: f64,
    pub confidence: f64,
}

impl TraceRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.weight.is_finite() && (0.0..=1.0).contains(&self.weight)) {
            return Err(format!("weight {} outside [0, 1]", self.weight));
        }
        if !(self.confidence.is_finite() && (0.0..=1.0).contains(&self.confidence)) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        Ok(())
    }
}

/// Flattens recorded layer decisions. Forward pass `p` becomes batch
/// `batch_offset + p`; token ids index rows within that batch.
pub fn records_from_decisions(
    run_id: &str,
    batch_offset: usize,
    decisions: &[LayerDecision],
) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    for d in decisions {
        for (token_id, slots) in d.mask.remap.iter().enumerate() {
            for (rank, slot) in slots.iter().enumerate() {
                out.push(TraceRecord {
                    run_id: run_id.to_string(),
                    layer: d.mask.layer_index,
                    batch_id: batch_offset + d.pass,
                    phase: d.phase,
                    token_id,
                    rank,
                    expert_original: slot.original,
                    expert_assigned: slot.assigned,
                    weight: slot.weight,
                    confidence: d.confidence[token_id],
                });
            }
        }
    }
    out
}

pub fn write_trace<W: Write>(mut writer: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Streams records, failing on the first malformed line with its 1-based
/// line number. Blank lines are skipped.
pub fn trace_records<R: BufRead>(reader: R) -> impl Iterator<Item = Result<TraceRecord>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::Io(e))),
            };
            if line.trim().is_empty() {
                return None;
            }
            let parsed = serde_json::from_str::<TraceRecord>(&line)
                .map_err(|e| e.to_string())
                .and_then(|r| r.validate().map(|_| r));
            Some(parsed.map_err(|message| Error::Parse {
                line: i + 1,
                message,
            }))
        })
}

pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>> {
    trace_records(reader).collect()
}
