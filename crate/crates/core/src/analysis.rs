//! Activation-frequency statistics over routing traces.
//!
//! Frequencies are fractions of token-slots (token × rank pairs) and count
//! each slot's original expert, i.e. the router's choice before any policy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Phase;
use crate::trace::TraceRecord;

/// Identifies one batch across merged traces.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BatchKey {
    pub run_id: String,
    pub batch_id: usize,
}

/// Restricts which records are counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceFilter {
    pub layer: Option<usize>,
    pub phase: Option<Phase>,
}

impl TraceFilter {
    pub fn accepts(&self, r: &TraceRecord) -> bool {
        self.layer.is_none_or(|l| l == r.layer) && self.phase.is_none_or(|p| p == r.phase)
    }
}

/// Per-batch expert counts. Tallies over disjoint shards can be merged in
/// any order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTally {
    pub num_experts: usize,
    pub batches: BTreeMap<BatchKey, Vec<u64>>,
}

impl FrequencyTally {
    pub fn new(num_experts: usize) -> Self {
        Self {
            num_experts,
            batches: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, record: &TraceRecord) -> Result<()> {
        if record.expert_original >= self.num_experts {
            return Err(Error::ShapeMismatch {
                what: "expert index",
                expected: self.num_experts,
                found: record.expert_original,
            });
        }
        let key = BatchKey {
            run_id: record.run_id.clone(),
            batch_id: record.batch_id,
        };
        self.batches
            .entry(key)
            .or_insert_with(|| vec![0; self.num_experts])[record.expert_original] += 1;
        Ok(())
    }

    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a TraceRecord>,
        num_experts: usize,
        filter: TraceFilter,
    ) -> Result<Self> {
        let mut tally = Self::new(num_experts);
        for r in records.into_iter().filter(|r| filter.accepts(r)) {
            tally.add(r)?;
        }
        Ok(tally)
    }

    pub fn merge(mut self, other: &FrequencyTally) -> Result<Self> {
        if other.num_experts != self.num_experts {
            return Err(Error::ShapeMismatch {
                what: "tally width",
                expected: self.num_experts,
                found: other.num_experts,
            });
        }
        for (key, counts) in &other.batches {
            let mine = self
                .batches
                .entry(key.clone())
                .or_insert_with(|| vec![0; counts.len()]);
            for (m, c) in mine.iter_mut().zip(counts) {
                *m += c;
            }
        }
        Ok(self)
    }

    pub fn total_counts(&self) -> Vec<u64> {
        let mut total = vec![0; self.num_experts];
        for counts in self.batches.values() {
            for (t, c) in total.iter_mut().zip(counts) {
                *t += c;
            }
        }
        total
    }

    pub fn aggregate(&self) -> Result<Vec<f64>> {
        normalize(&self.total_counts()).ok_or(Error::Empty("trace"))
    }

    pub fn stats(&self) -> Result<ActivationStats> {
        if self.batches.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch skew needs at least 2 batches, found {}",
                self.batches.len()
            )));
        }
        let aggregate_freq = self.aggregate()?;
        let per_batch_freq: Vec<Vec<f64>> = self
            .batches
            .values()
            .map(|c| normalize(c).expect("batches hold at least one slot"))
            .collect();
        let per_batch_std: Vec<f64> = (0..self.num_experts)
            .map(|e| population_std(per_batch_freq.iter().map(|row| row[e])))
            .collect();
        let aggregate_std = population_std(aggregate_freq.iter().copied());
        let max_batch_std = per_batch_std.iter().copied().fold(0.0, f64::max);
        let skew_ratio = if aggregate_std > 0.0 {
            max_batch_std / aggregate_std
        } else if max_batch_std > 0.0 {
            f64::INFINITY
        } else {
            1.0
        };
        Ok(ActivationStats {
            num_experts: self.num_experts,
            batches: self.batches.keys().cloned().collect(),
            batch_slots: self.batches.values().map(|c| c.iter().sum()).collect(),
            aggregate_freq,
            per_batch_freq,
            aggregate_std,
            per_batch_std,
            skew_ratio,
        })
    }
}

fn normalize(counts: &[u64]) -> Option<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn population_std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    (xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub num_experts: usize,
    pub batches: Vec<BatchKey>,
    /// Token-slots per batch, aligned with `batches`.
    pub batch_slots: Vec<u64>,
    pub aggregate_freq: Vec<f64>,
    /// `[batches × num_experts]`, each row summing to 1.
    pub per_batch_freq: Vec<Vec<f64>>,
    /// Standard deviation across experts of the aggregate frequency.
    pub aggregate_std: f64,
    /// Per expert, standard deviation of its frequency across batches.
    pub per_batch_std: Vec<f64>,
    /// `max(per_batch_std) / aggregate_std`.
    pub skew_ratio: f64,
}

/// One past the largest expert index in the trace.
pub fn infer_num_experts(trace: &[TraceRecord]) -> usize {
    trace
        .iter()
        .map(|r| r.expert_original.max(r.expert_assigned) + 1)
        .max()
        .unwrap_or(0)
}

pub fn aggregate_frequencies(trace: &[TraceRecord], num_experts: usize) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::Empty("trace"));
    }
    FrequencyTally::from_records(trace, num_experts, TraceFilter::default())?.aggregate()
}

/// Skew statistics with every layer pooled.
pub fn batch_skew_report(trace: &[TraceRecord], num_experts: usize) -> Result<ActivationStats> {
    batch_skew_filtered(trace, num_experts, TraceFilter::default())
}

pub fn batch_skew_filtered(
    trace: &[TraceRecord],
    num_experts: usize,
    filter: TraceFilter,
) -> Result<ActivationStats> {
    FrequencyTally::from_records(trace, num_experts, filter)?.stats()
}

/// Skew statistics computed separately for each layer.
pub fn batch_skew_by_layer(
    trace: &[TraceRecord],
    num_experts: usize,
    phase: Option<Phase>,
) -> Result<BTreeMap<usize, ActivationStats>> {
    let layers: BTreeSet<usize> = trace.iter().map(|r| r.layer).collect();
    layers
        .into_iter()
        .map(|layer| {
            let filter = TraceFilter {
                layer: Some(layer),
                phase,
            };
            Ok((layer, batch_skew_filtered(trace, num_experts, filter)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReduction {
    pub layer: usize,
    /// Layer-batches observed.
    pub batches: usize,
    pub mean_active: f64,
    pub min_active: usize,
    pub max_active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub layers: Vec<LayerReduction>,
    pub mean_active: f64,
    pub min_active: usize,
    pub max_active: usize,
    /// Distinct experts actually served per layer-batch → occurrences.
    pub active_histogram: BTreeMap<usize, usize>,
    /// Fraction of token-slots whose assigned expert differs from the original.
    pub remap_rate: f64,
    /// Fraction of (batch, layer, token) rows at or above the threshold.
    pub important_fraction: Option<f64>,
}

/// Experts served per layer-batch, counted as distinct assigned experts
/// among slots with non-zero weight.
pub fn reduction_summary(
    trace: &[TraceRecord],
    phase: Option<Phase>,
    confidence_threshold: Option<f64>,
) -> Result<ReductionSummary> {
    let filter = TraceFilter { layer: None, phase };
    let records: Vec<&TraceRecord> = trace.iter().filter(|r| filter.accepts(r)).collect();
    if records.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let mut served: BTreeMap<(usize, &str, usize), BTreeSet<usize>> = BTreeMap::new();
    let mut tokens: BTreeMap<(usize, &str, usize, usize), f64> = BTreeMap::new();
    let mut remapped = 0usize;
    for r in &records {
        let set = served.entry((r.layer, r.run_id.as_str(), r.batch_id)).or_default();
        if r.weight > 0.0 {
            set.insert(r.expert_assigned);
        }
        if r.expert_assigned != r.expert_original {
            remapped += 1;
        }
        tokens.insert((r.layer, r.run_id.as_str(), r.batch_id, r.token_id), r.confidence);
    }

    let mut per_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut histogram = BTreeMap::new();
    for ((layer, _, _), set) in &served {
        per_layer.entry(*layer).or_default().push(set.len());
        *histogram.entry(set.len()).or_insert(0) += 1;
    }
    let layers: Vec<LayerReduction> = per_layer
        .iter()
        .map(|(&layer, counts)| LayerReduction {
            layer,
            batches: counts.len(),
            mean_active: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
            min_active: *counts.iter().min().expect("non-empty"),
            max_active: *counts.iter().max().expect("non-empty"),
        })
        .collect();
    let all: Vec<usize> = per_layer.values().flatten().copied().collect();
    Ok(ReductionSummary {
        mean_active: all.iter().sum::<usize>() as f64 / all.len() as f64,
        min_active: *all.iter().min().expect("non-empty"),
        max_active: *all.iter().max().expect("non-empty"),
        layers,
        active_histogram: histogram,
        remap_rate: remapped as f64 / records.len() as f64,
        important_fraction: confidence_threshold.map(|tau| {
            tokens.values().filter(|&&c| c >= tau).count() as f64 / tokens.len() as f64
        }),
    })
}
