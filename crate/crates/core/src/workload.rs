//! Synthetic routing traces: i.i.d. tokens or batches with expert affinity.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Phase;
use crate::policy::ExpertMask;
use crate::router::{confidence, route_batch, RoutingLogits};
use crate::sim::LayerDecision;
use crate::trace::{records_from_decisions, TraceRecord};

/// Per-batch affinity: a fresh random group of experts receives a logit
/// bonus for every token of the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub group_size: usize,
    pub logit_bonus: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub num_experts: usize,
    pub top_k: usize,
    pub num_layers: usize,
    pub batch_size: usize,
    pub num_batches: usize,
    /// Standard deviation of the i.i.d. Gaussian router logits.
    pub logit_scale: f64,
    pub clustering: Option<Clustering>,
}

impl WorkloadSpec {
    pub fn iid(num_experts: usize, top_k: usize, batch_size: usize, num_batches: usize) -> Self {
        Self {
            num_experts,
            top_k,
            num_layers: 1,
            batch_size,
            num_batches,
            logit_scale: 1.0,
            clustering: None,
        }
    }

    /// Each batch favours a random pair of experts.
    pub fn clustered(num_experts: usize, top_k: usize, batch_size: usize, num_batches: usize) -> Self {
        Self {
            clustering: Some(Clustering {
                group_size: 2,
                logit_bonus: 3.0,
            }),
            ..Self::iid(num_experts, top_k, batch_size, num_batches)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::InvalidTopK {
                k: self.top_k,
                num_experts: self.num_experts,
            });
        }
        if self.num_layers == 0 || self.batch_size == 0 || self.num_batches == 0 {
            return Err(Error::InvalidConfig(
                "num_layers, batch_size and num_batches must be at least 1".into(),
            ));
        }
        if let Some(c) = self.clustering {
            if c.group_size == 0 || c.group_size > self.num_experts {
                return Err(Error::InvalidConfig(format!(
                    "cluster group_size must lie in 1..={}",
                    self.num_experts
                )));
            }
        }
        Ok(())
    }
}

/// Decode-phase trace with full retention (assigned == original).
pub fn generate_trace(spec: &WorkloadSpec, run_id: &str, seed: u64) -> Result<Vec<TraceRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(
        spec.num_batches * spec.num_layers * spec.batch_size * spec.top_k,
    );
    for batch in 0..spec.num_batches {
        let favoured = spec
            .clustering
            .map(|c| index::sample(&mut rng, spec.num_experts, c.group_size).into_vec());
        let mut decisions = Vec::with_capacity(spec.num_layers);
        for layer in 0..spec.num_layers {
            let rows: Vec<Vec<f64>> = (0..spec.batch_size)
                .map(|_| {
                    let mut row: Vec<f64> = (0..spec.num_experts)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * spec.logit_scale
                        })
                        .collect();
                    if let (Some(group), Some(c)) = (&favoured, spec.clustering) {
                        for &e in group {
                            row[e] += c.logit_bonus;
                        }
                    }
                    row
                })
                .collect();
            let logits = RoutingLogits::from_rows(layer, Phase::Decode, &rows)?;
            let selection = route_batch(&logits, spec.top_k)?;
            decisions.push(LayerDecision {
                pass: 0,
                phase: Phase::Decode,
                confidence: confidence(&selection),
                mask: ExpertMask::full(&selection),
                selection,
            });
        }
        out.extend(records_from_decisions(run_id, batch, &decisions));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_count() {
        let mut spec = WorkloadSpec::iid(8, 2, 5, 3);
        spec.num_layers = 2;
        let t = generate_trace(&spec, "w", 1).unwrap();
        assert_eq!(t.len(), 3 * 2 * 5 * 2);
        assert!(t.iter().all(|r| r.expert_assigned == r.expert_original));
    }

    #[test]
    fn seeded() {
        let spec = WorkloadSpec::clustered(8, 2, 4, 4);
        assert_eq!(generate_trace(&spec, "w", 3).unwrap(), generate_trace(&spec, "w", 3).unwrap());
        assert_ne!(generate_trace(&spec, "w", 3).unwrap(), generate_trace(&spec, "w", 4).unwrap());
    }

    #[test]
    fn rejects_bad_group() {
        let mut spec = WorkloadSpec::clustered(4, 1, 4, 4);
        spec.clustering = Some(Clustering {
            group_size: 5,
            logit_bonus: 1.0,
        });
        assert!(generate_trace(&spec, "w", 0).is_err());
    }
}
