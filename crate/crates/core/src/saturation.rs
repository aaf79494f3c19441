//! How quickly a batch's union of top-k sets covers every expert.
//!
//! Each token independently draws a k-subset of experts from a categorical
//! distribution. The exact statistics use inclusion–exclusion over the set
//! of experts left untouched; a seeded Monte Carlo estimate cross-checks
//! them.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest expert count for which the general exact computation runs.
pub const MAX_EXACT_EXPERTS: usize = 20;

/// Distribution of a single token's expert set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RoutingDistribution {
    /// Every k-subset equally likely.
    Uniform,
    /// Explicit `(subset, weight)` pairs; weights need not sum to one.
    Subsets(Vec<(Vec<usize>, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub trials: usize,
    pub expected_active: f64,
    pub expected_active_se: f64,
    pub p_all_active: f64,
    pub p_all_active_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationStats {
    pub expected_active: f64,
    pub p_all_active: f64,
    pub monte_carlo: Option<MonteCarloEstimate>,
}

fn binomial(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    let r = r.min(n - r);
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn check_subsets(
    num_experts: usize,
    k: usize,
    subsets: &[(Vec<usize>, f64)],
) -> Result<Vec<(u32, f64)>> {
    if subsets.is_empty() {
        return Err(Error::Empty("routing distribution"));
    }
    let total: f64 = subsets.iter().map(|s| s.1).sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::InvalidConfig("subset weights must have a positive sum".into()));
    }
    subsets
        .iter()
        .map(|(set, w)| {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidConfig("subset weights must be non-negative".into()));
            }
            let mut mask = 0u32;
            for &e in set {
                if e >= num_experts {
                    return Err(Error::ShapeMismatch {
                        what: "expert index",
                        expected: num_experts,
                        found: e,
                    });
                }
                mask |= 1 << e;
            }
            if set.len() != k || mask.count_ones() as usize != k {
                return Err(Error::InvalidConfig(format!(
                    "subset {set:?} is not {k} distinct experts"
                )));
            }
            Ok((mask, w / total))
        })
        .collect()
}

fn validate(num_experts: usize, k: usize) -> Result<()> {
    if num_experts == 0 || k == 0 || k > num_experts {
        return Err(Error::InvalidTopK { k, num_experts });
    }
    Ok(())
}

/// Exact `(expected active experts, P(all active))`.
///
/// Uniform: `E = N(1 − ((N−k)/N)^n)` and
/// `P = Σ_j (−1)^j C(N,j) (C(N−j,k)/C(N,k))^n`. General distributions sum
/// over every avoided set `S`, with `P(token avoids S)` from a subset-sum
/// transform of the weights.
pub fn exact_saturation(
    batch_size: usize,
    num_experts: usize,
    k: usize,
    dist: &RoutingDistribution,
) -> Result<(f64, f64)> {
    validate(num_experts, k)?;
    let n = batch_size as i32;
    if batch_size * k < num_experts {
        let expected = expected_active_exact(batch_size, num_experts, k, dist)?;
        return Ok((expected, 0.0));
    }
    match dist {
        RoutingDistribution::Uniform => {
            let total = binomial(num_experts, k);
            let p = (0..=num_experts - k)
                .map(|j| {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    sign * binomial(num_experts, j) * (binomial(num_experts - j, k) / total).powi(n)
                })
                .sum::<f64>();
            let expected = expected_active_exact(batch_size, num_experts, k, dist)?;
            Ok((expected, p.clamp(0.0, 1.0)))
        }
        RoutingDistribution::Subsets(subsets) => {
            if num_experts > MAX_EXACT_EXPERTS {
                return Err(Error::InvalidConfig(format!(
                    "exact saturation supports at most {MAX_EXACT_EXPERTS} experts"
                )));
            }
            let weights = check_subsets(num_experts, k, subsets)?;
            let full = (1usize << num_experts) - 1;
            // within[m] = P(token's subset ⊆ m)
            let mut within = vec![0.0f64; full + 1];
            for &(mask, w) in &weights {
                within[mask as usize] += w;
            }
            for bit in 0..num_experts {
                for m in 0..=full {
                    if m & (1 << bit) != 0 {
                        within[m] += within[m ^ (1 << bit)];
                    }
                }
            }
            let p = (0..=full)
                .map(|avoided| {
                    let sign = if avoided.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                    sign * within[full ^ avoided].powi(n)
                })
                .sum::<f64>();
            let expected = expected_active_exact(batch_size, num_experts, k, dist)?;
            Ok((expected, p.clamp(0.0, 1.0)))
        }
    }
}

fn expected_active_exact(
    batch_size: usize,
    num_experts: usize,
    k: usize,
    dist: &RoutingDistribution,
) -> Result<f64> {
    let n = batch_size as i32;
    match dist {
        RoutingDistribution::Uniform => {
            let miss = (num_experts - k) as f64 / num_experts as f64;
            Ok(num_experts as f64 * (1.0 - miss.powi(n)))
        }
        RoutingDistribution::Subsets(subsets) => {
            let weights = check_subsets(num_experts, k, subsets)?;
            Ok((0..num_experts)
                .map(|e| {
                    let hit: f64 = weights
                        .iter()
                        .filter(|(m, _)| m & (1 << e) != 0)
                        .map(|(_, w)| w)
                        .sum();
                    1.0 - (1.0 - hit).powi(n)
                })
                .sum())
        }
    }
}

/// Seeded Monte Carlo estimate over `trials` simulated batches.
pub fn monte_carlo_saturation(
    batch_size: usize,
    num_experts: usize,
    k: usize,
    dist: &RoutingDistribution,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    validate(num_experts, k)?;
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = match dist {
        RoutingDistribution::Uniform => None,
        RoutingDistribution::Subsets(subsets) => {
            check_subsets(num_experts, k, subsets)?;
            let w = WeightedIndex::new(subsets.iter().map(|s| s.1))
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            Some((w, subsets))
        }
    };
    let mut seen = vec![false; num_experts];
    let (mut sum, mut sum_sq, mut all) = (0.0, 0.0, 0usize);
    for _ in 0..trials {
        seen.iter_mut().for_each(|s| *s = false);
        for _ in 0..batch_size {
            match &sampler {
                None => index::sample(&mut rng, num_experts, k)
                    .into_iter()
                    .for_each(|e| seen[e] = true),
                Some((w, subsets)) => subsets[w.sample(&mut rng)]
                    .0
                    .iter()
                    .for_each(|&e| seen[e] = true),
            }
        }
        let active = seen.iter().filter(|&&s| s).count() as f64;
        sum += active;
        sum_sq += active * active;
        if active as usize == num_experts {
            all += 1;
        }
    }
    let t = trials as f64;
    let mean = sum / t;
    let var = (sum_sq / t - mean * mean).max(0.0);
    let p = all as f64 / t;
    Ok(MonteCarloEstimate {
        trials,
        expected_active: mean,
        expected_active_se: (var / t).sqrt(),
        p_all_active: p,
        p_all_active_se: (p * (1.0 - p) / t).sqrt(),
    })
}

/// Exact statistics plus a Monte Carlo cross-check when `trials > 0`.
pub fn saturation_stats(
    batch_size: usize,
    num_experts: usize,
    k: usize,
    dist: &RoutingDistribution,
    trials: usize,
    seed: u64,
) -> Result<SaturationStats> {
    let (expected_active, p_all_active) = exact_saturation(batch_size, num_experts, k, dist)?;
    let monte_carlo = if trials > 0 {
        Some(monte_carlo_saturation(batch_size, num_experts, k, dist, trials, seed)?)
    } else {
        None
    };
    Ok(SaturationStats {
        expected_active,
        p_all_active,
        monte_carlo,
    })
}
