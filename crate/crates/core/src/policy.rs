//! Per-layer expert retention policies and token remapping.
//!
//! Two policies decide, for one layer of one batch, which experts stay
//! resident and where tokens whose experts were dropped are sent:
//!
//! * [`latency_policy`] drops a fixed number of the least-voted experts on
//!   every decode layer.
//! * [`accuracy_policy`] keeps the experts favoured by high-confidence tokens
//!   plus each of those tokens' primary expert, so the retained count adapts
//!   per layer.
//!
//! Both leave prefill untouched and never retain fewer than `min_experts`.
//! Every tie resolves toward the smaller expert (or token) index.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoeModelSpec, Phase};
use crate::router::{confidence_with, rank_order, ConfidenceMetric, ExpertSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    /// Latency-preserving: fixed drop count per decode layer.
    Lat,
    /// Accuracy-preserving: confidence-filtered, adaptive retention.
    Acc,
}

/// How each `(token, rank)` pair contributes to the expert vote.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteWeighting {
    /// Every selected slot counts once.
    #[default]
    Equal,
    /// Rank `r` of a top-k list counts `k - r` times.
    RankWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    /// Lat: experts dropped per decode layer.
    pub drop_count: usize,
    /// Acc: tokens at or above this confidence are important.
    pub confidence_threshold: f64,
    /// Acc: cap on the important-token subset for large batches.
    pub sample_threshold: usize,
    /// Floor on retained experts; at least `top_k`.
    pub min_experts: usize,
    /// Acc: experts kept by frequency before primary-expert additions.
    pub freq_keep_budget: usize,
    pub vote_weighting: VoteWeighting,
    pub confidence_metric: ConfidenceMetric,
}

impl PolicyConfig {
    pub fn latency(spec: &MoeModelSpec, drop_count: usize) -> Self {
        Self {
            mode: PolicyMode::Lat,
            drop_count,
            confidence_threshold: 0.5,
            sample_threshold: 8,
            min_experts: spec.top_k,
            freq_keep_budget: spec.num_experts,
            vote_weighting: VoteWeighting::Equal,
            confidence_metric: ConfidenceMetric::TopProbability,
        }
    }

    pub fn accuracy(spec: &MoeModelSpec, confidence_threshold: f64, freq_keep_budget: usize) -> Self {
        Self {
            mode: PolicyMode::Acc,
            drop_count: 0,
            confidence_threshold,
            sample_threshold: 8,
            min_experts: spec.top_k,
            freq_keep_budget,
            vote_weighting: VoteWeighting::Equal,
            confidence_metric: ConfidenceMetric::TopProbability,
        }
    }

    /// Checks the config against a model. `drop_count` is not rejected here:
    /// an oversized drop request is clipped and flagged at decision time.
    pub fn validate(&self, num_experts: usize, top_k: usize) -> Result<()> {
        if self.min_experts < top_k {
            return Err(Error::InvalidConfig(format!(
                "min_experts ({}) must be at least top_k ({top_k})",
                self.min_experts
            )));
        }
        if self.min_experts > num_experts {
            return Err(Error::InvalidConfig(format!(
                "min_experts ({}) exceeds num_experts ({num_experts})",
                self.min_experts
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if self.sample_threshold == 0 {
            return Err(Error::InvalidConfig("sample_threshold must be at least 1".into()));
        }
        Ok(())
    }
}

/// Activation counts per expert across a batch's top-k selections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    pub counts: Vec<u64>,
}

impl VoteTally {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Experts ordered most-voted first, ties toward the smaller index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        order
    }
}

/// Where one of a token's top-k slots ends up after a policy decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotAssignment {
    pub original: usize,
    pub assigned: usize,
    /// Gate weight applied to `assigned` for this slot.
    pub weight: f64,
}

/// Output of a policy for one layer: retained experts and per-token remap.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMask {
    pub layer_index: usize,
    /// Retained experts, ascending.
    pub retained: Vec<usize>,
    /// One entry per token, each holding exactly `top_k` slots.
    pub remap: Vec<Vec<SlotAssignment>>,
    /// Set when the request had to be adjusted to honour `min_experts`.
    pub clipped: bool,
}

impl ExpertMask {
    /// Every expert retained; each token keeps its own top-k.
    pub fn full(selection: &ExpertSelection) -> Self {
        Self::from_choices(selection)
    }

    /// Builds a mask that executes each token's listed choices as-is,
    /// recording them against the slot-aligned experts of `original`.
    pub fn forced(original: &ExpertSelection, forced: &ExpertSelection) -> Result<Self> {
        if original.num_tokens() != forced.num_tokens() {
            return Err(Error::ShapeMismatch {
                what: "forced selection tokens",
                expected: original.num_tokens(),
                found: forced.num_tokens(),
            });
        }
        let mut mask = Self::from_choices(forced);
        for (slots, token) in mask.remap.iter_mut().zip(&original.tokens) {
            for (slot, choice) in slots.iter_mut().zip(&token.choices) {
                slot.original = choice.expert;
            }
        }
        mask.layer_index = original.layer_index;
        mask.retained = (0..original.num_experts).collect();
        Ok(mask)
    }

    fn from_choices(selection: &ExpertSelection) -> Self {
        let remap = selection
            .tokens
            .iter()
            .map(|t| {
                t.gate_weights()
                    .into_iter()
                    .map(|(expert, weight)| SlotAssignment {
                        original: expert,
                        assigned: expert,
                        weight,
                    })
                    .collect()
            })
            .collect();
        Self {
            layer_index: selection.layer_index,
            retained: (0..selection.num_experts).collect(),
            remap,
            clipped: false,
        }
    }

    pub fn num_retained(&self) -> usize {
        self.retained.len()
    }

    /// Number of a token's slots served by an expert other than the original.
    pub fn displacement(&self, token: usize) -> usize {
        self.remap[token]
            .iter()
            .filter(|s| s.assigned != s.original)
            .count()
    }

    /// Fraction of all token slots that were remapped.
    pub fn remap_rate(&self) -> f64 {
        let slots: usize = self.remap.iter().map(Vec::len).sum();
        if slots == 0 {
            return 0.0;
        }
        let moved: usize = (0..self.remap.len()).map(|t| self.displacement(t)).sum();
        moved as f64 / slots as f64
    }

    /// Distinct experts that actually receive tokens.
    pub fn active_experts(&self) -> BTreeSet<usize> {
        self.remap
            .iter()
            .flatten()
            .filter(|s| s.weight > 0.0)
            .map(|s| s.assigned)
            .collect()
    }
}

/// Equal-weight vote over every `(token, rank)` selection.
pub fn vote_expert_frequencies(selection: &ExpertSelection) -> VoteTally {
    vote_with(selection, VoteWeighting::Equal, None)
}

/// Vote restricted to `tokens` (all tokens when `None`).
pub fn vote_with(
    selection: &ExpertSelection,
    weighting: VoteWeighting,
    tokens: Option<&[usize]>,
) -> VoteTally {
    let mut counts = vec![0u64; selection.num_experts];
    let mut add = |t: usize| {
        for (rank, choice) in selection.tokens[t].choices.iter().enumerate() {
            counts[choice.expert] += match weighting {
                VoteWeighting::Equal => 1,
                VoteWeighting::RankWeighted => (selection.top_k - rank) as u64,
            };
        }
    };
    match tokens {
        Some(ts) => ts.iter().copied().for_each(&mut add),
        None => (0..selection.num_tokens()).for_each(&mut add),
    }
    VoteTally { counts }
}

fn check_mode(config: &PolicyConfig, expected: PolicyMode) -> Result<()> {
    if config.mode != expected {
        return Err(Error::InvalidConfig(format!(
            "policy called with mode {:?}, expected {expected:?}",
            config.mode
        )));
    }
    Ok(())
}

/// Drops the `drop_count` least-voted experts on decode layers.
pub fn latency_policy(
    selection: &ExpertSelection,
    phase: Phase,
    config: &PolicyConfig,
) -> Result<ExpertMask> {
    check_mode(config, PolicyMode::Lat)?;
    config.validate(selection.num_experts, selection.top_k)?;
    if phase == Phase::Prefill {
        return Ok(ExpertMask::full(selection));
    }
    let n = selection.num_experts;
    let max_drop = n - config.min_experts;
    let clipped = config.drop_count > max_drop;
    let drop = config.drop_count.min(max_drop);

    let tally = vote_with(selection, config.vote_weighting, None);
    // least-voted first; among equals the larger index goes first
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tally.counts[a].cmp(&tally.counts[b]).then(b.cmp(&a)));
    let dropped: BTreeSet<usize> = order.into_iter().take(drop).collect();
    let retained: Vec<usize> = (0..n).filter(|e| !dropped.contains(e)).collect();

    Ok(ExpertMask {
        layer_index: selection.layer_index,
        remap: remap_tokens(selection, &retained)?,
        retained,
        clipped,
    })
}

/// Tokens whose confidence reaches the threshold, capped at
/// `sample_threshold` for large batches and never empty.
pub fn select_important_tokens(selection: &ExpertSelection, config: &PolicyConfig) -> Vec<usize> {
    let conf = confidence_with(selection, config.confidence_metric);
    if conf.is_empty() {
        return Vec::new();
    }
    let mut picked: Vec<usize> = (0..conf.len())
        .filter(|&t| conf[t] >= config.confidence_threshold)
        .collect();

    if picked.is_empty() {
        let best = (0..conf.len())
            .min_by(|&a, &b| rank_order((a, conf[a]), (b, conf[b])))
            .expect("non-empty batch");
        return vec![best];
    }
    if conf.len() > config.sample_threshold && picked.len() > config.sample_threshold {
        picked.sort_by(|&a, &b| rank_order((a, conf[a]), (b, conf[b])));
        picked.truncate(config.sample_threshold);
        picked.sort_unstable();
    }
    picked
}

/// Confidence-filtered retention with adaptive per-layer expert count.
pub fn accuracy_policy(
    selection: &ExpertSelection,
    phase: Phase,
    config: &PolicyConfig,
) -> Result<ExpertMask> {
    check_mode(config, PolicyMode::Acc)?;
    config.validate(selection.num_experts, selection.top_k)?;
    if phase == Phase::Prefill {
        return Ok(ExpertMask::full(selection));
    }
    let n = selection.num_experts;
    let important = select_important_tokens(selection, config);
    let focus = vote_with(selection, config.vote_weighting, Some(&important));
    let whole = vote_with(selection, config.vote_weighting, None);

    let mut retained: BTreeSet<usize> = focus
        .ranked()
        .into_iter()
        .filter(|&e| focus.counts[e] > 0)
        .take(config.freq_keep_budget)
        .collect();
    for &t in &important {
        retained.insert(selection.tokens[t].primary().expert);
    }

    let mut clipped = false;
    if retained.len() < config.min_experts {
        let mut backfill: Vec<usize> = (0..n).filter(|e| !retained.contains(e)).collect();
        backfill.sort_by(|&a, &b| {
            focus.counts[b]
                .cmp(&focus.counts[a])
                .then(whole.counts[b].cmp(&whole.counts[a]))
                .then(a.cmp(&b))
        });
        let missing = config.min_experts - retained.len();
        retained.extend(backfill.into_iter().take(missing));
        clipped = true;
    }
    let retained: Vec<usize> = retained.into_iter().collect();

    Ok(ExpertMask {
        layer_index: selection.layer_index,
        remap: remap_tokens(selection, &retained)?,
        retained,
        clipped,
    })
}

/// Dispatches on `config.mode`.
pub fn apply_policy(
    selection: &ExpertSelection,
    phase: Phase,
    config: &PolicyConfig,
) -> Result<ExpertMask> {
    match config.mode {
        PolicyMode::Lat => latency_policy(selection, phase, config),
        PolicyMode::Acc => accuracy_policy(selection, phase, config),
    }
}

/// Sends each token slot whose expert was dropped to the token's most
/// probable retained expert not already used by another of its slots.
///
/// When fewer distinct retained experts exist than slots, extra slots reuse
/// the best one. Gate weights are the token's probabilities over its distinct
/// assigned experts, renormalized; a repeated expert carries its weight on its
/// first slot and zero on the duplicates.
pub fn remap_tokens(
    selection: &ExpertSelection,
    retained: &[usize],
) -> Result<Vec<Vec<SlotAssignment>>> {
    if retained.is_empty() {
        return Err(Error::EmptyRetainedSet);
    }
    if let Some(&bad) = retained.iter().find(|&&e| e >= selection.num_experts) {
        return Err(Error::InvalidConfig(format!(
            "retained expert {bad} out of range for {} experts",
            selection.num_experts
        )));
    }
    let keep: BTreeSet<usize> = retained.iter().copied().collect();

    let remap = selection
        .tokens
        .iter()
        .map(|token| {
            let mut preference: Vec<usize> = keep.iter().copied().collect();
            preference.sort_by(|&a, &b| rank_order((a, token.probs[a]), (b, token.probs[b])));

            let mut assigned: Vec<Option<usize>> = token
                .choices
                .iter()
                .map(|c| keep.contains(&c.expert).then_some(c.expert))
                .collect();
            let mut used: BTreeSet<usize> = assigned.iter().flatten().copied().collect();
            for slot in assigned.iter_mut().filter(|s| s.is_none()) {
                let pick = preference
                    .iter()
                    .copied()
                    .find(|e| !used.contains(e))
                    .unwrap_or(preference[0]);
                used.insert(pick);
                *slot = Some(pick);
            }

            let total: f64 = used.iter().map(|&e| token.probs[e]).sum();
            let mut seen = BTreeSet::new();
            token
                .choices
                .iter()
                .zip(assigned)
                .map(|(choice, slot)| {
                    let e = slot.expect("every slot assigned");
                    let weight = if seen.insert(e) {
                        if total > 0.0 {
                            token.probs[e] / total
                        } else {
                            1.0 / used.len() as f64
                        }
                    } else {
                        0.0
                    };
                    SlotAssignment {
                        original: choice.expert,
                        assigned: e,
                        weight,
                    }
                })
                .collect()
        })
        .collect();
    Ok(remap)
}
