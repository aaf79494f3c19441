//! Softmax gating, top-k expert selection and router confidence.
//!
//! Everything here is pure and deterministic. Ties between equal
//! probabilities always resolve toward the smaller expert index so that two
//! runs over the same logits produce bit-identical selections.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Phase;

/// Raw router scores for one layer of one batch, shape `[tokens, experts]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingLogits {
    pub layer_index: usize,
    pub phase: Phase,
    values: Array2<f64>,
}

impl RoutingLogits {
    pub fn new(layer_index: usize, phase: Phase, values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Empty("routing logits have no tokens"));
        }
        if values.ncols() == 0 {
            return Err(Error::Empty("routing logits have no experts"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            layer_index,
            phase,
            values,
        })
    }

    pub fn from_rows(layer_index: usize, phase: Phase, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::ShapeMismatch {
                    what: "logit row",
                    expected: cols,
                    found: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        let values = Array2::from_shape_vec((rows.len(), cols), flat)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Self::new(layer_index, phase, values)
    }

    pub fn num_tokens(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// One `(expert, probability)` entry of a token's top-k list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertChoice {
    pub expert: usize,
    pub prob: f64,
}

/// Routing outcome for a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    /// Top-k experts, highest probability first.
    pub choices: Vec<ExpertChoice>,
    /// Full softmax distribution over all experts.
    pub probs: Vec<f64>,
}

impl TokenRoute {
    /// The rank-0 (primary) choice.
    pub fn primary(&self) -> ExpertChoice {
        self.choices[0]
    }

    pub fn selects(&self, expert: usize) -> bool {
        self.choices.iter().any(|c| c.expert == expert)
    }

    /// Top-k probabilities renormalized to sum to one, in slot order.
    pub fn gate_weights(&self) -> Vec<(usize, f64)> {
        let total: f64 = self.choices.iter().map(|c| c.prob).sum();
        self.choices
            .iter()
            .map(|c| (c.expert, c.prob / total))
            .collect()
    }
}

/// Per-token top-k selections for one layer of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSelection {
    pub layer_index: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub tokens: Vec<TokenRoute>,
}

impl ExpertSelection {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Checks the invariants of an unmodified router output.
    pub fn validate(&self) -> Result<()> {
        for token in &self.tokens {
            if token.choices.len() != self.top_k {
                return Err(Error::ShapeMismatch {
                    what: "top-k list",
                    expected: self.top_k,
                    found: token.choices.len(),
                });
            }
            if token.probs.len() != self.num_experts {
                return Err(Error::ShapeMismatch {
                    what: "probability row",
                    expected: self.num_experts,
                    found: token.probs.len(),
                });
            }
            let sum: f64 = token.probs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "token probabilities sum to {sum}"
                )));
            }
            if token.choices != top_k_select(&token.probs, self.top_k)? {
                return Err(Error::InvalidConfig(
                    "listed experts are not the top-k of the distribution".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Descending probability, then ascending index.
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Numerically stable softmax over one logit row.
pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logit row"));
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

fn softmax_view(row: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
    match row.as_slice() {
        Some(s) => softmax_probs(s),
        None => softmax_probs(&row.to_vec()),
    }
}

/// The `k` most probable experts, highest first.
pub fn top_k_select(probs: &[f64], k: usize) -> Result<Vec<ExpertChoice>> {
    if k == 0 || k > probs.len() {
        return Err(Error::InvalidTopK {
            k,
            num_experts: probs.len(),
        });
    }
    let mut indexed: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
    indexed.sort_by(|a, b| rank_order(*a, *b));
    Ok(indexed
        .into_iter()
        .take(k)
        .map(|(expert, prob)| ExpertChoice { expert, prob })
        .collect())
}

/// Softmax then top-k for every token of the batch.
pub fn route_batch(logits: &RoutingLogits, k: usize) -> Result<ExpertSelection> {
    let num_experts = logits.num_experts();
    if k == 0 || k > num_experts {
        return Err(Error::InvalidTopK { k, num_experts });
    }
    let tokens = logits
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let probs = softmax_view(row)?;
            let choices = top_k_select(&probs, k)?;
            Ok(TokenRoute { choices, probs })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertSelection {
        layer_index: logits.layer_index,
        num_experts,
        top_k: k,
        tokens,
    })
}

/// How a token's router confidence is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMetric {
    /// Probability of the rank-0 expert.
    #[default]
    TopProbability,
    /// Gap between the two largest probabilities.
    Margin,
}

impl ConfidenceMetric {
    pub fn score(self, token: &TokenRoute) -> f64 {
        match self {
            ConfidenceMetric::TopProbability => token.primary().prob,
            ConfidenceMetric::Margin => {
                let (mut first, mut second) = (f64::NEG_INFINITY, 0.0);
                for &p in &token.probs {
                    if p > first {
                        second = first.max(0.0);
                        first = p;
                    } else if p > second {
                        second = p;
                    }
                }
                first - second
            }
        }
    }
}

/// Rank-0 probability of every token.
pub fn confidence(selection: &ExpertSelection) -> Vec<f64> {
    confidence_with(selection, ConfidenceMetric::TopProbability)
}

pub fn confidence_with(selection: &ExpertSelection, metric: ConfidenceMetric) -> Vec<f64> {
    selection.tokens.iter().map(|t| metric.score(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn select(rows: &[Vec<f64>], k: usize) -> ExpertSelection {
        route_batch(&RoutingLogits::from_rows(0, Phase::Decode, rows).unwrap(), k).unwrap()
    }

    fn experts(choices: &[ExpertChoice]) -> Vec<usize> {
        choices.iter().map(|c| c.expert).collect()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        assert_eq!(softmax_probs(&[0.0; 4]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        for c in [-700.0, -3.5, 0.0, 12.0, 900.0] {
            let p = softmax_probs(&[c; 5]).unwrap();
            for v in p {
                assert_relative_eq!(v, 0.2, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn softmax_ln2_zero() {
        let p = softmax_probs(&[2f64.ln(), 0.0]).unwrap();
        assert_relative_eq!(p[0], 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(p[1], 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_probs(&[0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(softmax_probs(&[f64::INFINITY]).is_err());
        assert!(softmax_probs(&[]).is_err());
    }

    #[test]
    fn top_k_all_of_uniform() {
        let c = top_k_select(&[0.25; 4], 4).unwrap();
        assert_eq!(experts(&c), vec![0, 1, 2, 3]);
    }

    #[test]
    fn top_k_breaks_ties_toward_smaller_index() {
        let c = top_k_select(&[0.1, 0.4, 0.4, 0.1], 2).unwrap();
        assert_eq!(experts(&c), vec![1, 2]);
        assert_eq!(c[0].prob, 0.4);
    }

    #[test]
    fn top_k_matches_exhaustive_pair_oracle() {
        // Oracle: enumerate every pair and keep the one with the largest mass.
        let probs = [0.05, 0.5, 0.2, 0.25];
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for i in 0..4 {
            for j in (i + 1)..4 {
                let mass = probs[i] + probs[j];
                if mass > best.2 {
                    best = (i, j, mass);
                }
            }
        }
        assert_eq!((best.0, best.1), (1, 3));
        let c = top_k_select(&probs, 2).unwrap();
        assert_eq!(experts(&c), vec![1, 3]);
        assert_eq!(c[0].prob, 0.5);
        assert_eq!(c[1].prob, 0.25);
    }

    #[test]
    fn top_k_rejects_out_of_range() {
        assert!(top_k_select(&[0.5, 0.5], 0).is_err());
        assert!(top_k_select(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn route_single_token_tie() {
        let sel = select(&[vec![0.0, 0.0]], 1);
        assert_eq!(sel.tokens[0].choices[0].expert, 0);
        assert_eq!(sel.tokens[0].choices[0].prob, 0.5);
    }

    #[test]
    fn route_identical_rows_identical_selections() {
        let row = vec![0.3, -1.2, 2.2, 0.9];
        let sel = select(&[row.clone(), row.clone(), row], 2);
        assert_eq!(sel.num_tokens(), 3);
        assert_eq!(sel.tokens[0], sel.tokens[1]);
        assert_eq!(sel.tokens[1], sel.tokens[2]);
    }

    #[test]
    fn route_per_row_argmax() {
        let sel = select(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]], 1);
        assert_eq!(sel.tokens[0].choices[0].expert, 0);
        assert_eq!(sel.tokens[1].choices[0].expert, 3);
        sel.validate().unwrap();
    }

    #[test]
    fn confidence_examples() {
        let sel = select(&[vec![0.0; 8], vec![0.0; 8]], 2);
        assert!(confidence(&sel).iter().all(|&c| (c - 0.125).abs() < 1e-15));

        let token = TokenRoute {
            choices: top_k_select(&[0.7, 0.2, 0.1], 1).unwrap(),
            probs: vec![0.7, 0.2, 0.1],
        };
        assert_eq!(ConfidenceMetric::TopProbability.score(&token), 0.7);
        assert_relative_eq!(ConfidenceMetric::Margin.score(&token), 0.5, epsilon = 1e-15);

        let sel = select(&[vec![8f64.ln(), 0.0, 0.0]], 1);
        assert_relative_eq!(confidence(&sel)[0], 0.8, max_relative = 1e-12);
    }

    #[test]
    fn margin_of_single_expert_is_one() {
        let sel = select(&[vec![3.0]], 1);
        assert_eq!(confidence_with(&sel, ConfidenceMetric::Margin), vec![1.0]);
    }

    fn logit_row() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-30.0f64..30.0, 1..12)
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(row in logit_row(), c in -500.0f64..500.0) {
            let a = softmax_probs(&row).unwrap();
            let shifted: Vec<f64> = row.iter().map(|z| z + c).collect();
            let b = softmax_probs(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let sum: f64 = a.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(a.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn positive_scaling_keeps_top_k_set(row in logit_row(), scale in 0.1f64..10.0, k in 1usize..12) {
            let k = k.min(row.len());
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-6));
            let a = top_k_select(&softmax_probs(&row).unwrap(), k).unwrap();
            let scaled: Vec<f64> = row.iter().map(|z| z * scale).collect();
            let b = top_k_select(&softmax_probs(&scaled).unwrap(), k).unwrap();
            let mut ea = experts(&a);
            let mut eb = experts(&b);
            ea.sort_unstable();
            eb.sort_unstable();
            prop_assert_eq!(ea, eb);
        }

        #[test]
        fn confidence_monotone_in_top_logit(row in logit_row(), bump in 0.0f64..20.0) {
            let sel = select(std::slice::from_ref(&row), 1);
            let top = sel.tokens[0].primary().expert;
            let mut raised = row;
            raised[top] += bump;
            let after = select(&[raised], 1);
            prop_assert!(confidence(&after)[0] >= confidence(&sel)[0]);
        }

        #[test]
        fn routing_is_bit_deterministic(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 1..8)) {
            let a = select(&rows, 3);
            let b = select(&rows, 3);
            prop_assert_eq!(&a, &b);
            a.validate().unwrap();
        }
    }
}
