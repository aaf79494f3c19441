//! Seeded synthetic MoE transformer for routing-level experiments.
//!
//! Each layer is a single-head causal attention block followed by an MoE
//! feed-forward block with `num_experts` two-matrix SiLU experts. Prompts
//! are embedded from a small vocabulary. Decode is deterministic: each
//! step's input is either the embedding of the greedy (argmax) next token or
//! the previous step's final hidden state rescaled to unit RMS, selected by
//! [`DecodeFeedback`].
//!
//! Interventions operate on each layer's [`ExpertSelection`] before the
//! experts run, so the same machinery drives policy runs, rank denial and
//! confidence-group reassignment.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoeModelSpec, Phase};
use crate::policy::{apply_policy, ExpertMask, PolicyConfig};
use crate::router::{
    confidence, rank_order, route_batch, ExpertChoice, ExpertSelection, RoutingLogits,
};

/// What the next decode step consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeFeedback {
    /// Embedding of the argmax token under the output projection.
    Token,
    /// Final hidden state, rescaled to unit RMS.
    Hidden,
}

/// Knobs of the synthetic model that are not part of the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Standard deviation of router logits for a unit-variance hidden state.
    pub router_scale: f64,
    /// Expert output scale relative to a variance-preserving branch.
    pub expert_gain: f64,
    pub vocab_size: usize,
    pub feedback: DecodeFeedback,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            router_scale: 2.0,
            expert_gain: 0.5,
            vocab_size: 64,
            feedback: DecodeFeedback::Token,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMlp {
    /// `[d_model, d_ff]`
    pub up: Array2<f64>,
    /// `[d_ff, d_model]`
    pub down: Array2<f64>,
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl ExpertMlp {
    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        x.dot(&self.up).mapv_into(silu).dot(&self.down)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Attention {
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    output: Array2<f64>,
}

/// A fully seeded MoE model; two builds with the same `(spec, seed, options)`
/// are bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMoe {
    pub spec: MoeModelSpec,
    pub seed: u64,
    pub options: SimOptions,
    /// Per layer, `[d_model, num_experts]`.
    pub routers: Vec<Array2<f64>>,
    /// Per layer, one MLP per expert.
    pub experts: Vec<Vec<ExpertMlp>>,
    attention: Vec<Attention>,
    embedding: Array2<f64>,
    unembedding: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn build_model(spec: MoeModelSpec, seed: u64) -> Result<SyntheticMoe> {
    build_model_with(spec, seed, SimOptions::default())
}

/// Draws every weight from one ChaCha stream in a fixed order. Residual
/// branches are scaled by `1/sqrt(num_layers)` so hidden norms stay bounded
/// with depth.
pub fn build_model_with(spec: MoeModelSpec, seed: u64, options: SimOptions) -> Result<SyntheticMoe> {
    spec.validate()?;
    if options.vocab_size == 0 {
        return Err(Error::InvalidConfig("vocab_size must be at least 1".into()));
    }
    if !(options.router_scale.is_finite() && options.router_scale > 0.0) {
        return Err(Error::InvalidConfig("router_scale must be positive".into()));
    }
    if !(options.expert_gain.is_finite() && options.expert_gain > 0.0) {
        return Err(Error::InvalidConfig("expert_gain must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.d_model;
    let f = spec.d_ff;
    let inv_d = 1.0 / (d as f64).sqrt();
    let branch = 1.0 / (spec.num_layers as f64).sqrt();

    let embedding = gaussian(&mut rng, options.vocab_size, d, 1.0);
    let unembedding = gaussian(&mut rng, d, options.vocab_size, inv_d);
    let mut routers = Vec::with_capacity(spec.num_layers);
    let mut experts = Vec::with_capacity(spec.num_layers);
    let mut attention = Vec::with_capacity(spec.num_layers);
    for _ in 0..spec.num_layers {
        attention.push(Attention {
            query: gaussian(&mut rng, d, d, inv_d),
            key: gaussian(&mut rng, d, d, inv_d),
            value: gaussian(&mut rng, d, d, inv_d),
            output: gaussian(&mut rng, d, d, inv_d * branch),
        });
        routers.push(gaussian(&mut rng, d, spec.num_experts, options.router_scale * inv_d));
        experts.push(
            (0..spec.num_experts)
                .map(|_| ExpertMlp {
                    up: gaussian(&mut rng, d, f, inv_d),
                    down: gaussian(&mut rng, f, d, options.expert_gain * branch / (f as f64).sqrt()),
                })
                .collect(),
        );
    }
    Ok(SyntheticMoe {
        spec,
        seed,
        options,
        routers,
        experts,
        attention,
        embedding,
        unembedding,
    })
}

impl SyntheticMoe {
    pub fn router_logits(
        &self,
        hidden: &Array2<f64>,
        layer: usize,
        phase: Phase,
    ) -> Result<RoutingLogits> {
        RoutingLogits::new(layer, phase, hidden.dot(&self.routers[layer]))
    }

    pub fn embed(&self, token: usize) -> Array1<f64> {
        self.embedding.row(token).to_owned()
    }

    /// Greedy next token; ties toward the smaller id.
    pub fn next_token(&self, hidden: ArrayView1<'_, f64>) -> usize {
        let scores = hidden.dot(&self.unembedding);
        let mut best = 0;
        for (i, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = i;
            }
        }
        best
    }

    fn decode_input(&self, hidden: ArrayView1<'_, f64>) -> Array1<f64> {
        match self.options.feedback {
            DecodeFeedback::Token => self.embed(self.next_token(hidden)),
            DecodeFeedback::Hidden => unit_rms(hidden),
        }
    }

}

/// MoE block of one layer: `hidden[t] + Σ weight · expert(hidden[t])` over
/// the token's remapped slots.
pub fn forward_layer(
    hidden: &Array2<f64>,
    model: &SyntheticMoe,
    layer: usize,
    mask: &ExpertMask,
) -> Result<Array2<f64>> {
    if layer >= model.spec.num_layers {
        return Err(Error::ShapeMismatch {
            what: "layer index",
            expected: model.spec.num_layers,
            found: layer,
        });
    }
    if hidden.ncols() != model.spec.d_model {
        return Err(Error::ShapeMismatch {
            what: "hidden width",
            expected: model.spec.d_model,
            found: hidden.ncols(),
        });
    }
    if mask.remap.len() != hidden.nrows() {
        return Err(Error::ShapeMismatch {
            what: "mask tokens",
            expected: hidden.nrows(),
            found: mask.remap.len(),
        });
    }
    let experts = &model.experts[layer];
    let mut out = hidden.clone();
    for (t, slots) in mask.remap.iter().enumerate() {
        let x = hidden.row(t);
        for slot in slots.iter().filter(|s| s.weight != 0.0) {
            let mlp = experts.get(slot.assigned).ok_or(Error::ShapeMismatch {
                what: "assigned expert",
                expected: experts.len(),
                found: slot.assigned,
            })?;
            out.row_mut(t).scaled_add(slot.weight, &mlp.apply(x));
        }
    }
    Ok(out)
}

/// Replaces every token's rank-`rank` expert with its best expert outside
/// the current top-k. Slot order is preserved, so the result is no longer
/// sorted by probability.
pub fn deny_expert_rank(selection: &ExpertSelection, rank: usize) -> Result<ExpertSelection> {
    let all: Vec<usize> = (0..selection.num_tokens()).collect();
    deny_expert_rank_for(selection, rank, &all)
}

/// [`deny_expert_rank`] restricted to the listed tokens.
pub fn deny_expert_rank_for(
    selection: &ExpertSelection,
    rank: usize,
    tokens: &[usize],
) -> Result<ExpertSelection> {
    if rank >= selection.top_k {
        return Err(Error::RankOutOfRange {
            rank,
            k: selection.top_k,
        });
    }
    if selection.top_k == selection.num_experts {
        return Err(Error::NoSubstitute);
    }
    let mut out = selection.clone();
    for &t in tokens {
        let token = &mut out.tokens[t];
        let substitute = (0..selection.num_experts)
            .filter(|&e| !token.selects(e))
            .min_by(|&a, &b| rank_order((a, token.probs[a]), (b, token.probs[b])))
            .expect("top_k < num_experts leaves a candidate");
        token.choices[rank] = ExpertChoice {
            expert: substitute,
            prob: token.probs[substitute],
        };
    }
    Ok(out)
}

/// Which phases an intervention touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseScope {
    Prefill,
    Decode,
    Both,
}

impl PhaseScope {
    pub fn includes(self, phase: Phase) -> bool {
        matches!(
            (self, phase),
            (PhaseScope::Both, _)
                | (PhaseScope::Prefill, Phase::Prefill)
                | (PhaseScope::Decode, Phase::Decode)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceBand {
    High,
    Low,
}

/// A modification applied to each layer's routing before the experts run.
#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    None,
    /// Deny every token's rank-`rank` expert, except on `preserved_layers`.
    DenyRank {
        rank: usize,
        scope: PhaseScope,
        preserved_layers: Vec<usize>,
    },
    /// Run an expert-retention policy (prefill handling is the policy's own).
    Policy(PolicyConfig),
    /// Deny the primary expert of an equal number of high- and low-confidence
    /// tokens per layer, applying it only to the chosen band.
    ConfidenceGroup {
        threshold: f64,
        band: ConfidenceBand,
        scope: PhaseScope,
    },
}

impl Intervention {
    fn decide(&self, selection: &ExpertSelection, phase: Phase) -> Result<ExpertMask> {
        match self {
            Intervention::None => Ok(ExpertMask::full(selection)),
            Intervention::DenyRank {
                rank,
                scope,
                preserved_layers,
            } => {
                if !scope.includes(phase) || preserved_layers.contains(&selection.layer_index) {
                    return Ok(ExpertMask::full(selection));
                }
                ExpertMask::forced(selection, &deny_expert_rank(selection, *rank)?)
            }
            Intervention::Policy(config) => apply_policy(selection, phase, config),
            Intervention::ConfidenceGroup {
                threshold,
                band,
                scope,
            } => {
                if !scope.includes(phase) {
                    return Ok(ExpertMask::full(selection));
                }
                let chosen = confidence_matched_tokens(selection, *threshold, *band);
                ExpertMask::forced(selection, &deny_expert_rank_for(selection, 0, &chosen)?)
            }
        }
    }
}

/// First `m` tokens of the requested band, where `m` is the size of the
/// smaller band, so both bands see the same number of reassignments.
pub fn confidence_matched_tokens(
    selection: &ExpertSelection,
    threshold: f64,
    band: ConfidenceBand,
) -> Vec<usize> {
    let conf = confidence(selection);
    let (high, low): (Vec<usize>, Vec<usize>) =
        (0..conf.len()).partition(|&t| conf[t] >= threshold);
    let m = high.len().min(low.len());
    let mut picked = match band {
        ConfidenceBand::High => high,
        ConfidenceBand::Low => low,
    };
    picked.truncate(m);
    picked
}

/// One sliding-window position of the layer-preservation ablation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWindow {
    pub start: usize,
    pub preserved: Vec<usize>,
}

impl LayerWindow {
    /// Rank-0 denial everywhere outside the window.
    pub fn intervention(&self) -> Intervention {
        Intervention::DenyRank {
            rank: 0,
            scope: PhaseScope::Both,
            preserved_layers: self.preserved.clone(),
        }
    }
}

pub fn layer_mask_schedule(num_layers: usize, window: usize) -> Result<Vec<LayerWindow>> {
    if window == 0 || window > num_layers {
        return Err(Error::InvalidConfig(format!(
            "window must lie in 1..={num_layers}, got {window}"
        )));
    }
    Ok((0..=num_layers - window)
        .map(|start| LayerWindow {
            start,
            preserved: (start..start + window).collect(),
        })
        .collect())
}

/// Prompts for a batch of sequences, all of equal length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBatch {
    pub prompts: Vec<Vec<usize>>,
}

impl PromptBatch {
    pub fn random(num_sequences: usize, prompt_len: usize, vocab_size: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let prompts = (0..num_sequences)
            .map(|_| (0..prompt_len).map(|_| rng.random_range(0..vocab_size)).collect())
            .collect();
        Self { prompts }
    }

    pub fn num_sequences(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts.first().map_or(0, Vec::len)
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        let len = self.prompt_len();
        if self.prompts.is_empty() || len == 0 {
            return Err(Error::Empty("prompt batch"));
        }
        for p in &self.prompts {
            if p.len() != len {
                return Err(Error::ShapeMismatch {
                    what: "prompt length",
                    expected: len,
                    found: p.len(),
                });
            }
            if let Some(&bad) = p.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::ShapeMismatch {
                    what: "token id",
                    expected: vocab_size,
                    found: bad,
                });
            }
        }
        Ok(())
    }
}

/// Prefill covers the prompt; decode runs `decode_steps` greedy steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSplit {
    pub decode_steps: usize,
}

/// Routing decision taken for one layer of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecision {
    /// Forward pass index: 0 is prefill, step `s` of decode is `s + 1`.
    pub pass: usize,
    pub phase: Phase,
    pub selection: ExpertSelection,
    pub mask: ExpertMask,
    pub confidence: Vec<f64>,
}

/// Hidden states produced by one generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Per sequence, final-layer hidden state of every prompt position.
    pub prefill_hidden: Vec<Array2<f64>>,
    /// Per sequence, final-layer hidden state of every decode step.
    pub decode_hidden: Vec<Array2<f64>>,
    pub decisions: Vec<LayerDecision>,
}

struct KvCache {
    /// `[sequence][layer]` stacked key and value rows.
    keys: Vec<Vec<Vec<Array1<f64>>>>,
    values: Vec<Vec<Vec<Array1<f64>>>>,
}

impl KvCache {
    fn new(sequences: usize, layers: usize) -> Self {
        Self {
            keys: vec![vec![Vec::new(); layers]; sequences],
            values: vec![vec![Vec::new(); layers]; sequences],
        }
    }
}

fn attend(
    attn: &Attention,
    x: &Array2<f64>,
    keys: &mut Vec<Array1<f64>>,
    values: &mut Vec<Array1<f64>>,
) -> Array2<f64> {
    let scale = 1.0 / (x.ncols() as f64).sqrt();
    let q = x.dot(&attn.query);
    let start = keys.len();
    keys.extend(x.dot(&attn.key).rows().into_iter().map(|r| r.to_owned()));
    values.extend(x.dot(&attn.value).rows().into_iter().map(|r| r.to_owned()));

    let mut ctx = Array2::<f64>::zeros(x.raw_dim());
    for (i, qi) in q.rows().into_iter().enumerate() {
        let visible = start + i + 1;
        let scores: Vec<f64> = keys[..visible].iter().map(|k| qi.dot(k) * scale).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut row = ctx.row_mut(i);
        for (w, v) in weights.iter().zip(&values[..visible]) {
            row.scaled_add(w / total, v);
        }
    }
    x + &ctx.dot(&attn.output)
}

fn run_pass(
    model: &SyntheticMoe,
    cache: &mut KvCache,
    inputs: Vec<Array2<f64>>,
    phase: Phase,
    pass: usize,
    intervention: &Intervention,
    decisions: Option<&mut Vec<LayerDecision>>,
) -> Result<Vec<Array2<f64>>> {
    let rows: Vec<usize> = inputs.iter().map(Array2::nrows).collect();
    let mut per_seq = inputs;
    let mut log = decisions;
    for layer in 0..model.spec.num_layers {
        let attended: Vec<Array2<f64>> = per_seq
            .iter()
            .enumerate()
            .map(|(s, x)| {
                attend(
                    &model.attention[layer],
                    x,
                    &mut cache.keys[s][layer],
                    &mut cache.values[s][layer],
                )
            })
            .collect();
        let views: Vec<_> = attended.iter().map(|a| a.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;

        let logits = model.router_logits(&stacked, layer, phase)?;
        let selection = route_batch(&logits, model.spec.top_k)?;
        let mask = intervention.decide(&selection, phase)?;
        let out = forward_layer(&stacked, model, layer, &mask)?;
        if let Some(log) = log.as_deref_mut() {
            log.push(LayerDecision {
                pass,
                phase,
                confidence: confidence(&selection),
                selection,
                mask,
            });
        }

        let mut offset = 0;
        per_seq = rows
            .iter()
            .map(|&n| {
                let part = out.slice(s![offset..offset + n, ..]).to_owned();
                offset += n;
                part
            })
            .collect();
    }
    Ok(per_seq)
}

fn unit_rms(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let rms = (x.dot(&x) / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.mapv(|v| v / rms)
    } else {
        x.to_owned()
    }
}

/// Prefill the batch, then decode for `split.decode_steps` steps.
pub fn generate(
    model: &SyntheticMoe,
    batch: &PromptBatch,
    split: PhaseSplit,
    intervention: &Intervention,
    record: bool,
) -> Result<Generation> {
    batch.validate(model.options.vocab_size)?;
    let b = batch.num_sequences();
    let d = model.spec.d_model;
    let mut cache = KvCache::new(b, model.spec.num_layers);
    let mut decisions = Vec::new();

    let inputs: Vec<Array2<f64>> = batch
        .prompts
        .iter()
        .map(|p| {
            let mut x = Array2::zeros((p.len(), d));
            for (i, &t) in p.iter().enumerate() {
                x.row_mut(i).assign(&model.embedding.row(t));
            }
            x
        })
        .collect();
    let prefill_hidden = run_pass(
        model,
        &mut cache,
        inputs,
        Phase::Prefill,
        0,
        intervention,
        record.then_some(&mut decisions),
    )?;

    let mut next: Vec<Array1<f64>> = prefill_hidden
        .iter()
        .map(|h| h.row(h.nrows() - 1).to_owned())
        .collect();
    let mut decode_hidden = vec![Array2::zeros((split.decode_steps, d)); b];
    for step in 0..split.decode_steps {
        let inputs: Vec<Array2<f64>> = next
            .iter()
            .map(|h| model.decode_input(h.view()).insert_axis(Axis(0)))
            .collect();
        let out = run_pass(
            model,
            &mut cache,
            inputs,
            Phase::Decode,
            step + 1,
            intervention,
            record.then_some(&mut decisions),
        )?;
        for (s, h) in out.iter().enumerate() {
            decode_hidden[s].row_mut(step).assign(&h.row(0));
            next[s] = h.row(0).to_owned();
        }
    }
    Ok(Generation {
        prefill_hidden,
        decode_hidden,
        decisions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenDivergence {
    pub sequence: usize,
    pub position: usize,
    pub phase: Phase,
    pub cosine: f64,
    pub l2: f64,
}

/// Baseline-vs-intervened hidden-state comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub tokens: Vec<TokenDivergence>,
    pub mean_cosine: f64,
    pub mean_l2: f64,
    pub prefill_mean_l2: f64,
    pub decode_mean_l2: f64,
    /// Mean over sequences at the last decode step (last prompt position
    /// when there is no decode).
    pub final_step_l2: f64,
    pub final_step_cosine: f64,
}

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    if a == b {
        return 1.0;
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn l2_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn compare(baseline: &Generation, intervened: &Generation) -> DivergenceReport {
    let mut tokens = Vec::new();
    let mut push = |phase, sequence, a: &Array2<f64>, b: &Array2<f64>| {
        for position in 0..a.nrows() {
            tokens.push(TokenDivergence {
                sequence,
                position,
                phase,
                cosine: cosine_similarity(a.row(position), b.row(position)),
                l2: l2_distance(a.row(position), b.row(position)),
            });
        }
    };
    let sequences = baseline.prefill_hidden.len();
    for s in 0..sequences {
        push(Phase::Prefill, s, &baseline.prefill_hidden[s], &intervened.prefill_hidden[s]);
    }
    for s in 0..sequences {
        push(Phase::Decode, s, &baseline.decode_hidden[s], &intervened.decode_hidden[s]);
    }

    let decode_steps = baseline.decode_hidden.first().map_or(0, Array2::nrows);
    let (final_phase, final_pos) = if decode_steps > 0 {
        (Phase::Decode, decode_steps - 1)
    } else {
        (Phase::Prefill, baseline.prefill_hidden[0].nrows() - 1)
    };
    let finals = || {
        tokens
            .iter()
            .filter(move |t| t.phase == final_phase && t.position == final_pos)
    };
    let final_step_l2 = mean(finals().map(|t| t.l2));
    let final_step_cosine = mean(finals().map(|t| t.cosine));

    DivergenceReport {
        mean_cosine: mean(tokens.iter().map(|t| t.cosine)),
        mean_l2: mean(tokens.iter().map(|t| t.l2)),
        prefill_mean_l2: mean(tokens.iter().filter(|t| t.phase == Phase::Prefill).map(|t| t.l2)),
        decode_mean_l2: mean(tokens.iter().filter(|t| t.phase == Phase::Decode).map(|t| t.l2)),
        final_step_l2,
        final_step_cosine,
        tokens,
    }
}

/// Result of one baseline-vs-intervention experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: DivergenceReport,
    pub intervened: Generation,
}

/// Runs the batch twice from the same model and prompts, once untouched and
/// once under `intervention`, and compares final-layer hidden states.
pub fn run_experiment(
    model: &SyntheticMoe,
    batch: &PromptBatch,
    intervention: &Intervention,
    split: PhaseSplit,
) -> Result<ExperimentOutcome> {
    let baseline = generate(model, batch, split, &Intervention::None, false)?;
    let intervened = generate(model, batch, split, intervention, true)?;
    Ok(ExperimentOutcome {
        report: compare(&baseline, &intervened),
        intervened,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::SlotAssignment;
    use approx::assert_relative_eq;

    fn toy() -> SyntheticMoe {
        build_model(MoeModelSpec::toy(4, 8, 2), 7).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(MoeModelSpec::toy(3, 4, 1), 11).unwrap();
        let b = build_model(MoeModelSpec::toy(3, 4, 1), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_change_router_logits() {
        let spec = MoeModelSpec::toy(2, 4, 1);
        let a = build_model(spec, 1).unwrap();
        let b = build_model(spec, 2).unwrap();
        let x = Array2::from_elem((1, spec.d_model), 0.5);
        let la = a.router_logits(&x, 0, Phase::Decode).unwrap();
        let lb = b.router_logits(&x, 0, Phase::Decode).unwrap();
        assert_ne!(la.values(), lb.values());
    }

    #[test]
    fn route_width_matches_expert_count() {
        let model = toy();
        let x = Array2::from_elem((3, model.spec.d_model), 0.1);
        let logits = model.router_logits(&x, 1, Phase::Prefill).unwrap();
        assert_eq!(logits.num_experts(), 8);
        let sel = route_batch(&logits, 2).unwrap();
        assert_eq!(sel.tokens[0].probs.len(), 8);
    }

    fn hidden(model: &SyntheticMoe, tokens: usize) -> Array2<f64> {
        Array2::from_shape_fn((tokens, model.spec.d_model), |(t, j)| {
            ((t * 31 + j * 7) % 13) as f64 / 6.0 - 1.0
        })
    }

    #[test]
    fn full_mask_equals_unmodified_forward() {
        let model = toy();
        let x = hidden(&model, 5);
        let sel = route_batch(&model.router_logits(&x, 2, Phase::Decode).unwrap(), 2).unwrap();
        let out = forward_layer(&x, &model, 2, &ExpertMask::full(&sel)).unwrap();

        let mut manual = x.clone();
        for (t, token) in sel.tokens.iter().enumerate() {
            for (e, w) in token.gate_weights() {
                manual.row_mut(t).scaled_add(w, &model.experts[2][e].apply(x.row(t)));
            }
        }
        assert_eq!(out, manual);
    }

    #[test]
    fn single_retained_expert_serves_every_token() {
        let spec = MoeModelSpec::toy(2, 4, 1);
        let model = build_model(spec, 3).unwrap();
        let x = hidden(&model, 4);
        let sel = route_batch(&model.router_logits(&x, 0, Phase::Decode).unwrap(), 1).unwrap();
        let remap = crate::policy::remap_tokens(&sel, &[2]).unwrap();
        let mask = ExpertMask {
            layer_index: 0,
            retained: vec![2],
            remap,
            clipped: false,
        };
        let out = forward_layer(&x, &model, 0, &mask).unwrap();
        for t in 0..4 {
            let expected = &x.row(t) + &model.experts[0][2].apply(x.row(t));
            assert_eq!(out.row(t), expected);
        }
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        // Two experts with 2x2 weights, k = 1, two tokens.
        let spec = MoeModelSpec {
            num_layers: 1,
            num_experts: 2,
            top_k: 1,
            d_model: 2,
            d_ff: 2,
            bytes_per_param: 2,
        };
        let mut model = build_model(spec, 0).unwrap();
        model.experts[0][0] = ExpertMlp {
            up: ndarray::arr2(&[[1.0, 0.0], [0.0, 2.0]]),
            down: ndarray::arr2(&[[1.0, 1.0], [0.0, 1.0]]),
        };
        model.experts[0][1] = ExpertMlp {
            up: ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]),
            down: ndarray::arr2(&[[2.0, 0.0], [0.0, -1.0]]),
        };
        let x = ndarray::arr2(&[[1.0, -1.0], [0.5, 2.0]]);
        let mask = ExpertMask {
            layer_index: 0,
            retained: vec![0, 1],
            remap: vec![
                vec![SlotAssignment { original: 0, assigned: 0, weight: 1.0 }],
                vec![SlotAssignment { original: 1, assigned: 1, weight: 1.0 }],
            ],
            clipped: false,
        };
        let out = forward_layer(&x, &model, 0, &mask).unwrap();

        // token 0 through expert 0: u = [1, -2]; h = [silu(1), silu(-2)]
        // out = h · [[1,1],[0,1]] = [h0, h0 + h1]
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        let sm2 = -2.0 / (1.0 + 2.0f64.exp());
        let t0 = [1.0 + s1, -1.0 + s1 + sm2];
        // token 1 through expert 1: u = [2, 0.5]; h = [silu(2), silu(0.5)]
        // out = h · [[2,0],[0,-1]] = [2 h0, -h1]
        let s2 = 2.0 / (1.0 + (-2.0f64).exp());
        let s05 = 0.5 / (1.0 + (-0.5f64).exp());
        let t1 = [0.5 + 2.0 * s2, 2.0 - s05];
        for j in 0..2 {
            assert_relative_eq!(out[[0, j]], t0[j], max_relative = 1e-14);
            assert_relative_eq!(out[[1, j]], t1[j], max_relative = 1e-14);
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let model = toy();
        let x = hidden(&model, 3);
        let sel = route_batch(&model.router_logits(&x, 0, Phase::Decode).unwrap(), 2).unwrap();
        let mask = ExpertMask::full(&sel);
        let short = hidden(&model, 2);
        assert!(forward_layer(&short, &model, 0, &mask).is_err());
        assert!(forward_layer(&x, &model, 9, &mask).is_err());
    }

    fn selection_from_probs(probs: &[Vec<f64>], k: usize) -> ExpertSelection {
        let rows: Vec<Vec<f64>> = probs.iter().map(|p| p.iter().map(|v| v.ln()).collect()).collect();
        route_batch(&RoutingLogits::from_rows(0, Phase::Decode, &rows).unwrap(), k).unwrap()
    }

    #[test]
    fn deny_top1_moves_token() {
        let sel = selection_from_probs(&[vec![0.6, 0.4]], 1);
        let denied = deny_expert_rank(&sel, 0).unwrap();
        assert_eq!(denied.tokens[0].choices[0].expert, 1);
    }

    #[test]
    fn deny_rank0_renormalizes() {
        let sel = selection_from_probs(&[vec![0.5, 0.3, 0.2]], 2);
        let denied = deny_expert_rank(&sel, 0).unwrap();
        let mut w = denied.tokens[0].gate_weights();
        w.sort_by_key(|&(e, _)| e);
        assert_eq!(w[0].0, 1);
        assert_eq!(w[1].0, 2);
        assert_relative_eq!(w[0].1, 0.6, max_relative = 1e-12);
        assert_relative_eq!(w[1].1, 0.4, max_relative = 1e-12);
    }

    #[test]
    fn deny_last_rank_with_near_tied_tail_barely_moves_weights() {
        let sel = selection_from_probs(&[vec![0.7, 0.1, 0.1 - 1e-6, 0.1 + 1e-6 - 0.0]], 2);
        let before = sel.tokens[0].gate_weights();
        let denied = deny_expert_rank(&sel, 1).unwrap();
        let after = denied.tokens[0].gate_weights();
        assert_eq!(before[0].0, after[0].0);
        assert!((before[0].1 - after[0].1).abs() < 1e-5);
    }

    #[test]
    fn deny_rejects_bad_rank_and_full_k() {
        let sel = selection_from_probs(&[vec![0.5, 0.3, 0.2]], 2);
        assert!(matches!(deny_expert_rank(&sel, 2), Err(Error::RankOutOfRange { .. })));
        let full = selection_from_probs(&[vec![0.5, 0.5]], 2);
        assert!(matches!(deny_expert_rank(&full, 0), Err(Error::NoSubstitute)));
    }

    #[test]
    fn layer_windows() {
        let w = layer_mask_schedule(4, 1).unwrap();
        assert_eq!(w.len(), 4);
        for (i, c) in w.iter().enumerate() {
            assert_eq!(c.preserved, vec![i]);
        }
        let w = layer_mask_schedule(4, 4).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].preserved, vec![0, 1, 2, 3]);
        let w = layer_mask_schedule(32, 2).unwrap();
        assert_eq!(w.len(), 32 - 2 + 1);
        assert!(w.windows(2).all(|p| p[1].start == p[0].start + 1));
        assert!(layer_mask_schedule(4, 0).is_err());
        assert!(layer_mask_schedule(4, 5).is_err());
    }

    #[test]
    fn no_intervention_means_zero_divergence() {
        let model = toy();
        let batch = PromptBatch::random(3, 4, model.options.vocab_size, 1);
        let out = run_experiment(&model, &batch, &Intervention::None, PhaseSplit { decode_steps: 3 }).unwrap();
        assert_eq!(out.report.mean_l2, 0.0);
        assert_eq!(out.report.final_step_l2, 0.0);
        assert!(out.report.tokens.iter().all(|t| t.cosine == 1.0));
    }

    #[test]
    fn experiment_is_deterministic() {
        let model = toy();
        let batch = PromptBatch::random(3, 4, model.options.vocab_size, 5);
        let iv = Intervention::DenyRank {
            rank: 0,
            scope: PhaseScope::Both,
            preserved_layers: vec![],
        };
        let a = run_experiment(&model, &batch, &iv, PhaseSplit { decode_steps: 2 }).unwrap();
        let b = run_experiment(&model, &batch, &iv, PhaseSplit { decode_steps: 2 }).unwrap();
        assert_eq!(a, b);
        assert!(a.report.mean_l2 > 0.0);
    }

    #[test]
    fn decisions_cover_every_pass_and_layer() {
        let model = toy();
        let batch = PromptBatch::random(2, 3, model.options.vocab_size, 5);
        let g = generate(&model, &batch, PhaseSplit { decode_steps: 2 }, &Intervention::None, true).unwrap();
        assert_eq!(g.decisions.len(), 3 * model.spec.num_layers);
        assert_eq!(g.decisions[0].selection.num_tokens(), 6);
        assert_eq!(g.decisions.last().unwrap().selection.num_tokens(), 2);
    }

    #[test]
    fn hidden_feedback_is_deterministic_and_differs_from_token_feedback() {
        let spec = MoeModelSpec::toy(3, 8, 2);
        let options = SimOptions {
            feedback: DecodeFeedback::Hidden,
            ..SimOptions::default()
        };
        let hidden = build_model_with(spec, 9, options).unwrap();
        let token = build_model(spec, 9).unwrap();
        let batch = PromptBatch::random(2, 3, 64, 9);
        let split = PhaseSplit { decode_steps: 3 };
        let a = generate(&hidden, &batch, split, &Intervention::None, false).unwrap();
        let b = generate(&hidden, &batch, split, &Intervention::None, false).unwrap();
        let c = generate(&token, &batch, split, &Intervention::None, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prefill_hidden, c.prefill_hidden);
        assert_ne!(a.decode_hidden, c.decode_hidden);
    }

    #[test]
    fn hidden_norms_stay_bounded() {
        let model = build_model(MoeModelSpec::toy(16, 8, 2), 4).unwrap();
        let batch = PromptBatch::random(2, 6, model.options.vocab_size, 4);
        let g = generate(&model, &batch, PhaseSplit { decode_steps: 4 }, &Intervention::None, false).unwrap();
        let d = model.spec.d_model as f64;
        for h in g.prefill_hidden.iter().chain(&g.decode_hidden) {
            for row in h.rows() {
                let rms = (row.dot(&row) / d).sqrt();
                assert!(rms.is_finite() && rms < 10.0, "rms {rms}");
            }
        }
    }
}
