//! Experiment grids over the synthetic model, averaged across seeds.
//!
//! Every seed builds its own model and prompt batch; the untouched baseline
//! is generated once per seed and reused for every condition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MoeModelSpec;
use crate::policy::PolicyConfig;
use crate::sim::{
    build_model_with, compare, generate, layer_mask_schedule, ConfidenceBand, DivergenceReport,
    Generation, Intervention, PhaseScope, PhaseSplit, PromptBatch, SimOptions, SyntheticMoe,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    RankDenial,
    LayerWindow,
    PhaseSplit,
    ConfidenceThresholdSweep,
    RetainedCount,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::RankDenial,
        AblationKind::LayerWindow,
        AblationKind::PhaseSplit,
        AblationKind::ConfidenceThresholdSweep,
        AblationKind::RetainedCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::RankDenial => "rank-denial",
            AblationKind::LayerWindow => "layer-window",
            AblationKind::PhaseSplit => "phase-split",
            AblationKind::ConfidenceThresholdSweep => "confidence-threshold-sweep",
            AblationKind::RetainedCount => "retained-count",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidConfig(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSetup {
    pub spec: MoeModelSpec,
    pub options: SimOptions,
    pub batch_size: usize,
    pub prompt_len: usize,
    pub decode_steps: usize,
    pub base_seed: u64,
    pub seeds: usize,
}

impl Default for AblationSetup {
    /// Eight layers, eight experts, top-2; prompt and decode lengths match so
    /// prefill-only and decode-only interventions touch equally many slots.
    fn default() -> Self {
        Self {
            spec: MoeModelSpec::toy(8, 8, 2),
            options: SimOptions::default(),
            batch_size: 8,
            prompt_len: 8,
            decode_steps: 8,
            base_seed: 0,
            seeds: 20,
        }
    }
}

/// One measured series point with its per-seed samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub label: String,
    pub x: f64,
    pub series: String,
    pub per_seed: Vec<f64>,
}

impl Condition {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }
}

struct Trial {
    model: SyntheticMoe,
    batch: PromptBatch,
    baseline: Generation,
}

/// Models, prompts and baselines for every seed of a setup.
pub struct Bench {
    setup: AblationSetup,
    trials: Vec<Trial>,
}

impl Bench {
    pub fn prepare(setup: AblationSetup) -> Result<Self> {
        if setup.seeds == 0 {
            return Err(Error::InvalidConfig("seeds must be at least 1".into()));
        }
        let split = PhaseSplit {
            decode_steps: setup.decode_steps,
        };
        let trials = (0..setup.seeds as u64)
            .map(|i| {
                let seed = setup.base_seed.wrapping_add(i);
                let model = build_model_with(setup.spec, seed, setup.options)?;
                let batch = PromptBatch::random(
                    setup.batch_size,
                    setup.prompt_len,
                    setup.options.vocab_size,
                    seed,
                );
                let baseline = generate(&model, &batch, split, &Intervention::None, false)?;
                Ok(Trial {
                    model,
                    batch,
                    baseline,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { setup, trials })
    }

    pub fn setup(&self) -> &AblationSetup {
        &self.setup
    }

    /// Per-seed divergence reports under `intervention`.
    pub fn reports(&self, intervention: &Intervention) -> Result<Vec<DivergenceReport>> {
        let split = PhaseSplit {
            decode_steps: self.setup.decode_steps,
        };
        self.trials
            .iter()
            .map(|t| {
                let run = generate(&t.model, &t.batch, split, intervention, false)?;
                Ok(compare(&t.baseline, &run))
            })
            .collect()
    }
}

type Metric = (&'static str, fn(&DivergenceReport) -> f64);

fn series(
    reports: &[DivergenceReport],
    label: &str,
    x: f64,
    metrics: &[Metric],
) -> Vec<Condition> {
    metrics
        .iter()
        .map(|(name, f)| Condition {
            label: label.to_string(),
            x,
            series: name.to_string(),
            per_seed: reports.iter().map(f).collect(),
        })
        .collect()
}

const MEAN_L2: Metric = ("mean_l2", |r| r.mean_l2);
const MEAN_COSINE: Metric = ("mean_cosine", |r| r.mean_cosine);

/// Deny each rank in turn on every layer and phase.
pub fn rank_denial(bench: &Bench) -> Result<Vec<Condition>> {
    let mut out = Vec::new();
    for rank in 0..bench.setup.spec.top_k {
        let iv = Intervention::DenyRank {
            rank,
            scope: PhaseScope::Both,
            preserved_layers: vec![],
        };
        out.extend(series(
            &bench.reports(&iv)?,
            &format!("deny rank {rank}"),
            rank as f64,
            &[MEAN_L2, MEAN_COSINE],
        ));
    }
    Ok(out)
}

/// Rank-0 denial everywhere except a sliding window of preserved layers.
pub fn layer_window(bench: &Bench, window: usize) -> Result<Vec<Condition>> {
    let mut out = Vec::new();
    for w in layer_mask_schedule(bench.setup.spec.num_layers, window)? {
        out.extend(series(
            &bench.reports(&w.intervention())?,
            &format!("preserve layers {:?}", w.preserved),
            w.start as f64,
            &[MEAN_L2, MEAN_COSINE],
        ));
    }
    Ok(out)
}

/// Rank-0 denial restricted to prefill (x = 0) or to decode (x = 1).
pub fn phase_split(bench: &Bench) -> Result<Vec<Condition>> {
    let s = &bench.setup;
    let mut out = Vec::new();
    for (x, scope, slots) in [
        (0.0, PhaseScope::Prefill, s.batch_size * s.prompt_len),
        (1.0, PhaseScope::Decode, s.batch_size * s.decode_steps),
    ] {
        let iv = Intervention::DenyRank {
            rank: 0,
            scope,
            preserved_layers: vec![],
        };
        let name = if scope == PhaseScope::Prefill { "prefill" } else { "decode" };
        out.extend(series(
            &bench.reports(&iv)?,
            &format!("{name} only, {slots} token-slots per layer"),
            x,
            &[
                ("final_step_l2", |r| r.final_step_l2),
                ("decode_mean_l2", |r| r.decode_mean_l2),
            ],
        ));
    }
    Ok(out)
}

/// Count-matched primary-expert reassignment of high- versus
/// low-confidence tokens at each threshold.
pub fn confidence_sweep(bench: &Bench, thresholds: &[f64]) -> Result<Vec<Condition>> {
    let mut out = Vec::new();
    for &tau in thresholds {
        for (band, name) in [(ConfidenceBand::High, "high_l2"), (ConfidenceBand::Low, "low_l2")] {
            let iv = Intervention::ConfidenceGroup {
                threshold: tau,
                band,
                scope: PhaseScope::Both,
            };
            let reports = bench.reports(&iv)?;
            out.push(Condition {
                label: format!("threshold {tau}"),
                x: tau,
                series: name.to_string(),
                per_seed: reports.iter().map(|r| r.mean_l2).collect(),
            });
        }
    }
    Ok(out)
}

/// Latency policy at every drop count; x is the retained expert count.
pub fn retained_count(bench: &Bench) -> Result<Vec<Condition>> {
    let spec = bench.setup.spec;
    let mut out = Vec::new();
    for drop in 0..=spec.num_experts - spec.top_k {
        let iv = Intervention::Policy(PolicyConfig::latency(&spec, drop));
        out.extend(series(
            &bench.reports(&iv)?,
            &format!("drop {drop}"),
            (spec.num_experts - drop) as f64,
            &[("decode_mean_l2", |r| r.decode_mean_l2)],
        ));
    }
    Ok(out)
}

/// Parameters that only some ablations use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationParams {
    pub window: usize,
    pub thresholds: Vec<f64>,
}

impl Default for AblationParams {
    fn default() -> Self {
        Self {
            window: 2,
            thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

pub fn run_ablation(kind: AblationKind, bench: &Bench, params: &AblationParams) -> Result<Vec<Condition>> {
    match kind {
        AblationKind::RankDenial => rank_denial(bench),
        AblationKind::LayerWindow => layer_window(bench, params.window),
        AblationKind::PhaseSplit => phase_split(bench),
        AblationKind::ConfidenceThresholdSweep => confidence_sweep(bench, &params.thresholds),
        AblationKind::RetainedCount => retained_count(bench),
    }
}
