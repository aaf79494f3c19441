//! TOML run configuration shared by every subcommand.
//!
//! Every section and key is optional; missing values take the defaults
//! below. Unknown keys and out-of-range values are rejected with the line
//! they occur on.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{AblationKind, AblationParams, AblationSetup};
use crate::cost::{AttentionCost, CostModelParams};
use crate::error::{Error, Result};
use crate::model::{MoeModelSpec, Phase};
use crate::policy::{PolicyConfig, PolicyMode, VoteWeighting};
use crate::router::ConfidenceMetric;
use crate::sim::{DecodeFeedback, SimOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub bytes_per_param: usize,
    pub router_scale: f64,
    pub expert_gain: f64,
    pub vocab_size: usize,
    pub feedback: DecodeFeedback,
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = MoeModelSpec::toy(8, 8, 2);
        let sim = SimOptions::default();
        Self {
            num_layers: spec.num_layers,
            num_experts: spec.num_experts,
            top_k: spec.top_k,
            d_model: spec.d_model,
            d_ff: spec.d_ff,
            bytes_per_param: spec.bytes_per_param,
            router_scale: sim.router_scale,
            expert_gain: sim.expert_gain,
            vocab_size: sim.vocab_size,
            feedback: sim.feedback,
        }
    }
}

impl ModelSection {
    pub fn spec(&self) -> MoeModelSpec {
        MoeModelSpec {
            num_layers: self.num_layers,
            num_experts: self.num_experts,
            top_k: self.top_k,
            d_model: self.d_model,
            d_ff: self.d_ff,
            bytes_per_param: self.bytes_per_param,
        }
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            router_scale: self.router_scale,
            expert_gain: self.expert_gain,
            vocab_size: self.vocab_size,
            feedback: self.feedback,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyChoice {
    None,
    Lat,
    Acc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub mode: PolicyChoice,
    pub drop_count: usize,
    pub confidence_threshold: f64,
    pub sample_threshold: usize,
    /// Defaults to the model's `top_k`.
    pub min_experts: Option<usize>,
    /// Defaults to half the expert count.
    pub freq_keep_budget: Option<usize>,
    pub vote_weighting: VoteWeighting,
    pub confidence_metric: ConfidenceMetric,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            mode: PolicyChoice::Lat,
            drop_count: 4,
            confidence_threshold: 0.5,
            sample_threshold: 8,
            min_experts: None,
            freq_keep_budget: None,
            vote_weighting: VoteWeighting::Equal,
            confidence_metric: ConfidenceMetric::TopProbability,
        }
    }
}

impl PolicySection {
    pub fn policy(&self, spec: &MoeModelSpec) -> Option<PolicyConfig> {
        let mode = match self.mode {
            PolicyChoice::None => return None,
            PolicyChoice::Lat => PolicyMode::Lat,
            PolicyChoice::Acc => PolicyMode::Acc,
        };
        Some(PolicyConfig {
            mode,
            drop_count: self.drop_count,
            confidence_threshold: self.confidence_threshold,
            sample_threshold: self.sample_threshold,
            min_experts: self.min_experts.unwrap_or(spec.top_k),
            freq_keep_budget: self.freq_keep_budget.unwrap_or(spec.num_experts / 2),
            vote_weighting: self.vote_weighting,
            confidence_metric: self.confidence_metric,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Sequences decoded together.
    pub batch_size: usize,
    pub num_batches: usize,
    pub prompt_len: usize,
    pub decode_steps: usize,
    pub seed: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            num_batches: 1,
            prompt_len: 8,
            decode_steps: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostModelShape {
    /// Mixtral-8x7B layer shapes.
    #[serde(rename = "mixtral-8x7b")]
    Mixtral8x7b,
    Dbrx,
    /// The `[model]` section.
    Config,
}

/// Nominal hardware figures, used only where a calibration table cannot
/// identify a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NominalProfile {
    pub hbm_bandwidth: f64,
    pub peak_compute: f64,
    pub attn_fixed_ms: f64,
    pub attn_per_token_ms: f64,
    pub attn_context_exponent: f64,
    pub route_ms: f64,
}

impl Default for NominalProfile {
    fn default() -> Self {
        let p = CostModelParams::nominal_a100();
        Self {
            hbm_bandwidth: p.hbm_bandwidth,
            peak_compute: p.peak_compute,
            attn_fixed_ms: p.attn.fixed_ms,
            attn_per_token_ms: p.attn.per_token_ms,
            attn_context_exponent: p.attn.context_exponent,
            route_ms: p.route_ms,
        }
    }
}

impl NominalProfile {
    pub fn params(&self, reference_context: f64) -> CostModelParams {
        CostModelParams {
            hbm_bandwidth: self.hbm_bandwidth,
            peak_compute: self.peak_compute,
            attn: AttentionCost {
                fixed_ms: self.attn_fixed_ms,
                per_token_ms: self.attn_per_token_ms,
                reference_context,
                context_exponent: self.attn_context_exponent,
            },
            route_ms: self.route_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub shape: CostModelShape,
    /// Measurement table; relative paths resolve against the config file.
    pub calibration: Option<PathBuf>,
    /// Experts active while the table's MLP column was measured.
    pub active_experts: usize,
    /// Context length of the table's attention column.
    pub context: f64,
    pub batch_sizes: Vec<usize>,
    /// Defaults to every count from 1 to the expert total.
    pub expert_counts: Option<Vec<usize>>,
    pub context_lengths: Vec<f64>,
    /// Accepted speedup range for halving the experts.
    pub halving_band: [f64; 2],
    pub nominal: NominalProfile,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            shape: CostModelShape::Mixtral8x7b,
            calibration: None,
            active_experts: 4,
            context: 500.0,
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            expert_counts: None,
            context_lengths: vec![500.0],
            halving_band: [1.3, 1.5],
            nominal: NominalProfile::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: OutputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub kind: AblationKind,
    pub seeds: usize,
    /// Sequences per batch in ablation runs.
    pub batch_size: usize,
    pub window: usize,
    pub thresholds: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        let p = AblationParams::default();
        Self {
            kind: AblationKind::RankDenial,
            seeds: 20,
            batch_size: 8,
            window: p.window,
            thresholds: p.thresholds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseFilter {
    All,
    Prefill,
    Decode,
}

impl PhaseFilter {
    pub fn phase(self) -> Option<Phase> {
        match self {
            PhaseFilter::All => None,
            PhaseFilter::Prefill => Some(Phase::Prefill),
            PhaseFilter::Decode => Some(Phase::Decode),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Expert count of the trace; inferred from the records when absent.
    pub num_experts: Option<usize>,
    pub phase: PhaseFilter,
    /// Importance threshold for the reduction summary.
    pub confidence_threshold: Option<f64>,
    /// Skew ratio a trace must reach to be flagged as batch-skewed.
    pub skew_threshold: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            num_experts: None,
            phase: PhaseFilter::All,
            confidence_threshold: None,
            skew_threshold: 5.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub policy: PolicySection,
    pub schedule: ScheduleSection,
    pub cost: CostSection,
    pub output: OutputSection,
    pub ablation: AblationSection,
    pub analysis: AnalysisSection,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]`, else the section header, else `None`.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

struct Problem {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn problem(section: &'static str, key: &'static str, message: impl Into<String>) -> Problem {
    Problem {
        section,
        key,
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses and validates; errors carry the offending line when known.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of_offset(text, s.start));
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        if let Some(p) = config.problems().into_iter().next() {
            return Err(match locate(text, p.section, p.key) {
                Some(line) => Error::Parse {
                    line,
                    message: format!("[{}] {}: {}", p.section, p.key, p.message),
                },
                None => Error::InvalidConfig(format!("[{}] {}: {}", p.section, p.key, p.message)),
            });
        }
        Ok(config)
    }

    /// Reads a config file and resolves relative paths against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(cal) = &config.cost.calibration {
            if cal.is_relative() {
                config.cost.calibration = Some(base.join(cal));
            }
        }
        Ok(config)
    }

    fn problems(&self) -> Vec<Problem> {
        let mut out = Vec::new();
        let m = &self.model;
        if m.num_experts == 0 {
            out.push(problem("model", "num_experts", "must be at least 1"));
        }
        if m.top_k == 0 || m.top_k > m.num_experts {
            out.push(problem("model", "top_k", format!("must lie in 1..={}", m.num_experts)));
        }
        for (key, v) in [
            ("num_layers", m.num_layers),
            ("d_model", m.d_model),
            ("d_ff", m.d_ff),
            ("bytes_per_param", m.bytes_per_param),
            ("vocab_size", m.vocab_size),
        ] {
            if v == 0 {
                out.push(problem("model", key, "must be at least 1"));
            }
        }
        for (key, v) in [("router_scale", m.router_scale), ("expert_gain", m.expert_gain)] {
            if !(v.is_finite() && v > 0.0) {
                out.push(problem("model", key, "must be positive"));
            }
        }

        let p = &self.policy;
        if m.top_k >= 1 && m.top_k <= m.num_experts {
            if let Some(policy) = p.policy(&m.spec()) {
                if let Err(e) = policy.validate(m.num_experts, m.top_k) {
                    let key = if policy.min_experts < m.top_k || policy.min_experts > m.num_experts {
                        "min_experts"
                    } else if policy.sample_threshold == 0 {
                        "sample_threshold"
                    } else {
                        "confidence_threshold"
                    };
                    out.push(problem("policy", key, e.to_string()));
                }
            }
        }

        let s = &self.schedule;
        for (key, v) in [
            ("batch_size", s.batch_size),
            ("num_batches", s.num_batches),
            ("prompt_len", s.prompt_len),
        ] {
            if v == 0 {
                out.push(problem("schedule", key, "must be at least 1"));
            }
        }

        let c = &self.cost;
        if c.active_experts == 0 {
            out.push(problem("cost", "active_experts", "must be at least 1"));
        }
        if !(c.context.is_finite() && c.context > 0.0) {
            out.push(problem("cost", "context", "must be positive"));
        }
        if c.batch_sizes.is_empty() || c.batch_sizes.contains(&0) {
            out.push(problem("cost", "batch_sizes", "must be a non-empty list of positive sizes"));
        }
        if let Some(counts) = &c.expert_counts {
            if counts.is_empty() || counts.contains(&0) {
                out.push(problem("cost", "expert_counts", "must be a non-empty list of positive counts"));
            }
        }
        if c.context_lengths.is_empty() || c.context_lengths.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            out.push(problem("cost", "context_lengths", "must be a non-empty list of positive lengths"));
        }
        if c.halving_band[0].partial_cmp(&c.halving_band[1]).is_none_or(|o| o.is_gt()) {
            out.push(problem("cost", "halving_band", "lower bound exceeds upper bound"));
        }
        if let Err(e) = self.cost.nominal.params(c.context.max(1.0)).validate() {
            out.push(problem("cost.nominal", "hbm_bandwidth", e.to_string()));
        }

        let a = &self.ablation;
        if a.seeds == 0 {
            out.push(problem("ablation", "seeds", "must be at least 1"));
        }
        if a.batch_size == 0 {
            out.push(problem("ablation", "batch_size", "must be at least 1"));
        }
        if a.window == 0 || a.window > m.num_layers {
            out.push(problem("ablation", "window", format!("must lie in 1..={}", m.num_layers)));
        }
        if a.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            out.push(problem("ablation", "thresholds", "every threshold must lie in [0, 1]"));
        }

        let an = &self.analysis;
        if an.confidence_threshold.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            out.push(problem("analysis", "confidence_threshold", "must lie in [0, 1]"));
        }
        if an.num_experts == Some(0) {
            out.push(problem("analysis", "num_experts", "must be at least 1"));
        }
        out
    }

    pub fn ablation_setup(&self) -> AblationSetup {
        AblationSetup {
            spec: self.model.spec(),
            options: self.model.sim_options(),
            batch_size: self.ablation.batch_size,
            prompt_len: self.schedule.prompt_len,
            decode_steps: self.schedule.decode_steps,
            base_seed: self.schedule.seed,
            seeds: self.ablation.seeds,
        }
    }

    pub fn ablation_params(&self) -> AblationParams {
        AblationParams {
            window: self.ablation.window,
            thresholds: self.ablation.thresholds.clone(),
        }
    }

    /// Hex SHA-256 of the fully resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
