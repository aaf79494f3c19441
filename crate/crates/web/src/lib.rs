//! Browser bindings: a routing/policy playground, calibrated latency curves
//! and expert saturation curves. Every export takes and returns JSON text.

use batchmoe::cost::{calibrate, decode_latency, read_measurements, CalibrationTarget, CostModelParams};
use batchmoe::policy::{apply_policy, select_important_tokens, vote_with, PolicyConfig, PolicyMode};
use batchmoe::router::{confidence, route_batch, RoutingLogits};
use batchmoe::saturation::{exact_saturation, RoutingDistribution};
use batchmoe::{MoeModelSpec, Phase};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Decode-step breakdown measured on a Mixtral-8x7B-shaped layer.
pub const DEFAULT_TABLE: &str = "batch_size,attn_ms,route_ms,mlp_ms
8,1.54,0.06,7.07
16,3.03,0.07,14.03
32,5.15,0.07,27.91
64,11.34,0.09,55.86
";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRequest {
    pub num_experts: usize,
    pub top_k: usize,
    pub batch_size: usize,
    /// "lat" or "acc".
    pub mode: String,
    pub drop_count: usize,
    pub confidence_threshold: f64,
    pub logit_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct TokenView {
    pub original: Vec<usize>,
    pub assigned: Vec<usize>,
    pub weights: Vec<f64>,
    pub confidence: f64,
    pub important: bool,
}

#[derive(Debug, Serialize)]
pub struct RouteResponse {
    pub votes: Vec<u64>,
    pub retained: Vec<usize>,
    pub clipped: bool,
    pub remap_rate: f64,
    pub tokens: Vec<TokenView>,
}

pub fn route_demo_json(request: &str) -> Result<String, String> {
    let req: RouteRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let spec = MoeModelSpec::toy(1, req.num_experts, req.top_k);
    spec.validate().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let rows: Vec<Vec<f64>> = (0..req.batch_size)
        .map(|_| {
            (0..req.num_experts)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    req.logit_scale * z
                })
                .collect()
        })
        .collect();
    let logits = RoutingLogits::from_rows(0, Phase::Decode, &rows).map_err(|e| e.to_string())?;
    let sel = route_batch(&logits, req.top_k).map_err(|e| e.to_string())?;
    let cfg = match req.mode.as_str() {
        "lat" => PolicyConfig::latency(&spec, req.drop_count),
        "acc" => PolicyConfig::accuracy(&spec, req.confidence_threshold, req.num_experts / 2),
        other => return Err(format!("unknown mode {other:?}; expected \"lat\" or \"acc\"")),
    };
    let mask = apply_policy(&sel, Phase::Decode, &cfg).map_err(|e| e.to_string())?;
    let important = if cfg.mode == PolicyMode::Acc {
        select_important_tokens(&sel, &cfg)
    } else {
        Vec::new()
    };
    let conf = confidence(&sel);
    let tokens = mask
        .remap
        .iter()
        .enumerate()
        .map(|(t, slots)| TokenView {
            original: slots.iter().map(|s| s.original).collect(),
            assigned: slots.iter().map(|s| s.assigned).collect(),
            weights: slots.iter().map(|s| s.weight).collect(),
            confidence: conf[t],
            important: important.contains(&t),
        })
        .collect();
    let response = RouteResponse {
        votes: vote_with(&sel, cfg.vote_weighting, None).counts,
        remap_rate: mask.remap_rate(),
        retained: mask.retained,
        clipped: mask.clipped,
        tokens,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveRequest {
    /// Measurement table; the built-in Mixtral-shaped table when absent.
    #[serde(default)]
    pub table: Option<String>,
    pub batch_sizes: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct SpeedupSeries {
    pub experts: usize,
    pub total_ms: Vec<f64>,
    pub speedup: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct CurveResponse {
    pub batch_sizes: Vec<usize>,
    pub hbm_bandwidth: f64,
    pub peak_compute: f64,
    pub max_mlp_error: f64,
    pub max_attn_error: f64,
    pub series: Vec<SpeedupSeries>,
}

pub fn latency_curves_json(request: &str) -> Result<String, String> {
    let req: CurveRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let table = req.table.as_deref().unwrap_or(DEFAULT_TABLE);
    let rows = read_measurements(table.as_bytes()).map_err(|e| e.to_string())?;
    let spec = MoeModelSpec::mixtral_8x7b();
    let cal = calibrate(
        &rows,
        &CalibrationTarget {
            spec,
            active_experts: 4,
            context: 500.0,
            fallback: CostModelParams::nominal_a100(),
        },
    )
    .map_err(|e| e.to_string())?;
    let total = |n: usize, e: usize| decode_latency(&cal.params, &spec, n, e).map(|b| b.total_ms);
    let series = (1..=spec.num_experts)
        .map(|e| {
            let total_ms = req
                .batch_sizes
                .iter()
                .map(|&n| total(n, e))
                .collect::<batchmoe::Result<Vec<f64>>>()?;
            let speedup = req
                .batch_sizes
                .iter()
                .zip(&total_ms)
                .map(|(&n, t)| total(n, spec.num_experts).map(|full| full / t))
                .collect::<batchmoe::Result<Vec<f64>>>()?;
            Ok(SpeedupSeries {
                experts: e,
                total_ms,
                speedup,
            })
        })
        .collect::<batchmoe::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let response = CurveResponse {
        batch_sizes: req.batch_sizes,
        hbm_bandwidth: cal.params.hbm_bandwidth,
        peak_compute: cal.params.peak_compute,
        max_mlp_error: cal.max_mlp_error(),
        max_attn_error: cal.max_attn_error(),
        series,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct SaturationResponse {
    pub batch_sizes: Vec<usize>,
    pub expected_active: Vec<f64>,
    pub p_all_active: Vec<f64>,
}

pub fn saturation_curve_json(num_experts: usize, top_k: usize, max_batch: usize) -> Result<String, String> {
    let mut out = SaturationResponse {
        batch_sizes: Vec::new(),
        expected_active: Vec::new(),
        p_all_active: Vec::new(),
    };
    for n in 1..=max_batch {
        let (e, p) = exact_saturation(n, num_experts, top_k, &RoutingDistribution::Uniform).map_err(|e| e.to_string())?;
        out.batch_sizes.push(n);
        out.expected_active.push(e);
        out.p_all_active.push(p);
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn route_demo(request: &str) -> Result<String, JsError> {
    route_demo_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn latency_curves(request: &str) -> Result<String, JsError> {
    latency_curves_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn saturation_curve(num_experts: usize, top_k: usize, max_batch: usize) -> Result<String, JsError> {
    saturation_curve_json(num_experts, top_k, max_batch).map_err(|e| JsError::new(&e))
}
