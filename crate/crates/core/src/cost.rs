//! Roofline latency model for batched MoE decode.
//!
//! Per layer the expert block costs `max(memory, compute)`, where memory is
//! the time to stream the active experts' weights and compute is the time
//! to push every token through its `top_k` experts. Attention is linear in
//! batch size and routing is a constant.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MoeModelSpec;

/// Attention cost at a reference context length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionCost {
    pub fixed_ms: f64,
    /// Milliseconds per batched token at `reference_context`.
    pub per_token_ms: f64,
    pub reference_context: f64,
    /// Exponent applied to `context / reference_context`.
    pub context_exponent: f64,
}

impl AttentionCost {
    pub fn at(&self, batch_size: usize, context: f64) -> f64 {
        let scale = (context / self.reference_context).powf(self.context_exponent);
        self.fixed_ms + self.per_token_ms * batch_size as f64 * scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Bytes per second.
    pub hbm_bandwidth: f64,
    /// Floating-point operations per second.
    pub peak_compute: f64,
    pub attn: AttentionCost,
    /// Routing cost per decode step, all layers.
    pub route_ms: f64,
}

impl CostModelParams {
    /// Nominal single-A100 figures (HBM2e bandwidth, dense bf16 peak). Only a
    /// starting point; use [`calibrate`] for anything quantitative.
    pub fn nominal_a100() -> Self {
        Self {
            hbm_bandwidth: 2.039e12,
            peak_compute: 312e12,
            attn: AttentionCost {
                fixed_ms: 0.05,
                per_token_ms: 0.17,
                reference_context: 500.0,
                context_exponent: 1.0,
            },
            route_ms: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.hbm_bandwidth) || !positive(self.peak_compute) {
            return Err(Error::InvalidConfig(
                "bandwidth and peak compute must be positive".into(),
            ));
        }
        if !non_negative(self.attn.fixed_ms)
            || !non_negative(self.attn.per_token_ms)
            || !positive(self.attn.reference_context)
            || !self.attn.context_exponent.is_finite()
        {
            return Err(Error::InvalidConfig("invalid attention coefficients".into()));
        }
        if !non_negative(self.route_ms) {
            return Err(Error::InvalidConfig("route_ms must be non-negative".into()));
        }
        Ok(())
    }

    /// Weight-streaming time of one layer with `active` experts, in ms.
    pub fn layer_memory_ms(&self, spec: &MoeModelSpec, active: usize) -> f64 {
        active as f64 * spec.expert_param_bytes() / self.hbm_bandwidth * 1e3
    }

    /// Expert compute time of one layer for `batch_size` tokens, in ms.
    pub fn layer_compute_ms(&self, spec: &MoeModelSpec, batch_size: usize) -> f64 {
        (batch_size * spec.top_k) as f64 * spec.expert_flops_per_token() / self.peak_compute * 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    ComputeBound,
    MemoryBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub attn_ms: f64,
    pub route_ms: f64,
    pub mlp_ms: f64,
    pub total_ms: f64,
    pub regime: Regime,
}

/// Operations per byte of expert weights moved: `n·k / total_experts`.
pub fn arithmetic_intensity(n: usize, k: usize, total_experts: usize) -> Result<f64> {
    if total_experts == 0 {
        return Err(Error::InvalidConfig("total_experts must be at least 1".into()));
    }
    if n == 0 || k == 0 {
        return Err(Error::InvalidConfig("n and k must be at least 1".into()));
    }
    Ok((n * k) as f64 / total_experts as f64)
}

/// One decode step at the attention model's reference context.
pub fn decode_latency(
    params: &CostModelParams,
    spec: &MoeModelSpec,
    batch_size: usize,
    active_experts: usize,
) -> Result<LatencyBreakdown> {
    decode_latency_at(params, spec, batch_size, active_experts, params.attn.reference_context)
}

pub fn decode_latency_at(
    params: &CostModelParams,
    spec: &MoeModelSpec,
    batch_size: usize,
    active_experts: usize,
    context: f64,
) -> Result<LatencyBreakdown> {
    params.validate()?;
    spec.validate()?;
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    if active_experts == 0 || active_experts > spec.num_experts {
        return Err(Error::InvalidConfig(format!(
            "active_experts must lie in 1..={}, got {active_experts}",
            spec.num_experts
        )));
    }
    if !(context.is_finite() && context > 0.0) {
        return Err(Error::InvalidConfig("context must be positive".into()));
    }
    let memory = params.layer_memory_ms(spec, active_experts);
    let compute = params.layer_compute_ms(spec, batch_size);
    let mlp_ms = spec.num_layers as f64 * memory.max(compute);
    let attn_ms = params.attn.at(batch_size, context);
    let route_ms = params.route_ms;
    Ok(LatencyBreakdown {
        attn_ms,
        route_ms,
        mlp_ms,
        total_ms: attn_ms + route_ms + mlp_ms,
        regime: if memory > compute {
            Regime::MemoryBound
        } else {
            Regime::ComputeBound
        },
    })
}

/// Smallest batch size at which `active` experts become compute-bound.
pub fn compute_bound_threshold(params: &CostModelParams, spec: &MoeModelSpec, active: usize) -> usize {
    let per_token = params.layer_compute_ms(spec, 1);
    let memory = params.layer_memory_ms(spec, active);
    (memory / per_token).floor() as usize + 1
}

/// `(count, total(N) / total(count))` for each requested expert count.
pub fn speedup_curve(
    params: &CostModelParams,
    spec: &MoeModelSpec,
    batch_size: usize,
    expert_counts: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let full = decode_latency(params, spec, batch_size, spec.num_experts)?.total_ms;
    expert_counts
        .iter()
        .map(|&e| Ok((e, full / decode_latency(params, spec, batch_size, e)?.total_ms)))
        .collect()
}

/// Limit of the speedup as the expert block vanishes.
pub fn amdahl_ceiling(params: &CostModelParams, spec: &MoeModelSpec, batch_size: usize) -> Result<f64> {
    let full = decode_latency(params, spec, batch_size, spec.num_experts)?;
    Ok(full.total_ms / (full.attn_ms + full.route_ms))
}

/// One measured row of a latency breakdown table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub batch_size: usize,
    pub attn_ms: f64,
    pub route_ms: f64,
    pub mlp_ms: f64,
}

/// Hardware and shape context of a measurement table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationTarget {
    pub spec: MoeModelSpec,
    /// Experts active while the MLP column was measured.
    pub active_experts: usize,
    /// Context length at which attention was measured.
    pub context: f64,
    /// Used for any roofline term the data cannot identify.
    pub fallback: CostModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowResidual {
    pub batch_size: usize,
    pub attn_rel: f64,
    pub route_rel: f64,
    pub mlp_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: CostModelParams,
    pub residuals: Vec<RowResidual>,
    /// Rows the fit places on the memory-bound side of the roofline.
    pub memory_bound_rows: usize,
}

impl Calibration {
    pub fn max_mlp_error(&self) -> f64 {
        self.residuals.iter().map(|r| r.mlp_rel.abs()).fold(0.0, f64::max)
    }

    pub fn max_attn_error(&self) -> f64 {
        self.residuals.iter().map(|r| r.attn_rel.abs()).fold(0.0, f64::max)
    }
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

fn slope_through_origin(xs: &[f64], ys: &[f64]) -> f64 {
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    sxy / sxx
}

/// Fits `max(a, b·n)` by trying every split of the batch-size-sorted rows
/// into a memory-bound prefix (mean gives `a`) and a compute-bound suffix
/// (slope through the origin gives `b`), keeping the least-squares split.
/// Terms with no rows on their side come from `fallback_a` / `fallback_b`,
/// clipped so they stay inactive on the observed range.
fn fit_roofline(ns: &[f64], ys: &[f64], fallback_a: f64, fallback_b: f64) -> (f64, f64, usize) {
    let m = ns.len();
    let mut best = (f64::INFINITY, 0.0, 0.0, 0);
    for j in 0..=m {
        let a = if j > 0 {
            ys[..j].iter().sum::<f64>() / j as f64
        } else {
            fallback_a.min(fallback_b.max(0.0) * ns[0])
        };
        let b = if j < m {
            slope_through_origin(&ns[j..], &ys[j..])
        } else {
            fallback_b.min(a / ns[m - 1])
        };
        if !(a > 0.0 && b > 0.0) {
            continue;
        }
        let sse: f64 = ns
            .iter()
            .zip(ys)
            .map(|(&n, &y)| (a.max(b * n) - y).powi(2))
            .sum();
        if sse < best.0 {
            best = (sse, a, b, j);
        }
    }
    (best.1, best.2, best.3)
}

/// Least-squares fit of a measurement table: linear attention, constant
/// routing and a two-piece roofline for the MLP column, converted back to
/// effective bandwidth and compute for `target.spec`.
pub fn calibrate(rows: &[Measurement], target: &CalibrationTarget) -> Result<Calibration> {
    if rows.len() < 2 {
        return Err(Error::Calibration(format!(
            "need at least 2 measurement rows, got {}",
            rows.len()
        )));
    }
    target.spec.validate()?;
    target.fallback.validate()?;
    if target.active_experts == 0 || target.active_experts > target.spec.num_experts {
        return Err(Error::Calibration("active_experts outside 1..=num_experts".into()));
    }
    for r in rows {
        let ok = r.batch_size > 0
            && [r.attn_ms, r.route_ms, r.mlp_ms]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
            && r.mlp_ms > 0.0;
        if !ok {
            return Err(Error::Calibration(format!(
                "row with batch_size {} has a non-positive or non-finite value",
                r.batch_size
            )));
        }
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.batch_size);
    let ns: Vec<f64> = sorted.iter().map(|r| r.batch_size as f64).collect();

    let attn: Vec<f64> = sorted.iter().map(|r| r.attn_ms).collect();
    let (mut fixed, mut per_token) = linear_fit(&ns, &attn).ok_or_else(|| {
        Error::Calibration("all rows share one batch size; attention slope is unidentified".into())
    })?;
    if fixed < 0.0 {
        fixed = 0.0;
        per_token = slope_through_origin(&ns, &attn);
    }
    if per_token < 0.0 {
        return Err(Error::Calibration(format!(
            "attention time decreases with batch size (slope {per_token:.4} ms/token)"
        )));
    }
    let route_ms = sorted.iter().map(|r| r.route_ms).sum::<f64>() / sorted.len() as f64;

    let spec = &target.spec;
    let layers = spec.num_layers as f64;
    let fb = &target.fallback;
    let fallback_a = layers * fb.layer_memory_ms(spec, target.active_experts);
    let fallback_b = layers * fb.layer_compute_ms(spec, 1);
    let mlp: Vec<f64> = sorted.iter().map(|r| r.mlp_ms).collect();
    let (a, b, memory_bound_rows) = fit_roofline(&ns, &mlp, fallback_a, fallback_b);
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Calibration("MLP column admits no positive roofline fit".into()));
    }

    let attn_model = AttentionCost {
        fixed_ms: fixed,
        per_token_ms: per_token,
        reference_context: target.context,
        context_exponent: fb.attn.context_exponent,
    };
    let params = CostModelParams {
        hbm_bandwidth: layers * target.active_experts as f64 * spec.expert_param_bytes() / (a * 1e-3),
        peak_compute: layers * spec.top_k as f64 * spec.expert_flops_per_token() / (b * 1e-3),
        attn: attn_model,
        route_ms,
    };
    params.validate().map_err(|e| Error::Calibration(e.to_string()))?;

    let rel = |pred: f64, obs: f64| if obs == 0.0 { pred - obs } else { (pred - obs) / obs };
    let residuals = sorted
        .iter()
        .map(|r| {
            let p = decode_latency(&params, spec, r.batch_size, target.active_experts)?;
            Ok(RowResidual {
                batch_size: r.batch_size,
                attn_rel: rel(p.attn_ms, r.attn_ms),
                route_rel: rel(p.route_ms, r.route_ms),
                mlp_rel: rel(p.mlp_ms, r.mlp_ms),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Calibration {
        params,
        residuals,
        memory_bound_rows,
    })
}

/// Reads a calibration table with header `batch_size, attn_ms, route_ms,
/// mlp_ms` in any column order. Comma, tab and semicolon delimiters are
/// detected from the header line.
pub fn read_measurements<R: Read>(mut reader: R) -> Result<Vec<Measurement>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let header = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    let delimiter = b"\t;,"
        .iter()
        .copied()
        .find(|d| header.as_bytes().contains(d))
        .unwrap_or(b',');
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in csv.deserialize::<Measurement>().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(i + 2, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        rows.push(record);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn measured_table() -> Vec<Measurement> {
        [
            (8, 1.54, 0.06, 7.07),
            (16, 3.03, 0.07, 14.03),
            (32, 5.15, 0.07, 27.91),
            (64, 11.34, 0.09, 55.86),
        ]
        .into_iter()
        .map(|(batch_size, attn_ms, route_ms, mlp_ms)| Measurement {
            batch_size,
            attn_ms,
            route_ms,
            mlp_ms,
        })
        .collect()
    }

    fn mixtral_target() -> CalibrationTarget {
        CalibrationTarget {
            spec: MoeModelSpec::mixtral_8x7b(),
            active_experts: 4,
            context: 500.0,
            fallback: CostModelParams::nominal_a100(),
        }
    }

    #[test]
    fn intensity_cases() {
        assert_eq!(arithmetic_intensity(8, 2, 8).unwrap(), 2.0);
        assert_eq!(arithmetic_intensity(8, 1, 8).unwrap(), 1.0);
        assert_eq!(arithmetic_intensity(32, 2, 8).unwrap(), 8.0);
        assert!(arithmetic_intensity(8, 2, 0).is_err());
    }

    #[test]
    fn doubling_experts_doubles_memory_bound_mlp() {
        let params = CostModelParams::nominal_a100();
        let spec = MoeModelSpec::mixtral_8x7b();
        let a = decode_latency(&params, &spec, 1, 2).unwrap();
        let b = decode_latency(&params, &spec, 1, 4).unwrap();
        assert_eq!(a.regime, Regime::MemoryBound);
        assert_eq!(b.regime, Regime::MemoryBound);
        assert_relative_eq!(b.mlp_ms, 2.0 * a.mlp_ms, max_relative = 1e-12);
    }

    #[test]
    fn breakdown_sums() {
        let params = CostModelParams::nominal_a100();
        let spec = MoeModelSpec::dbrx();
        let b = decode_latency(&params, &spec, 24, 9).unwrap();
        assert_eq!(b.total_ms, b.attn_ms + b.route_ms + b.mlp_ms);
    }

    #[test]
    fn rejects_bad_counts() {
        let params = CostModelParams::nominal_a100();
        let spec = MoeModelSpec::mixtral_8x7b();
        assert!(decode_latency(&params, &spec, 8, 0).is_err());
        assert!(decode_latency(&params, &spec, 8, 9).is_err());
        assert!(decode_latency(&params, &spec, 0, 4).is_err());
    }

    #[test]
    fn measured_table_fit() {
        let cal = calibrate(&measured_table(), &mixtral_target()).unwrap();
        assert!(cal.max_mlp_error() < 0.15, "{:?}", cal.residuals);
        assert!(cal.max_attn_error() < 0.15, "{:?}", cal.residuals);
        let spec = MoeModelSpec::mixtral_8x7b();
        let p = decode_latency(&cal.params, &spec, 32, 4).unwrap();
        assert!((p.attn_ms - 5.15).abs() / 5.15 < 0.15);
        assert!((p.route_ms - 0.07).abs() < 0.01);
        assert!((p.mlp_ms - 27.91).abs() / 27.91 < 0.15);
        for n in [8, 16, 32, 64] {
            let b = decode_latency(&cal.params, &spec, n, 4).unwrap();
            assert!(b.route_ms / b.total_ms < 0.01);
        }
    }

    #[test]
    fn single_token_is_memory_bound_when_calibrated() {
        let cal = calibrate(&measured_table(), &mixtral_target()).unwrap();
        let spec = MoeModelSpec::mixtral_8x7b();
        let b = decode_latency(&cal.params, &spec, 1, spec.top_k).unwrap();
        assert!(cal.params.layer_memory_ms(&spec, 2) > cal.params.layer_compute_ms(&spec, 1));
        assert_eq!(b.regime, Regime::MemoryBound);
    }

    #[test]
    fn exact_linear_data_has_zero_residual() {
        let rows: Vec<Measurement> = [4usize, 8, 16, 32]
            .into_iter()
            .map(|n| Measurement {
                batch_size: n,
                attn_ms: 0.2 + 0.1 * n as f64,
                route_ms: 0.05,
                mlp_ms: 0.5 * n as f64,
            })
            .collect();
        let cal = calibrate(&rows, &mixtral_target()).unwrap();
        for r in &cal.residuals {
            assert!(r.attn_rel.abs() < 1e-12);
            assert!(r.route_rel.abs() < 1e-12);
            assert!(r.mlp_rel.abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_recovers_generating_params() {
        let spec = MoeModelSpec::mixtral_8x7b();
        let truth = CostModelParams {
            hbm_bandwidth: 3.1e12,
            peak_compute: 40e12,
            attn: AttentionCost {
                fixed_ms: 0.3,
                per_token_ms: 0.12,
                reference_context: 500.0,
                context_exponent: 1.0,
            },
            route_ms: 0.08,
        };
        let rows: Vec<Measurement> = [1usize, 2, 4, 8, 16, 32, 64, 128]
            .into_iter()
            .map(|n| {
                let b = decode_latency(&truth, &spec, n, 4).unwrap();
                Measurement {
                    batch_size: n,
                    attn_ms: b.attn_ms,
                    route_ms: b.route_ms,
                    mlp_ms: b.mlp_ms,
                }
            })
            .collect();
        let cal = calibrate(&rows, &mixtral_target()).unwrap();
        let p = cal.params;
        assert_relative_eq!(p.hbm_bandwidth, truth.hbm_bandwidth, max_relative = 0.01);
        assert_relative_eq!(p.peak_compute, truth.peak_compute, max_relative = 0.01);
        assert_relative_eq!(p.attn.fixed_ms, truth.attn.fixed_ms, max_relative = 0.01);
        assert_relative_eq!(p.attn.per_token_ms, truth.attn.per_token_ms, max_relative = 0.01);
        assert_relative_eq!(p.route_ms, truth.route_ms, max_relative = 0.01);
    }

    #[test]
    fn calibration_rejects_degenerate_tables() {
        let one = &measured_table()[..1];
        assert!(matches!(calibrate(one, &mixtral_target()), Err(Error::Calibration(_))));
        let mut same = measured_table();
        for r in &mut same {
            r.batch_size = 8;
        }
        let err = calibrate(&same, &mixtral_target()).unwrap_err();
        assert!(err.to_string().contains("batch size"));
    }

    #[test]
    fn speedup_identity_and_ceiling() {
        let cal = calibrate(&measured_table(), &mixtral_target()).unwrap();
        let spec = MoeModelSpec::mixtral_8x7b();
        let curve = speedup_curve(&cal.params, &spec, 8, &[8, 6, 4, 2, 1]).unwrap();
        assert_eq!(curve[0], (8, 1.0));
        let ceiling = amdahl_ceiling(&cal.params, &spec, 8).unwrap();
        for pair in curve.windows(2) {
            assert!(pair[1].1 >= pair[0].1);
        }
        assert!(curve.iter().all(|&(_, s)| s < ceiling));
    }

    #[test]
    fn large_batches_are_compute_bound_and_flat() {
        let params = CostModelParams::nominal_a100();
        let spec = MoeModelSpec::mixtral_8x7b();
        let n = compute_bound_threshold(&params, &spec, spec.num_experts);
        let totals: Vec<f64> = (1..=spec.num_experts)
            .map(|e| {
                let b = decode_latency(&params, &spec, n, e).unwrap();
                assert_eq!(b.regime, Regime::ComputeBound);
                b.total_ms
            })
            .collect();
        let lo = totals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = totals.iter().copied().fold(0.0, f64::max);
        assert!((hi - lo) / lo < 0.10);
        let below = decode_latency(&params, &spec, n - 1, spec.num_experts).unwrap();
        assert_eq!(below.regime, Regime::MemoryBound);
    }

    #[test]
    fn context_scaling() {
        let mut params = CostModelParams::nominal_a100();
        params.attn.context_exponent = 1.0;
        let spec = MoeModelSpec::mixtral_8x7b();
        let a = decode_latency_at(&params, &spec, 8, 8, 500.0).unwrap();
        let b = decode_latency_at(&params, &spec, 8, 8, 1000.0).unwrap();
        assert_relative_eq!(
            b.attn_ms - params.attn.fixed_ms,
            2.0 * (a.attn_ms - params.attn.fixed_ms),
            max_relative = 1e-12
        );
    }

    #[test]
    fn reads_tables_with_any_delimiter() {
        let comma = "batch_size,attn_ms,route_ms,mlp_ms\n8,1.54,0.06,7.07\n16,3.03,0.07,14.03\n";
        let tab = "# measured, one row per batch; tab separated\nbatch_size\tmlp_ms\tattn_ms\troute_ms\n8\t7.07\t1.54\t0.06\n";
        let a = read_measurements(comma.as_bytes()).unwrap();
        let b = read_measurements(tab.as_bytes()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0], b[0]);
        let bad = "batch_size,attn_ms,route_ms,mlp_ms\n8,1.54,0.06,7.07\n16,x,0.07,14.03\n";
        match read_measurements(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn latency_monotone(n in 1usize..256, e in 1usize..8) {
            let params = CostModelParams::nominal_a100();
            let spec = MoeModelSpec::mixtral_8x7b();
            let base = decode_latency(&params, &spec, n, e).unwrap().total_ms;
            prop_assert!(decode_latency(&params, &spec, n, e + 1).unwrap().total_ms >= base);
            prop_assert!(decode_latency(&params, &spec, n + 1, e).unwrap().total_ms >= base);
        }
    }
}
