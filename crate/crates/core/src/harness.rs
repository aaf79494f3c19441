//! Subcommand drivers: simulate, costmodel, analyze and ablate.
//!
//! Each command writes its artifacts into an output directory through
//! temporary files renamed into place, then a `manifest.json` listing every
//! artifact with its SHA-256, the config hash and the tool version. Nothing
//! time- or host-dependent is written, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ablation::{run_ablation, AblationKind, Bench};
use crate::analysis::{batch_skew_by_layer, batch_skew_filtered, infer_num_experts, reduction_summary, TraceFilter};
use crate::config::{CostModelShape, OutputFormat, RunConfig};
use crate::cost::{calibrate, decode_latency_at, read_measurements, CalibrationTarget, CostModelParams};
use crate::error::{Error, Result};
use crate::model::{MoeModelSpec, Phase};
use crate::sim::{build_model_with, run_experiment, Intervention, PhaseSplit, PromptBatch};
use crate::trace::{read_trace, records_from_decisions, write_trace};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One point of a plot-ready curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub x: f64,
    pub series: String,
    pub value: f64,
}

fn row(x: f64, series: impl Into<String>, value: f64) -> CurveRow {
    CurveRow {
        x,
        series: series.into(),
        value,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn curves_csv(rows: &[CurveRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub warnings: Vec<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// Human-readable summary, also written to `report.txt`.
    pub report: String,
}

struct Artifacts {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
            files: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        atomic_write(&path, bytes)?;
        info!("wrote {}", path.display());
        self.entries.push(ArtifactEntry {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        self.files.push(path);
        Ok(())
    }

    fn put_curves(&mut self, stem: &str, rows: &[CurveRow], format: OutputFormat) -> Result<()> {
        match format {
            OutputFormat::Csv => self.put(&format!("{stem}.csv"), &curves_csv(rows)?),
            OutputFormat::Jsonl => self.put(&format!("{stem}.jsonl"), &jsonl(rows)?),
        }
    }

    fn finish(
        mut self,
        command: &str,
        run_id: String,
        config: &RunConfig,
        warnings: Vec<String>,
        report: String,
    ) -> Result<RunOutcome> {
        self.put("report.txt", report.as_bytes())?;
        let manifest = Manifest {
            tool: TOOL.to_string(),
            version: VERSION.to_string(),
            command: command.to_string(),
            run_id: run_id.clone(),
            config_hash: config.hash(),
            seed: config.schedule.seed,
            warnings: warnings.clone(),
            artifacts: self.entries.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.dir.join("manifest.json");
        atomic_write(&path, &bytes)?;
        self.files.push(path);
        Ok(RunOutcome {
            run_id,
            out_dir: self.dir,
            files: self.files,
            warnings,
            report,
        })
    }
}

fn run_id(command: &str, config: &RunConfig) -> String {
    format!("{command}-{}-s{}", &config.hash()[..12], config.schedule.seed)
}

/// Runs the configured policy over seeded prompt batches, writing the
/// routing trace and per-batch divergence against an unmodified run.
pub fn cmd_simulate(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let spec = config.model.spec();
    let seed = config.schedule.seed;
    let model = build_model_with(spec, seed, config.model.sim_options())?;
    let policy = config.policy.policy(&spec);
    let intervention = policy.clone().map_or(Intervention::None, Intervention::Policy);
    let id = run_id("simulate", config);
    let s = &config.schedule;
    let split = PhaseSplit {
        decode_steps: s.decode_steps,
    };

    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut clipped = 0usize;
    let mut report = String::new();
    writeln!(report, "run {id}").unwrap();
    for b in 0..s.num_batches {
        let batch = PromptBatch::random(
            s.batch_size,
            s.prompt_len,
            config.model.vocab_size,
            seed.wrapping_add(b as u64),
        );
        let outcome = run_experiment(&model, &batch, &intervention, split)?;
        clipped += outcome.intervened.decisions.iter().filter(|d| d.mask.clipped).count();
        let offset = b * (1 + s.decode_steps);
        let batch_records = records_from_decisions(&id, offset, &outcome.intervened.decisions);
        let served = if s.decode_steps > 0 {
            reduction_summary(&batch_records, Some(Phase::Decode), None)?.mean_active
        } else {
            spec.num_experts as f64
        };
        records.extend(batch_records);

        let r = &outcome.report;
        let x = b as f64;
        rows.extend([
            row(x, "mean_l2", r.mean_l2),
            row(x, "mean_cosine", r.mean_cosine),
            row(x, "prefill_mean_l2", r.prefill_mean_l2),
            row(x, "decode_mean_l2", r.decode_mean_l2),
            row(x, "final_step_l2", r.final_step_l2),
            row(x, "decode_mean_active_experts", served),
        ]);
        writeln!(
            report,
            "batch {b}: mean L2 {:.6}, mean cosine {:.6}, decode experts served {served:.3}",
            r.mean_l2, r.mean_cosine
        )
        .unwrap();
    }

    let mut warnings = Vec::new();
    if clipped > 0 {
        let p = policy.as_ref().expect("only policies clip");
        let msg = format!(
            "drop_count {} exceeds num_experts - min_experts ({}); {clipped} layer decisions were clipped",
            p.drop_count,
            spec.num_experts.saturating_sub(p.min_experts)
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    writeln!(report, "trace records: {}", records.len()).unwrap();

    let mut art = Artifacts::new(out_dir)?;
    let mut trace = Vec::new();
    write_trace(&mut trace, &records)?;
    art.put("trace.jsonl", &trace)?;
    art.put_curves("divergence", &rows, config.output.format)?;
    art.finish("simulate", id, config, warnings, report)
}

fn cost_spec(config: &RunConfig) -> MoeModelSpec {
    match config.cost.shape {
        CostModelShape::Mixtral8x7b => MoeModelSpec::mixtral_8x7b(),
        CostModelShape::Dbrx => MoeModelSpec::dbrx(),
        CostModelShape::Config => config.model.spec(),
    }
}

/// Calibrates against the configured table (or falls back to the nominal
/// profile) and writes latency and speedup curves over the sweep grid.
pub fn cmd_costmodel(config: &RunConfig, calibration: Option<&Path>, out_dir: &Path) -> Result<RunOutcome> {
    let c = &config.cost;
    let spec = cost_spec(config);
    spec.validate()?;
    let nominal = c.nominal.params(c.context);
    let id = run_id("costmodel", config);
    let mut warnings = Vec::new();
    let mut report = String::new();
    writeln!(report, "run {id}").unwrap();
    let mut art = Artifacts::new(out_dir)?;

    let table = calibration.map(Path::to_path_buf).or_else(|| c.calibration.clone());
    let params: CostModelParams = match table {
        Some(path) => {
            let file = fs::File::open(&path)
                .map_err(|e| Error::InvalidConfig(format!("cannot open {}: {e}", path.display())))?;
            let rows = read_measurements(file)?;
            let cal = calibrate(
                &rows,
                &CalibrationTarget {
                    spec,
                    active_experts: c.active_experts,
                    context: c.context,
                    fallback: nominal,
                },
            )?;
            writeln!(
                report,
                "calibrated: bandwidth {:.4e} B/s, compute {:.4e} FLOP/s, attention {:.5} + {:.5}·n ms, route {:.4} ms",
                cal.params.hbm_bandwidth,
                cal.params.peak_compute,
                cal.params.attn.fixed_ms,
                cal.params.attn.per_token_ms,
                cal.params.route_ms
            )
            .unwrap();
            writeln!(report, "memory-bound rows in fit: {}", cal.memory_bound_rows).unwrap();
            for r in &cal.residuals {
                writeln!(
                    report,
                    "batch {:>4}: mlp {:+.2}%  attn {:+.2}%  route {:+.2}%",
                    r.batch_size,
                    100.0 * r.mlp_rel,
                    100.0 * r.attn_rel,
                    100.0 * r.route_rel
                )
                .unwrap();
            }
            let mut bytes = serde_json::to_vec_pretty(&cal)?;
            bytes.push(b'\n');
            art.put("calibration.json", &bytes)?;
            cal.params
        }
        None => {
            let msg = "no calibration table given; curves use the nominal profile".to_string();
            warn!("{msg}");
            warnings.push(msg);
            nominal
        }
    };

    let counts: Vec<usize> = c
        .expert_counts
        .clone()
        .unwrap_or_else(|| (1..=spec.num_experts).collect());
    let mut latency = Vec::new();
    let mut speedup = Vec::new();
    for &ctx in &c.context_lengths {
        for &n in &c.batch_sizes {
            let full = decode_latency_at(&params, &spec, n, spec.num_experts, ctx)?.total_ms;
            for &e in &counts {
                let b = decode_latency_at(&params, &spec, n, e, ctx)?;
                latency.push(row(n as f64, format!("experts={e} context={ctx}"), b.total_ms));
                speedup.push(row(n as f64, format!("experts={e} context={ctx}"), full / b.total_ms));
            }
        }
    }

    let half = spec.num_experts / 2;
    let [lo, hi] = c.halving_band;
    for &n in c.batch_sizes.iter().filter(|&&n| (8..=32).contains(&n)) {
        let full = decode_latency_at(&params, &spec, n, spec.num_experts, c.context)?.total_ms;
        let halved = decode_latency_at(&params, &spec, n, half.max(1), c.context)?.total_ms;
        let s = full / halved;
        let verdict = if (lo..=hi).contains(&s) { "PASS" } else { "FAIL" };
        writeln!(
            report,
            "speedup {}->{} at batch {n}: {s:.3} (band {lo:.2}-{hi:.2}) {verdict}",
            spec.num_experts,
            half.max(1)
        )
        .unwrap();
    }

    art.put_curves("latency", &latency, config.output.format)?;
    art.put_curves("speedup", &speedup, config.output.format)?;
    art.finish("costmodel", id, config, warnings, report)
}

/// Activation statistics, batch skew and reduction summary of a trace.
pub fn cmd_analyze(config: &RunConfig, trace_path: &Path, out_dir: &Path) -> Result<RunOutcome> {
    let file = fs::File::open(trace_path)
        .map_err(|e| Error::InvalidConfig(format!("cannot open {}: {e}", trace_path.display())))?;
    let trace = read_trace(BufReader::new(file))?;
    if trace.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let a = &config.analysis;
    let n = a.num_experts.unwrap_or_else(|| infer_num_experts(&trace));
    let phase = a.phase.phase();
    let id = run_id("analyze", config);
    let mut warnings = Vec::new();
    let mut report = String::new();
    writeln!(report, "run {id}").unwrap();
    writeln!(report, "records: {}, experts: {n}", trace.len()).unwrap();
    let mut rows = Vec::new();
    let mut art = Artifacts::new(out_dir)?;

    match batch_skew_filtered(&trace, n, TraceFilter { layer: None, phase }) {
        Ok(stats) => {
            let max_std = stats.per_batch_std.iter().copied().fold(0.0, f64::max);
            let flag = if stats.skew_ratio >= a.skew_threshold { "skewed" } else { "not skewed" };
            writeln!(report, "batches: {}", stats.batches.len()).unwrap();
            writeln!(report, "aggregate std: {:.6}", stats.aggregate_std).unwrap();
            writeln!(report, "max per-batch std: {max_std:.6}").unwrap();
            writeln!(
                report,
                "skew ratio: {:.3} (threshold {:.2}, {flag})",
                stats.skew_ratio, a.skew_threshold
            )
            .unwrap();
            for (e, (&f, &s)) in stats.aggregate_freq.iter().zip(&stats.per_batch_std).enumerate() {
                rows.push(row(e as f64, "aggregate_freq", f));
                rows.push(row(e as f64, "per_batch_std", s));
            }
            let mut bytes = serde_json::to_vec_pretty(&stats)?;
            bytes.push(b'\n');
            art.put("activation_stats.json", &bytes)?;
            for (layer, s) in batch_skew_by_layer(&trace, n, phase)? {
                for (e, &f) in s.aggregate_freq.iter().enumerate() {
                    rows.push(row(e as f64, format!("layer{layer}_aggregate_freq"), f));
                }
                for (e, &v) in s.per_batch_std.iter().enumerate() {
                    rows.push(row(e as f64, format!("layer{layer}_per_batch_std"), v));
                }
            }
        }
        Err(e) => {
            let msg = format!("batch skew skipped: {e}");
            warn!("{msg}");
            warnings.push(msg);
        }
    }

    let summary = reduction_summary(&trace, phase, a.confidence_threshold)?;
    writeln!(
        report,
        "experts served per layer-batch: mean {:.3}, min {}, max {}",
        summary.mean_active, summary.min_active, summary.max_active
    )
    .unwrap();
    writeln!(report, "remap rate: {:.6}", summary.remap_rate).unwrap();
    if let Some(f) = summary.important_fraction {
        writeln!(report, "important-token fraction: {f:.6}").unwrap();
    }
    let mut reduction = Vec::new();
    for l in &summary.layers {
        let x = l.layer as f64;
        reduction.push(row(x, "mean_active", l.mean_active));
        reduction.push(row(x, "min_active", l.min_active as f64));
        reduction.push(row(x, "max_active", l.max_active as f64));
    }
    for (&count, &times) in &summary.active_histogram {
        reduction.push(row(count as f64, "active_histogram", times as f64));
    }

    art.put_curves("frequencies", &rows, config.output.format)?;
    art.put_curves("reduction", &reduction, config.output.format)?;
    art.finish("analyze", id, config, warnings, report)
}

#[derive(Serialize)]
struct ConditionLine<'a> {
    label: &'a str,
    x: f64,
    series: &'a str,
    mean: f64,
    per_seed: &'a [f64],
}

/// Runs one ablation grid over the configured seeds.
pub fn cmd_ablate(config: &RunConfig, kind: AblationKind, out_dir: &Path) -> Result<RunOutcome> {
    let bench = Bench::prepare(config.ablation_setup())?;
    let conditions = run_ablation(kind, &bench, &config.ablation_params())?;
    let id = run_id(&format!("ablate-{kind}"), config);
    let mut report = String::new();
    writeln!(report, "run {id}").unwrap();
    writeln!(report, "{kind}: {} seeds", config.ablation.seeds).unwrap();
    for c in &conditions {
        writeln!(report, "{:<40} {:<16} {:.6}", c.label, c.series, c.mean()).unwrap();
    }
    let mut art = Artifacts::new(out_dir)?;
    let stem = format!("ablation-{kind}");
    match config.output.format {
        OutputFormat::Csv => {
            let rows: Vec<CurveRow> = conditions.iter().map(|c| row(c.x, c.series.clone(), c.mean())).collect();
            art.put(&format!("{stem}.csv"), &curves_csv(&rows)?)?;
        }
        OutputFormat::Jsonl => {
            let lines: Vec<ConditionLine> = conditions
                .iter()
                .map(|c| ConditionLine {
                    label: &c.label,
                    x: c.x,
                    series: &c.series,
                    mean: c.mean(),
                    per_seed: &c.per_seed,
                })
                .collect();
            art.put(&format!("{stem}.jsonl"), &jsonl(&lines)?)?;
        }
    }
    art.finish(&format!("ablate-{kind}"), id, config, Vec::new(), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_dot_decimals() {
        let bytes = curves_csv(&[row(1.0, "a", 0.5), row(2.0, "b", 1e-3)]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text, "x,series,value\n1.0,a,0.5\n2.0,b,0.001\n");
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn run_id_embeds_hash_and_seed() {
        let c = RunConfig::default();
        let id = run_id("simulate", &c);
        assert!(id.starts_with("simulate-"));
        assert!(id.ends_with("-s0"));
        assert!(id.contains(&c.hash()[..12]));
    }
}
