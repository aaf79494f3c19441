use batchmoe::analysis::{aggregate_frequencies, batch_skew_report, FrequencyTally, TraceFilter};
use batchmoe::policy::PolicyConfig;
use batchmoe::sim::{build_model, generate, Intervention, PhaseSplit, PromptBatch};
use batchmoe::trace::{read_trace, records_from_decisions, write_trace};
use batchmoe::workload::{generate_trace, WorkloadSpec};
use batchmoe::MoeModelSpec;

#[test]
fn simulated_trace_survives_jsonl() {
    let spec = MoeModelSpec::toy(3, 6, 2);
    let model = build_model(spec, 11).unwrap();
    let batch = PromptBatch::random(4, 3, 64, 11);
    let run = generate(
        &model,
        &batch,
        PhaseSplit { decode_steps: 3 },
        &Intervention::Policy(PolicyConfig::latency(&spec, 3)),
        true,
    )
    .unwrap();
    let records = records_from_decisions("rt", 0, &run.decisions);
    assert_eq!(records.len(), 3 * (4 * 3 + 3 * 4) * 2);

    let mut buf = Vec::new();
    write_trace(&mut buf, &records).unwrap();
    let back = read_trace(buf.as_slice()).unwrap();
    assert_eq!(back, records);
    assert!(back.iter().all(|r| r.validate().is_ok()));
}

#[test]
fn merged_tallies_match_the_whole_trace() {
    let spec = WorkloadSpec::clustered(8, 2, 16, 10);
    let trace = generate_trace(&spec, "m", 2).unwrap();
    let (a, b) = trace.split_at(trace.len() / 3);
    let all = TraceFilter::default();
    let left = FrequencyTally::from_records(a, 8, all).unwrap();
    let left = left.merge(&FrequencyTally::from_records(b, 8, all).unwrap()).unwrap();
    let whole = FrequencyTally::from_records(&trace, 8, all).unwrap();
    assert_eq!(left, whole);

    let freq = aggregate_frequencies(&trace, 8).unwrap();
    assert!((freq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let stats = batch_skew_report(&trace, 8).unwrap();
    assert_eq!(stats.batches.len(), 10);
}

#[test]
fn unknown_fields_are_rejected() {
    let line = r#"{"run_id":"x","layer":0,"batch_id":0,"phase":"decode","token_id":0,"rank":0,"expert_original":1,"expert_assigned":1,"weight":1.0,"confidence":0.5,"extra":1}"#;
    let err = read_trace(line.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}
