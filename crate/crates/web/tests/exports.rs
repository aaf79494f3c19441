use batchmoe_web::{latency_curves_json, route_demo_json, saturation_curve_json};
use serde_json::Value;

fn route(mode: &str, drop: usize) -> Value {
    let req = format!(
        r#"{{"num_experts":8,"top_k":2,"batch_size":12,"mode":"{mode}","drop_count":{drop},"confidence_threshold":0.5,"logit_scale":1.5,"seed":1}}"#
    );
    serde_json::from_str(&route_demo_json(&req).unwrap()).unwrap()
}

#[test]
fn latency_mode_drops_requested_count() {
    let res = route("lat", 4);
    assert_eq!(res["retained"].as_array().unwrap().len(), 4);
    assert_eq!(res["clipped"], false);
    let tokens = res["tokens"].as_array().unwrap();
    assert_eq!(tokens.len(), 12);
    for t in tokens {
        let w: f64 = t["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((w - 1.0).abs() < 1e-9);
    }
    assert_eq!(route("lat", 7)["clipped"], true);
}

#[test]
fn accuracy_mode_marks_important_tokens() {
    let res = route("acc", 0);
    let retained: Vec<u64> = res["retained"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    for t in res["tokens"].as_array().unwrap().iter().filter(|t| t["important"] == true) {
        assert!(retained.contains(&t["original"][0].as_u64().unwrap()));
        assert_eq!(t["assigned"][0], t["original"][0]);
    }
}

#[test]
fn bad_requests_are_errors() {
    assert!(route_demo_json("{}").is_err());
    let req = r#"{"num_experts":4,"top_k":2,"batch_size":3,"mode":"fast","drop_count":1,"confidence_threshold":0.5,"logit_scale":1.0,"seed":0}"#;
    assert!(route_demo_json(req).unwrap_err().contains("unknown mode"));
}

#[test]
fn curves_cover_every_expert_count() {
    let res: Value = serde_json::from_str(&latency_curves_json(r#"{"batch_sizes":[1,8,64]}"#).unwrap()).unwrap();
    let series = res["series"].as_array().unwrap();
    assert_eq!(series.len(), 8);
    let full = &series[7]["speedup"];
    assert!(full.as_array().unwrap().iter().all(|v| (v.as_f64().unwrap() - 1.0).abs() < 1e-12));
    assert!(res["max_mlp_error"].as_f64().unwrap() < 0.15);
}

#[test]
fn saturation_curve_is_monotone() {
    let res: Value = serde_json::from_str(&saturation_curve_json(8, 2, 32).unwrap()).unwrap();
    let e: Vec<f64> = res["expected_active"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(e.len(), 32);
    assert!(e.windows(2).all(|w| w[1] >= w[0]));
    assert!((e[0] - 2.0).abs() < 1e-12);
    assert!(saturation_curve_json(2, 3, 4).is_err());
}
