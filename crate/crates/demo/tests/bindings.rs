use agnostic_det_demo::{anchor_demo, ar_demo, nms_demo};
use serde_json::Value;

fn json(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn nms_keeps_the_best_of_overlapping_boxes() {
    let boxes = r#"[
        {"box": [0, 0, 10, 10], "score": 0.6},
        {"box": [1, 1, 11, 11], "score": 0.9},
        {"box": [30, 30, 40, 40], "score": 0.5}
    ]"#;
    let out = json(nms_demo(boxes, 0.5).unwrap());
    assert_eq!(out["kept"], serde_json::json!([1, 2]));
    assert_eq!(out["iou"][0][0], 1.0);
    assert_eq!(out["iou"][0][2], 0.0);
}

#[test]
fn anchors_cover_the_grid() {
    let out = json(anchor_demo(64, 32, 16, "16, 32", "1,2").unwrap());
    assert_eq!(out["grid_w"], 4);
    assert_eq!(out["grid_h"], 2);
    assert_eq!(out["per_cell"], 4);
    assert_eq!(out["boxes"].as_array().unwrap().len(), 32);
}

#[test]
fn ar_curve_and_harmonic_mean() {
    let truths = r#"[
        {"box": [0, 0, 10, 10], "seen": true},
        {"box": [20, 20, 30, 30], "seen": false},
        {"box": [40, 40, 50, 50], "seen": false}
    ]"#;
    let dets = r#"[
        {"box": [0, 0, 10, 10], "score": 0.9},
        {"box": [20, 20, 30, 31], "score": 0.8},
        {"box": [70, 70, 80, 80], "score": 0.7}
    ]"#;
    let out = json(ar_demo(truths, dets, "1,2,3", 0.5).unwrap());
    assert_eq!(out["seen"], serde_json::json!([1.0, 1.0, 1.0]));
    assert_eq!(out["unseen"], serde_json::json!([0.0, 0.5, 0.5]));
    let hm = out["harmonic_mean"].as_array().unwrap();
    assert_eq!(hm[0], 0.0);
    assert!((hm[1].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn bad_input_is_reported() {
    assert!(nms_demo("not json", 0.5).unwrap_err().contains("boxes"));
    assert!(anchor_demo(64, 64, 16, "x", "1").is_err());
    assert!(ar_demo("[]", "[]", "", 0.5).is_err());
}
