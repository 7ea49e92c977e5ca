//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every function takes and returns JSON strings so the page needs no glue
//! beyond the generated `wasm-bindgen` module.

use std::collections::{BTreeMap, BTreeSet};

use agnostic_det::dataset::{Annotation, ClassVocabulary, DatasetIndex, Detection, ImageRecord};
use agnostic_det::detector::anchors::{generate_anchors, LevelConfig};
use agnostic_det::detector::nms::nms;
use agnostic_det::geometry::{iou, BoundingBox};
use agnostic_det::metrics::{ar_at_k, harmonic_mean};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Deserialize)]
struct ScoredBox {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

#[derive(Deserialize)]
struct TruthBox {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    seen: bool,
}

#[derive(Serialize)]
struct NmsResult {
    /// Indices into the input, in score order.
    kept: Vec<usize>,
    iou: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AnchorResult {
    grid_w: usize,
    grid_h: usize,
    per_cell: usize,
    boxes: Vec<[f64; 4]>,
}

#[derive(Serialize)]
struct ArResult {
    k_values: Vec<usize>,
    seen: Vec<f64>,
    unseen: Vec<f64>,
    harmonic_mean: Vec<f64>,
    num_seen: usize,
    num_unseen: usize,
}

fn to_box(b: &[f64; 4]) -> BoundingBox {
    BoundingBox::new(b[0], b[1], b[2], b[3])
}

fn parse<'a, T: Deserialize<'a>>(text: &'a str, what: &str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("bad {what} JSON: {e}"))
}

fn csv_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

/// Greedy NMS over `[{"box": [x0, y0, x1, y1], "score": s}, ...]`.
#[wasm_bindgen]
pub fn nms_demo(boxes_json: &str, iou_threshold: f64) -> Result<String, String> {
    let boxes: Vec<ScoredBox> = parse(boxes_json, "boxes")?;
    // Indices ride along in the image id so kept boxes map back to inputs.
    let dets = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Detection::agnostic(i as u64, to_box(&b.bbox), b.score))
        .collect();
    let kept = nms(dets, iou_threshold, usize::MAX)
        .into_iter()
        .map(|d| d.image_id as usize)
        .collect();
    let matrix = boxes
        .iter()
        .map(|a| {
            boxes
                .iter()
                .map(|b| iou(&to_box(&a.bbox), &to_box(&b.bbox)))
                .collect()
        })
        .collect();
    Ok(serde_json::to_string(&NmsResult { kept, iou: matrix }).expect("plain data"))
}

/// Anchors of one feature level; `sizes` and `ratios` are comma-separated.
#[wasm_bindgen]
pub fn anchor_demo(
    width: usize,
    height: usize,
    stride: usize,
    sizes: &str,
    ratios: &str,
) -> Result<String, String> {
    let level = LevelConfig {
        stride,
        sizes: csv_numbers(sizes)?,
        ratios: csv_numbers(ratios)?,
    };
    let grid =
        generate_anchors(width, height, std::slice::from_ref(&level)).map_err(|e| e.to_string())?;
    let l = &grid.levels[0];
    Ok(serde_json::to_string(&AnchorResult {
        grid_w: l.grid_w,
        grid_h: l.grid_h,
        per_cell: level.anchors_per_cell(),
        boxes: l
            .anchors
            .iter()
            .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
            .collect(),
    })
    .expect("plain data"))
}

/// Seen, unseen and harmonic-mean AR@k for one image.
#[wasm_bindgen]
pub fn ar_demo(
    truths_json: &str,
    detections_json: &str,
    k_values: &str,
    iou_threshold: f64,
) -> Result<String, String> {
    let truths: Vec<TruthBox> = parse(truths_json, "truths")?;
    let dets: Vec<ScoredBox> = parse(detections_json, "detections")?;
    let mut ks: Vec<usize> = csv_numbers(k_values)?
        .into_iter()
        .map(|k| k as usize)
        .filter(|&k| k > 0)
        .collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err("need at least one positive k".into());
    }
    let vocabulary = ClassVocabulary::from_names(&["seen", "unseen"]).map_err(|e| e.to_string())?;
    let index = DatasetIndex {
        images: vec![ImageRecord {
            id: 1,
            width: 1,
            height: 1,
            file_name: String::new(),
        }],
        annotations: truths
            .iter()
            .enumerate()
            .map(|(i, t)| Annotation {
                id: i as u64 + 1,
                image_id: 1,
                bbox: to_box(&t.bbox),
                class_id: usize::from(!t.seen),
                is_crowd: false,
            })
            .collect(),
        vocabulary,
    };
    let preds = BTreeMap::from([(
        1u64,
        dets.iter()
            .map(|d| Detection::agnostic(1, to_box(&d.bbox), d.score))
            .collect(),
    )]);
    let seen = ar_at_k(
        &preds,
        &index,
        &ks,
        iou_threshold,
        Some(&BTreeSet::from([0])),
        None,
    );
    let unseen = ar_at_k(
        &preds,
        &index,
        &ks,
        iou_threshold,
        Some(&BTreeSet::from([1])),
        None,
    );
    let hm = harmonic_mean(&seen, &unseen).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&ArResult {
        k_values: ks,
        num_seen: seen.num_truths,
        num_unseen: unseen.num_truths,
        seen: seen.recalls,
        unseen: unseen.recalls,
        harmonic_mean: hm.recalls,
    })
    .expect("plain data"))
}
