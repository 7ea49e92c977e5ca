use crate::dataset::Detection;
use crate::geometry::iou;
use crate::metrics::sort_by_score;

/// Class-agnostic greedy NMS. Output is score-sorted; equal scores keep
/// input order.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    sort_by_score(&mut detections);
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}
