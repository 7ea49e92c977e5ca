//! Class-agnostic recall (AR@k) and downstream classification accuracy.
//!
//! Matching is greedy in score order, COCO style: each detection claims the
//! still-unmatched ground truth with the highest IoU at or above the
//! threshold. Detection class ids never take part in matching.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, Detection, ImageId};
use crate::error::{Error, Result};
use crate::geometry::{iou, size_bucket, BoundingBox, SizeBucket};
use crate::protocol::ClassSplit;

pub const DEFAULT_K_VALUES: [usize; 8] = [3, 5, 10, 20, 30, 100, 300, 1000];
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_M_VALUES: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArCurve {
    pub k_values: Vec<usize>,
    pub recalls: Vec<f64>,
    pub iou_threshold: f64,
    /// Ground-truth objects in the evaluated (filtered) set.
    #[serde(default)]
    pub num_truths: usize,
    /// Set when the filtered truth set was empty and every recall is 0 by convention.
    #[serde(default)]
    pub empty_truth_set: bool,
}

impl ArCurve {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k_values
            .iter()
            .position(|&x| x == k)
            .map(|i| self.recalls[i])
    }

    pub fn last(&self) -> f64 {
        self.recalls.last().copied().unwrap_or(0.0)
    }

    pub fn top_k(&self) -> usize {
        self.k_values.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub accuracy_at_m: BTreeMap<usize, f64>,
    pub bo_accuracy: f64,
    /// Accuracy when the classifier sees the whole uncropped image.
    #[serde(default)]
    pub uncropped_accuracy: Option<f64>,
    /// Accuracy on ground-truth crops; upper bound for BO and Acc@1.
    #[serde(default)]
    pub ground_truth_crop_accuracy: Option<f64>,
    #[serde(default)]
    pub num_images: usize,
    #[serde(default)]
    pub failed_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub name: String,
    pub macro_seen: ArCurve,
    pub macro_unseen: ArCurve,
    pub harmonic_mean: ArCurve,
    pub per_class: BTreeMap<String, ArCurve>,
    pub per_size: BTreeMap<String, ArCurve>,
    pub downstream: Option<DownstreamReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_dataset: Option<ArCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<ClassSplit>,
}

/// Greedy score-ordered one-to-one matching on a single image.
///
/// `detections` must already be sorted by descending score. Returns
/// `(detection index, truth index)` pairs in detection order.
pub fn match_greedy(
    detections: &[Detection],
    truths: &[BoundingBox],
    iou_threshold: f64,
) -> Result<Vec<(usize, usize)>> {
    if detections.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::InvalidArgument(
            "detections must be sorted by descending score".into(),
        ));
    }
    let boxes: Vec<BoundingBox> = detections.iter().map(|d| d.bbox).collect();
    Ok(greedy_pairs(&boxes, truths, iou_threshold))
}

fn greedy_pairs(
    detections: &[BoundingBox],
    truths: &[BoundingBox],
    iou_threshold: f64,
) -> Vec<(usize, usize)> {
    let mut taken = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for (di, det) in detections.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ti, truth) in truths.iter().enumerate() {
            if taken[ti] {
                continue;
            }
            let v = iou(det, truth);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((ti, v));
            }
        }
        if let Some((ti, _)) = best {
            taken[ti] = true;
            pairs.push((di, ti));
            if pairs.len() == truths.len() {
                break;
            }
        }
    }
    pairs
}

/// Stable descending sort by score; equal scores keep input order.
pub fn sort_by_score(detections: &mut [Detection]) {
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Truth boxes of one image after crowd, class and size filtering.
fn filtered_truths(
    truths: &DatasetIndex,
    class_filter: Option<&BTreeSet<usize>>,
    size_filter: Option<SizeBucket>,
) -> BTreeMap<ImageId, Vec<BoundingBox>> {
    let mut per_image: BTreeMap<ImageId, Vec<BoundingBox>> =
        truths.images.iter().map(|i| (i.id, Vec::new())).collect();
    for ann in &truths.annotations {
        if ann.is_crowd {
            continue;
        }
        if class_filter.is_some_and(|f| !f.contains(&ann.class_id)) {
            continue;
        }
        if size_filter.is_some_and(|s| size_bucket(&ann.bbox) != s) {
            continue;
        }
        per_image.entry(ann.image_id).or_default().push(ann.bbox);
    }
    per_image
}

/// Average recall at each `k` over a dataset.
///
/// Only ground truth is filtered; every detection competes for every
/// remaining truth regardless of its class id.
pub fn ar_at_k(
    predictions: &BTreeMap<ImageId, Vec<Detection>>,
    truths: &DatasetIndex,
    k_values: &[usize],
    iou_threshold: f64,
    class_filter: Option<&BTreeSet<usize>>,
    size_filter: Option<SizeBucket>,
) -> ArCurve {
    let per_image = filtered_truths(truths, class_filter, size_filter);
    let max_k = k_values.iter().copied().max().unwrap_or(0);
    let mut hits_at_rank = vec![0usize; max_k];
    let mut total = 0usize;
    for (image_id, boxes) in &per_image {
        total += boxes.len();
        if boxes.is_empty() {
            continue;
        }
        let Some(dets) = predictions.get(image_id) else {
            continue;
        };
        let mut dets = dets.clone();
        sort_by_score(&mut dets);
        dets.truncate(max_k);
        let det_boxes: Vec<BoundingBox> = dets.iter().map(|d| d.bbox).collect();
        // Greedy matching is sequential, so the matches among the first k
        // detections do not depend on anything ranked below k.
        for (rank, _) in greedy_pairs(&det_boxes, boxes, iou_threshold) {
            hits_at_rank[rank] += 1;
        }
    }
    let recalls = k_values
        .iter()
        .map(|&k| {
            if total == 0 {
                0.0
            } else {
                hits_at_rank[..k].iter().sum::<usize>() as f64 / total as f64
            }
        })
        .collect();
    ArCurve {
        k_values: k_values.to_vec(),
        recalls,
        iou_threshold,
        num_truths: total,
        empty_truth_set: total == 0,
    }
}

pub fn harmonic_mean_value(s: f64, u: f64) -> f64 {
    if s + u <= 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

pub fn harmonic_mean(seen: &ArCurve, unseen: &ArCurve) -> Result<ArCurve> {
    if seen.k_values != unseen.k_values {
        return Err(Error::InvalidArgument(format!(
            "k grids differ: {:?} vs {:?}",
            seen.k_values, unseen.k_values
        )));
    }
    Ok(ArCurve {
        k_values: seen.k_values.clone(),
        recalls: seen
            .recalls
            .iter()
            .zip(&unseen.recalls)
            .map(|(&s, &u)| harmonic_mean_value(s, u))
            .collect(),
        iou_threshold: seen.iou_threshold,
        num_truths: seen.num_truths + unseen.num_truths,
        empty_truth_set: seen.empty_truth_set && unseen.empty_truth_set,
    })
}

/// A classifier verdict on one crop, `rank` counting from 1 in score order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPrediction {
    pub label: usize,
    pub rank: usize,
}

/// Fraction of images whose top-`m` crops contain at least one correct
/// prediction. Images with no crops count as wrong.
pub fn accuracy_at_m(
    crop_predictions: &BTreeMap<ImageId, Vec<CropPrediction>>,
    truths: &BTreeMap<ImageId, usize>,
    m: usize,
) -> f64 {
    if truths.is_empty() {
        return 0.0;
    }
    let correct = truths
        .iter()
        .filter(|(id, &label)| {
            crop_predictions.get(id).is_some_and(|preds| {
                preds
                    .iter()
                    .any(|p| p.rank >= 1 && p.rank <= m && p.label == label)
            })
        })
        .count();
    correct as f64 / truths.len() as f64
}

/// Index of the detection with highest IoU against `truth`; ties go to the
/// higher score, then to the earlier detection.
pub fn best_overlap_select(detections: &[Detection], truth: &BoundingBox) -> Result<usize> {
    if detections.is_empty() {
        return Err(Error::InvalidArgument(
            "best-overlap selection over an empty detection list".into(),
        ));
    }
    let mut best = 0;
    let mut best_key = (iou(&detections[0].bbox, truth), detections[0].score);
    for (i, d) in detections.iter().enumerate().skip(1) {
        let key = (iou(&d.bbox, truth), d.score);
        if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 > best_key.1) {
            best = i;
            best_key = key;
        }
    }
    Ok(best)
}
