//! Anchor (or region) to ground-truth assignment.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::boxcoder::encode_box;
use crate::error::Result;
use crate::geometry::{iou, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Each truth claims its best anchor even below `pos_iou`.
    pub force_best: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            neg_iou: 0.4,
            force_best: true,
        }
    }
}

pub const FOREGROUND: i8 = 1;
pub const BACKGROUND: i8 = 0;
pub const IGNORE: i8 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    /// Matched truth index for foreground anchors.
    pub matched: Vec<Option<usize>>,
    /// [`FOREGROUND`], [`BACKGROUND`] or [`IGNORE`].
    pub labels: Vec<i8>,
    /// Zero for anything that is not foreground.
    pub regression: Vec<[f64; 4]>,
    /// Object-type label, present exactly where the anchor is foreground.
    pub type_labels: Vec<Option<usize>>,
}

impl TargetAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == FOREGROUND)
            .map(|(i, _)| i)
    }

    pub fn num_foreground(&self) -> usize {
        self.foreground().count()
    }
}

fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Thresholded best-truth assignment plus the forced best-anchor rule.
/// Forced claims are ranked by IoU, then center distance, then index; when
/// two truths force the same anchor the higher IoU wins, earlier truth on ties.
pub fn assign_targets(
    anchors: &[BoundingBox],
    truths: &[BoundingBox],
    truth_types: &[usize],
    cfg: &AssignConfig,
) -> Result<TargetAssignment> {
    assert_eq!(truths.len(), truth_types.len());
    let n = anchors.len();
    let mut matched = vec![None; n];
    let mut labels = vec![BACKGROUND; n];
    let mut best_iou = vec![0.0f64; n];
    if !truths.is_empty() {
        for (ai, a) in anchors.iter().enumerate() {
            let mut best = (0usize, -1.0f64);
            for (ti, t) in truths.iter().enumerate() {
                let v = iou(a, t);
                if v > best.1 {
                    best = (ti, v);
                }
            }
            best_iou[ai] = best.1;
            if best.1 >= cfg.pos_iou {
                labels[ai] = FOREGROUND;
                matched[ai] = Some(best.0);
            } else if best.1 >= cfg.neg_iou {
                labels[ai] = IGNORE;
            }
        }
        if cfg.force_best && n > 0 {
            let mut forced: Vec<Option<f64>> = vec![None; n];
            for (ti, t) in truths.iter().enumerate() {
                let mut best = 0usize;
                for ai in 1..n {
                    let (va, vb) = (iou(&anchors[ai], t), iou(&anchors[best], t));
                    if va > vb
                        || (va == vb
                            && center_distance(&anchors[ai], t)
                                < center_distance(&anchors[best], t))
                    {
                        best = ai;
                    }
                }
                let v = iou(&anchors[best], t);
                if forced[best].is_none_or(|prev| v > prev) {
                    forced[best] = Some(v);
                    labels[best] = FOREGROUND;
                    matched[best] = Some(ti);
                }
            }
        }
    }
    let mut regression = vec![[0.0; 4]; n];
    let mut type_labels = vec![None; n];
    for ai in 0..n {
        if let Some(ti) = matched[ai] {
            regression[ai] = encode_box(&anchors[ai], &truths[ti])?;
            type_labels[ai] = Some(truth_types[ti]);
        }
    }
    Ok(TargetAssignment {
        matched,
        labels,
        regression,
        type_labels,
    })
}

/// Picks which anchors contribute to the objectness loss: every foreground
/// anchor plus a random subset of background ones, at most
/// `neg_per_pos` per foreground but never fewer than `min_negatives`.
pub fn sample_for_loss<R: Rng + ?Sized>(
    assignment: &TargetAssignment,
    neg_per_pos: usize,
    min_negatives: usize,
    rng: &mut R,
) -> Vec<bool> {
    let mut mask: Vec<bool> = assignment.labels.iter().map(|&l| l == FOREGROUND).collect();
    let negatives: Vec<usize> = assignment
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == BACKGROUND)
        .map(|(i, _)| i)
        .collect();
    let want = (assignment.num_foreground() * neg_per_pos)
        .max(min_negatives)
        .min(negatives.len());
    for i in sample(rng, negatives.len(), want).into_iter() {
        mask[negatives[i]] = true;
    }
    mask
}
