//! Linear type probe on frozen detector embeddings.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};

use crate::adversarial::losses::softmax_cross_entropy;
use crate::adversarial::objective::ImageSample;
use crate::detector::assign::FOREGROUND;
use crate::detector::model::{DetectorModel, Mode};
use crate::error::{Error, Result};

/// Foreground embeddings grouped by attachment point, each row paired with
/// its object type.
pub fn foreground_embeddings(
    model: &DetectorModel,
    sample_: &ImageSample,
) -> Result<Vec<(Array2<f64>, Vec<usize>)>> {
    let pass = model.forward(&sample_.image)?;
    match model.config.mode {
        Mode::TwoStage => {
            if sample_.truths.is_empty() {
                return Ok(vec![(
                    Array2::zeros((0, model.config.roi.hidden)),
                    Vec::new(),
                )]);
            }
            let roi = model.roi_forward(&pass, &sample_.truths)?;
            Ok(vec![(roi.embeddings, sample_.types.clone())])
        }
        Mode::OneStage => {
            let offsets = model.anchors.level_offsets();
            let t = &sample_.anchor_targets;
            let mut out = Vec::new();
            for (l, level) in model.anchors.levels.iter().enumerate() {
                let mut seen = BTreeSet::new();
                let mut rows = Vec::new();
                let mut types = Vec::new();
                for i in 0..level.anchors.len() {
                    let g = offsets[l] + i;
                    let cell = level.cell_of(i);
                    if t.labels[g] == FOREGROUND && seen.insert(cell) {
                        rows.push(cell);
                        types.push(t.type_labels[g].expect("foreground has a type"));
                    }
                }
                out.push((pass.embeddings[l].select(Axis(0), &rows), types));
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            iterations: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Trains a softmax regression per attachment point on the first
/// `train_fraction` of the images and reports pooled held-out accuracy.
pub fn type_probe(
    model: &DetectorModel,
    samples: &[ImageSample],
    num_types: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if num_types < 2 {
        return Err(Error::InvalidArgument(
            "probe needs at least two types".into(),
        ));
    }
    let split = ((samples.len() as f64) * cfg.train_fraction).round() as usize;
    let mut train: Vec<(Vec<Array2<f64>>, Vec<usize>)> = Vec::new();
    let mut test: Vec<(Vec<Array2<f64>>, Vec<usize>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let groups = foreground_embeddings(model, s)?;
        let target = if i < split { &mut train } else { &mut test };
        if target.is_empty() {
            target.extend(groups.iter().map(|_| (Vec::new(), Vec::new())));
        }
        for (k, (x, y)) in groups.into_iter().enumerate() {
            target[k].0.push(x);
            target[k].1.extend(y);
        }
    }
    let (mut correct, mut total, mut train_rows) = (0usize, 0usize, 0usize);
    for (k, (xs, ys)) in train.iter().enumerate() {
        train_rows += ys.len();
        let Some((tx, ty)) = test.get(k) else {
            continue;
        };
        if ys.is_empty() || ty.is_empty() {
            continue;
        }
        let (x, xt) = (stack(xs), stack(tx));
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
        let norm = |m: &Array2<f64>| (m - &mean) / &std;
        let (xn, xtn) = (norm(&x), norm(&xt));
        let mut w = Array2::<f64>::zeros((xn.ncols(), num_types));
        let mut b = Array1::<f64>::zeros(num_types);
        for _ in 0..cfg.iterations {
            let logits = xn.dot(&w) + &b;
            let (_, g) = softmax_cross_entropy(logits.view(), ys);
            let gw = xn.t().dot(&g) + &(&w * cfg.l2);
            let gb = g.sum_axis(Axis(0));
            w.scaled_add(-cfg.lr, &gw);
            b.scaled_add(-cfg.lr, &gb);
        }
        let logits = xtn.dot(&w) + &b;
        for (row, &label) in logits.rows().into_iter().zip(ty) {
            let pred = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                )
                .0;
            correct += usize::from(pred == label);
        }
        total += ty.len();
    }
    if total == 0 {
        return Err(Error::Data(
            "probe has no held-out foreground embeddings".into(),
        ));
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / total as f64,
        train_rows,
        test_rows: total,
    })
}

fn stack(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}
