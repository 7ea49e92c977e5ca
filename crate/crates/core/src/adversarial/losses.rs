//! Scalar losses over row batches, each returning its value and the
//! gradient with respect to its first argument.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::detector::model::softmax_rows;

/// Mean categorical cross-entropy. Zero rows give loss 0.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len());
    if n == 0 {
        return (0.0, Array2::zeros(logits.dim()));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n as f64);
    (loss / n as f64, grad)
}

/// Mean over rows of `Σ p ln p` (the negative entropy of the softmax), in
/// `[-ln C, 0]`.
pub fn negative_entropy(logits: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    if n == 0 {
        return (0.0, Array2::zeros(logits.dim()));
    }
    let p = softmax_rows(logits);
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (i, row) in p.rows().into_iter().enumerate() {
        let logp: Vec<f64> = row
            .iter()
            .map(|&v| if v > 0.0 { v.ln() } else { 0.0 })
            .collect();
        let neg_h: f64 = row.iter().zip(&logp).map(|(&v, &l)| v * l).sum();
        total += neg_h;
        for (j, (&pj, &lj)) in row.iter().zip(&logp).enumerate() {
            grad[[i, j]] = pj * (lj - neg_h) / n as f64;
        }
    }
    (total / n as f64, grad)
}

pub fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Smooth L1 summed over the four offsets, averaged over rows.
pub fn smooth_l1(pred: ArrayView2<f64>, targets: &[[f64; 4]]) -> (f64, Array2<f64>) {
    let n = pred.nrows();
    assert_eq!(n, targets.len());
    let mut grad = Array2::zeros(pred.dim());
    if n == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        for j in 0..4 {
            let d = pred[[i, j]] - t[j];
            total += smooth_l1_scalar(d);
            grad[[i, j]] = if d.abs() < 1.0 { d } else { d.signum() } / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// Discriminator cross-entropy over foreground embeddings. `None` when there
/// are no foreground rows: the update is skipped.
pub fn discriminator_loss(
    logits: ArrayView2<f64>,
    type_labels: &[usize],
) -> Option<(f64, Array2<f64>)> {
    if logits.nrows() == 0 {
        None
    } else {
        Some(softmax_cross_entropy(logits, type_labels))
    }
}

/// The adversarial term added to the model objective: negative entropy of
/// the discriminator's predictions. Minimizing it pushes them to uniform.
pub fn entropy_penalty(logits: ArrayView2<f64>) -> (f64, Array2<f64>) {
    negative_entropy(logits)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objectness: f64,
    pub regression: f64,
    /// Negative entropy, before the `alpha` weight.
    pub entropy: f64,
    pub alpha: f64,
    pub total: f64,
    pub foreground: usize,
}

impl LossBreakdown {
    pub fn new(
        objectness: f64,
        regression: f64,
        entropy: f64,
        alpha: f64,
        foreground: usize,
    ) -> Self {
        Self {
            objectness,
            regression,
            entropy,
            alpha,
            total: objectness + regression + alpha * entropy,
            foreground,
        }
    }
}

/// Gradients of [`model_loss`] with respect to each of its inputs.
#[derive(Debug, Clone)]
pub struct ModelLossGrads {
    pub logits: Array2<f64>,
    pub offsets: Array2<f64>,
    pub disc_logits: Vec<Array2<f64>>,
}

/// Object-or-not (or class-aware) cross-entropy over the sampled rows,
/// smooth L1 over foreground rows and `alpha` times the negative entropy of
/// each discriminator, averaged over discriminators that saw any rows.
///
/// `cls_labels[i]` is the classification target of row `i` (`None` for rows
/// outside the loss sample); `reg_targets[i]` is set for foreground rows.
pub fn model_loss(
    logits: ArrayView2<f64>,
    offsets: ArrayView2<f64>,
    cls_labels: &[Option<usize>],
    reg_targets: &[Option<[f64; 4]>],
    disc_logits: &[ArrayView2<f64>],
    alpha: f64,
) -> (LossBreakdown, ModelLossGrads) {
    let rows: Vec<usize> = (0..cls_labels.len())
        .filter(|&i| cls_labels[i].is_some())
        .collect();
    let sel = logits.select(ndarray::Axis(0), &rows);
    let labels: Vec<usize> = rows
        .iter()
        .map(|&i| cls_labels[i].expect("filtered"))
        .collect();
    let (ce, gsel) = softmax_cross_entropy(sel.view(), &labels);
    let mut glogits = Array2::zeros(logits.dim());
    for (r, &i) in rows.iter().enumerate() {
        glogits.row_mut(i).assign(&gsel.row(r));
    }

    let fg: Vec<usize> = (0..reg_targets.len())
        .filter(|&i| reg_targets[i].is_some())
        .collect();
    let osel = offsets.select(ndarray::Axis(0), &fg);
    let targets: Vec<[f64; 4]> = fg
        .iter()
        .map(|&i| reg_targets[i].expect("filtered"))
        .collect();
    let (l1, gosel) = smooth_l1(osel.view(), &targets);
    let mut goffsets = Array2::zeros(offsets.dim());
    for (r, &i) in fg.iter().enumerate() {
        goffsets.row_mut(i).assign(&gosel.row(r));
    }

    let active = disc_logits.iter().filter(|d| d.nrows() > 0).count();
    let mut entropy = 0.0;
    let mut gdisc = Vec::with_capacity(disc_logits.len());
    for d in disc_logits {
        let (v, mut g) = entropy_penalty(*d);
        if d.nrows() > 0 {
            entropy += v / active as f64;
            g.mapv_inplace(|x| x * alpha / active as f64);
        }
        gdisc.push(g);
    }
    (
        LossBreakdown::new(ce, l1, entropy, alpha, fg.len()),
        ModelLossGrads {
            logits: glogits,
            offsets: goffsets,
            disc_logits: gdisc,
        },
    )
}
