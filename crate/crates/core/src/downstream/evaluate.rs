//! Accuracy@M, best-overlap accuracy and the reference rows.

use std::collections::BTreeMap;

use image::RgbImage;

use crate::dataset::{DatasetIndex, Detection, ImageId, ImageStore};
use crate::downstream::classifier::{classify_with_retry, ClassifierClient, CropInput};
use crate::downstream::crops::{cut, make_crops, padded_region};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::metrics::{
    accuracy_at_m, best_overlap_select, sort_by_score, CropPrediction, DownstreamReport,
};

/// An evaluation image with its single labelled object.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamImage {
    pub image_id: ImageId,
    pub pixels: RgbImage,
    pub truth_box: BoundingBox,
    pub truth_label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub m_values: Vec<usize>,
    pub padding: f64,
    pub max_attempts: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            m_values: crate::metrics::DEFAULT_M_VALUES.to_vec(),
            padding: 0.0,
            max_attempts: 3,
        }
    }
}

/// One image per record, labelled by its largest non-crowd annotation.
/// Images without annotations are skipped.
pub fn downstream_images(index: &DatasetIndex, store: &ImageStore) -> Result<Vec<DownstreamImage>> {
    let by_image = index.annotations_by_image();
    let mut out = Vec::new();
    for record in &index.images {
        let Some(best) = by_image[&record.id]
            .iter()
            .filter(|a| !a.is_crowd)
            .max_by(|a, b| {
                a.bbox
                    .area()
                    .total_cmp(&b.bbox.area())
                    .then(b.id.cmp(&a.id))
            })
        else {
            continue;
        };
        out.push(DownstreamImage {
            image_id: record.id,
            pixels: store.load(record)?,
            truth_box: best.bbox,
            truth_label: index.vocabulary.names[best.class_id].clone(),
        });
    }
    Ok(out)
}

/// Per-image verdicts, kept for inspection and brute-force checks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageVerdicts {
    /// Correctness of each crop in rank order.
    pub crops: Vec<bool>,
    pub best_overlap: bool,
    pub uncropped: bool,
    pub ground_truth_crop: bool,
    pub failed: bool,
}

fn full_box(img: &RgbImage) -> BoundingBox {
    BoundingBox::new(0.0, 0.0, img.width() as f64, img.height() as f64)
}

fn judge(
    image: &DownstreamImage,
    client: &mut dyn ClassifierClient,
    cfg: &DownstreamConfig,
    dets: &[Detection],
) -> Result<ImageVerdicts> {
    let max_m = cfg.m_values.iter().copied().max().unwrap_or(1);
    let mut ask = |region: BoundingBox, pixels: &RgbImage| -> Result<bool> {
        let input = CropInput {
            image_id: image.image_id,
            region,
            pixels,
        };
        Ok(classify_with_retry(client, &input, cfg.max_attempts)?.label == image.truth_label)
    };
    let mut v = ImageVerdicts::default();
    for (spec, pixels) in make_crops(dets, &image.pixels, max_m, cfg.padding)? {
        v.crops.push(ask(spec.bbox, &pixels)?);
    }
    let (w, h) = image.pixels.dimensions();
    if !dets.is_empty() {
        let best = &dets[best_overlap_select(dets, &image.truth_box)?];
        let crops = make_crops(std::slice::from_ref(best), &image.pixels, 1, cfg.padding)?;
        if let Some((spec, pixels)) = crops.first() {
            v.best_overlap = ask(spec.bbox, pixels)?;
        }
    }
    v.uncropped = ask(full_box(&image.pixels), &image.pixels)?;
    let gt = padded_region(&image.truth_box, cfg.padding, w, h);
    v.ground_truth_crop = ask(gt, &cut(&image.pixels, &gt))?;
    Ok(v)
}

/// Classifies crops of each image's detections and reduces to accuracies.
/// Images whose classifier calls keep failing count as incorrect and are
/// reported in `failed_images`.
pub fn evaluate_downstream(
    images: &[DownstreamImage],
    detections: &BTreeMap<ImageId, Vec<Detection>>,
    client: &mut dyn ClassifierClient,
    cfg: &DownstreamConfig,
) -> Result<(DownstreamReport, BTreeMap<ImageId, ImageVerdicts>)> {
    if cfg.m_values.is_empty() || cfg.m_values.contains(&0) {
        return Err(Error::InvalidArgument(
            "M grid must be non-empty and positive".into(),
        ));
    }
    let mut verdicts = BTreeMap::new();
    for image in images {
        let mut dets = detections.get(&image.image_id).cloned().unwrap_or_default();
        sort_by_score(&mut dets);
        let v = match judge(image, client, cfg, &dets) {
            Ok(v) => v,
            Err(Error::Transport(_)) => ImageVerdicts {
                failed: true,
                ..Default::default()
            },
            Err(e) => return Err(e),
        };
        verdicts.insert(image.image_id, v);
    }
    Ok((reduce(&verdicts, &cfg.m_values), verdicts))
}

/// Accuracies from per-image verdicts; Acc@M goes through `accuracy_at_m`.
pub fn reduce(verdicts: &BTreeMap<ImageId, ImageVerdicts>, m_values: &[usize]) -> DownstreamReport {
    const RIGHT: usize = 1;
    const WRONG: usize = 0;
    let truths: BTreeMap<ImageId, usize> = verdicts.keys().map(|&id| (id, RIGHT)).collect();
    let preds: BTreeMap<ImageId, Vec<CropPrediction>> = verdicts
        .iter()
        .map(|(&id, v)| {
            let p = v
                .crops
                .iter()
                .enumerate()
                .map(|(i, &ok)| CropPrediction {
                    label: if ok { RIGHT } else { WRONG },
                    rank: i + 1,
                })
                .collect();
            (id, p)
        })
        .collect();
    let n = verdicts.len();
    let frac = |f: fn(&ImageVerdicts) -> bool| {
        if n == 0 {
            0.0
        } else {
            verdicts.values().filter(|v| f(v)).count() as f64 / n as f64
        }
    };
    DownstreamReport {
        accuracy_at_m: m_values
            .iter()
            .map(|&m| (m, accuracy_at_m(&preds, &truths, m)))
            .collect(),
        bo_accuracy: frac(|v| v.best_overlap),
        uncropped_accuracy: Some(frac(|v| v.uncropped)),
        ground_truth_crop_accuracy: Some(frac(|v| v.ground_truth_crop)),
        num_images: n,
        failed_images: verdicts.values().filter(|v| v.failed).count(),
    }
}
