//! Per-image objectives wiring detector outputs, targets and
//! discriminators together, with their gradients.
//!
//! All randomness (background sampling, proposal sampling) is resolved into
//! a [`StepPlan`] before the loss is evaluated, so the loss is a
//! deterministic function of the weights for a fixed plan.

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::losses::{discriminator_loss, model_loss, LossBreakdown};
use crate::detector::assign::{
    assign_targets, sample_for_loss, AssignConfig, TargetAssignment, BACKGROUND, FOREGROUND,
};
use crate::detector::model::{
    DetectorModel, DetectorWeights, ForwardPass, HeadType, Mode, OutputGrads, RoiGrads, RoiPass,
};
use crate::detector::nn::{Mlp, MlpCache, Parameters};
use crate::error::Result;
use crate::geometry::BoundingBox;

/// One object-type classifier per attachment point: one per feature level
/// in one-stage mode, one on the region embedding in two-stage mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminators {
    pub nets: Vec<Mlp>,
}

impl Discriminators {
    pub const DEFAULT_HIDDEN: usize = 128;

    pub fn new(embedding_dims: &[usize], num_types: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            nets: embedding_dims
                .iter()
                .map(|&d| Mlp::new(&mut rng, &[d, hidden, hidden, num_types]))
                .collect(),
        }
    }

    pub fn for_model(model: &DetectorModel, hidden: usize, seed: u64) -> Self {
        Self::new(
            &model.config.embedding_dims(),
            model.config.num_types.max(1),
            hidden,
            seed,
        )
    }

    pub fn num_types(&self) -> usize {
        self.nets.first().map(Mlp::output_dim).unwrap_or(0)
    }
}

impl Parameters for Discriminators {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, n) in self.nets.iter().enumerate() {
            n.visit(&format!("{prefix}disc.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for n in &mut self.nets {
            n.visit_mut(f);
        }
    }
}

/// Training image with its targets. Type labels index the training classes.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image: Array3<f64>,
    pub truths: Vec<BoundingBox>,
    pub types: Vec<usize>,
    /// Anchor assignment for the dense heads; fixed for a given image size.
    pub anchor_targets: TargetAssignment,
}

impl ImageSample {
    pub fn new(
        model: &DetectorModel,
        image: Array3<f64>,
        truths: Vec<BoundingBox>,
        types: Vec<usize>,
    ) -> Result<Self> {
        let anchor_targets = assign_targets(
            &model.anchors.all(),
            &truths,
            &types,
            &AssignConfig::default(),
        )?;
        Ok(Self {
            image,
            truths,
            types,
            anchor_targets,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub neg_per_pos: usize,
    pub min_negatives: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            neg_per_pos: 3,
            min_negatives: 16,
        }
    }
}

/// Sampled regions of a two-stage step.
#[derive(Debug, Clone)]
pub struct RegionPlan {
    pub boxes: Vec<BoundingBox>,
    pub labels: Vec<i8>,
    pub regression: Vec<[f64; 4]>,
    pub types: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct StepPlan {
    /// Which anchors enter the dense classification loss.
    pub anchor_mask: Vec<bool>,
    pub regions: Option<RegionPlan>,
}

/// Resolves the random choices of one step for one image.
pub fn make_plan<R: Rng + ?Sized>(
    model: &DetectorModel,
    sample_: &ImageSample,
    pass: &ForwardPass,
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<StepPlan> {
    let anchor_mask = sample_for_loss(
        &sample_.anchor_targets,
        sampling.neg_per_pos,
        sampling.min_negatives,
        rng,
    );
    let regions = match model.config.mode {
        Mode::OneStage => None,
        Mode::TwoStage => {
            let mut boxes = model.proposals(pass, model.config.roi.train_proposals);
            boxes.extend(sample_.truths.iter().copied());
            let cfg = AssignConfig {
                pos_iou: 0.5,
                neg_iou: 0.5,
                force_best: false,
            };
            let a = assign_targets(&boxes, &sample_.truths, &sample_.types, &cfg)?;
            let fg: Vec<usize> = a.foreground().collect();
            let bg: Vec<usize> = (0..a.len())
                .filter(|&i| a.labels[i] == BACKGROUND)
                .collect();
            let total = model.config.roi.regions_per_image;
            let max_fg =
                ((total as f64 * model.config.roi.foreground_fraction).round() as usize).max(1);
            let n_fg = fg.len().min(max_fg);
            let n_bg = bg.len().min(total.saturating_sub(n_fg));
            let mut chosen: Vec<usize> = sample(rng, fg.len(), n_fg)
                .into_iter()
                .map(|i| fg[i])
                .collect();
            chosen.extend(sample(rng, bg.len(), n_bg).into_iter().map(|i| bg[i]));
            chosen.sort_unstable();
            Some(RegionPlan {
                boxes: chosen.iter().map(|&i| boxes[i]).collect(),
                labels: chosen.iter().map(|&i| a.labels[i]).collect(),
                regression: chosen.iter().map(|&i| a.regression[i]).collect(),
                types: chosen.iter().map(|&i| a.type_labels[i]).collect(),
            })
        }
    };
    Ok(StepPlan {
        anchor_mask,
        regions,
    })
}

/// Rows (and type labels) a discriminator sees at one attachment point.
#[derive(Debug, Clone)]
struct AttachmentRows {
    /// Row indices into the attachment's embedding matrix.
    rows: Vec<usize>,
    /// Type label per row; `None` for background rows (entropy only).
    types: Vec<Option<usize>>,
}

fn cls_label(head: HeadType, label: i8, ty: Option<usize>) -> Option<usize> {
    match label {
        FOREGROUND => Some(match head {
            HeadType::ClassAgnostic => 1,
            HeadType::ClassAware => ty.expect("foreground has a type") + 1,
        }),
        BACKGROUND => Some(0),
        _ => None,
    }
}

fn attachment_rows(
    model: &DetectorModel,
    sample_: &ImageSample,
    plan: &StepPlan,
    foreground_only: bool,
) -> Vec<AttachmentRows> {
    match &plan.regions {
        None => {
            let offsets = model.anchors.level_offsets();
            let t = &sample_.anchor_targets;
            model
                .anchors
                .levels
                .iter()
                .enumerate()
                .map(|(l, level)| {
                    let mut rows = Vec::new();
                    let mut types = Vec::new();
                    for i in 0..level.anchors.len() {
                        let g = offsets[l] + i;
                        let fg = t.labels[g] == FOREGROUND;
                        if fg || (!foreground_only && plan.anchor_mask[g]) {
                            rows.push(level.cell_of(i));
                            types.push(t.type_labels[g]);
                        }
                    }
                    AttachmentRows { rows, types }
                })
                .collect()
        }
        Some(r) => {
            let mut rows = Vec::new();
            let mut types = Vec::new();
            for (i, &label) in r.labels.iter().enumerate() {
                if label == FOREGROUND || !foreground_only {
                    rows.push(i);
                    types.push(r.types[i]);
                }
            }
            vec![AttachmentRows { rows, types }]
        }
    }
}

fn attachment_embeddings<'a>(
    pass: &'a ForwardPass,
    roi: Option<&'a RoiPass>,
) -> Vec<&'a Array2<f64>> {
    match roi {
        Some(r) => vec![&r.embeddings],
        None => pass.embeddings.iter().collect(),
    }
}

/// Result of evaluating the model objective on one image.
pub struct ModelObjective {
    pub loss: LossBreakdown,
    pub grads: Option<DetectorWeights>,
}

/// Detection loss plus `alpha` times the discriminators' negative entropy.
/// Discriminator weights are read but never receive gradient.
pub fn model_objective(
    model: &DetectorModel,
    discs: Option<&Discriminators>,
    sample_: &ImageSample,
    plan: &StepPlan,
    alpha: f64,
    foreground_only: bool,
    with_grads: bool,
) -> Result<ModelObjective> {
    let pass = model.forward(&sample_.image)?;
    model_objective_with_pass(
        model,
        discs,
        sample_,
        plan,
        &pass,
        alpha,
        foreground_only,
        with_grads,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn model_objective_with_pass(
    model: &DetectorModel,
    discs: Option<&Discriminators>,
    sample_: &ImageSample,
    plan: &StepPlan,
    pass: &ForwardPass,
    alpha: f64,
    foreground_only: bool,
    with_grads: bool,
) -> Result<ModelObjective> {
    let head = model.config.head_type;
    let dense_head = if plan.regions.is_some() {
        HeadType::ClassAgnostic
    } else {
        head
    };
    let t = &sample_.anchor_targets;
    let dense_labels: Vec<Option<usize>> = (0..t.len())
        .map(|i| {
            if plan.anchor_mask[i] {
                cls_label(dense_head, t.labels[i], t.type_labels[i])
            } else {
                None
            }
        })
        .collect();
    let dense_targets: Vec<Option<[f64; 4]>> = (0..t.len())
        .map(|i| (t.labels[i] == FOREGROUND).then_some(t.regression[i]))
        .collect();

    let roi_pass = match &plan.regions {
        Some(r) if !r.boxes.is_empty() => Some(model.roi_forward(pass, &r.boxes)?),
        _ => None,
    };

    // Discriminator forward on the attachment embeddings.
    let rows = attachment_rows(model, sample_, plan, foreground_only);
    let embs = attachment_embeddings(pass, roi_pass.as_ref());
    let mut disc_inputs: Vec<Array2<f64>> = Vec::new();
    let mut disc_out: Vec<(Array2<f64>, MlpCache)> = Vec::new();
    if let Some(d) = discs {
        for (k, net) in d.nets.iter().enumerate() {
            let x = match (rows.get(k), embs.get(k)) {
                (Some(r), Some(e)) => e.select(ndarray::Axis(0), &r.rows),
                _ => Array2::zeros((0, net.input_dim())),
            };
            disc_out.push(net.forward(x.view()));
            disc_inputs.push(x);
        }
    }
    let disc_views: Vec<_> = disc_out.iter().map(|(o, _)| o.view()).collect();

    let all_logits = pass.all_logits();
    let all_offsets = pass.all_offsets();
    let (dense, dense_grads) = if plan.regions.is_some() {
        model_loss(
            all_logits.view(),
            all_offsets.view(),
            &dense_labels,
            &dense_targets,
            &[],
            alpha,
        )
    } else {
        model_loss(
            all_logits.view(),
            all_offsets.view(),
            &dense_labels,
            &dense_targets,
            &disc_views,
            alpha,
        )
    };

    let mut loss = dense;
    let mut roi_grads = None;
    let mut entropy_grads = dense_grads.disc_logits.clone();
    if let (Some(r), Some(rp)) = (&plan.regions, &roi_pass) {
        let labels: Vec<Option<usize>> = (0..r.labels.len())
            .map(|i| cls_label(head, r.labels[i], r.types[i]))
            .collect();
        let targets: Vec<Option<[f64; 4]>> = (0..r.labels.len())
            .map(|i| (r.labels[i] == FOREGROUND).then_some(r.regression[i]))
            .collect();
        let (region, g) = model_loss(
            rp.logits.view(),
            rp.offsets.view(),
            &labels,
            &targets,
            &disc_views,
            alpha,
        );
        loss = LossBreakdown::new(
            dense.objectness + region.objectness,
            dense.regression + region.regression,
            region.entropy,
            alpha,
            dense.foreground + region.foreground,
        );
        entropy_grads = g.disc_logits;
        roi_grads = Some(RoiGrads {
            logits: g.logits,
            offsets: g.offsets,
            embeddings: None,
        });
    }

    if !with_grads {
        return Ok(ModelObjective { loss, grads: None });
    }

    let mut out = OutputGrads::from_stacked(pass, &dense_grads.logits, &dense_grads.offsets);
    out.roi = roi_grads;
    if let Some(d) = discs {
        for (k, net) in d.nets.iter().enumerate() {
            let (Some(r), Some((_, cache))) = (rows.get(k), disc_out.get(k)) else {
                continue;
            };
            if r.rows.is_empty() {
                continue;
            }
            let gx = net.backward(cache, entropy_grads[k].view(), None);
            let emb_dim = embs[k].dim();
            let mut g = Array2::<f64>::zeros(emb_dim);
            for (row, &target) in r.rows.iter().enumerate() {
                let mut dst = g.row_mut(target);
                dst += &gx.row(row);
            }
            match out.roi.as_mut() {
                Some(rg) => rg.embeddings = Some(g),
                None => out.embeddings[k] = Some(g),
            }
        }
    }
    let grads = model.backward(pass, roi_pass.as_ref(), &out);
    Ok(ModelObjective {
        loss,
        grads: Some(grads),
    })
}

/// Mean discriminator cross-entropy over attachment points that saw
/// foreground rows. Upstream embeddings are constants here.
pub struct DiscriminatorObjective {
    /// `None` when no attachment point had a foreground row.
    pub loss: Option<f64>,
    pub grads: Option<Discriminators>,
}

pub fn discriminator_objective(
    model: &DetectorModel,
    discs: &Discriminators,
    sample_: &ImageSample,
    plan: &StepPlan,
    with_grads: bool,
) -> Result<DiscriminatorObjective> {
    let pass = model.forward(&sample_.image)?;
    discriminator_objective_with_pass(model, discs, sample_, plan, &pass, with_grads)
}

pub fn discriminator_objective_with_pass(
    model: &DetectorModel,
    discs: &Discriminators,
    sample_: &ImageSample,
    plan: &StepPlan,
    pass: &ForwardPass,
    with_grads: bool,
) -> Result<DiscriminatorObjective> {
    let roi_pass = match &plan.regions {
        Some(r) if !r.boxes.is_empty() => Some(model.roi_forward(pass, &r.boxes)?),
        _ => None,
    };
    let rows = attachment_rows(model, sample_, plan, true);
    let embs = attachment_embeddings(pass, roi_pass.as_ref());
    let mut grads = with_grads.then(|| discs.zeros_like());
    let mut parts = Vec::new();
    for (k, net) in discs.nets.iter().enumerate() {
        let (Some(r), Some(e)) = (rows.get(k), embs.get(k)) else {
            continue;
        };
        let x = e.select(ndarray::Axis(0), &r.rows);
        let labels: Vec<usize> = r
            .types
            .iter()
            .map(|t| t.expect("foreground rows carry a type"))
            .collect();
        let (logits, cache) = net.forward(x.view());
        if let Some((v, g)) = discriminator_loss(logits.view(), &labels) {
            parts.push((k, v, g, cache));
        }
    }
    if parts.is_empty() {
        return Ok(DiscriminatorObjective {
            loss: None,
            grads: None,
        });
    }
    let n = parts.len() as f64;
    let loss = parts.iter().map(|p| p.1).sum::<f64>() / n;
    if let Some(gd) = grads.as_mut() {
        for (k, _, g, cache) in &parts {
            let scaled = g / n;
            discs.nets[*k].backward(cache, scaled.view(), Some(&mut gd.nets[*k]));
        }
    }
    Ok(DiscriminatorObjective {
        loss: Some(loss),
        grads,
    })
}
