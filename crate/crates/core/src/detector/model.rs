//! Toy anchor-based detectors.
//!
//! One-stage (SSD-like): a small convolutional backbone exposes several
//! feature levels; at every level a per-cell linear classifier and box
//! regressor read the cell's feature vector, one output group per anchor.
//! Two-stage (Faster R-CNN-like): the same per-level machinery acts as the
//! proposal network (always two logits), and a region head classifies and
//! refines crop-pooled level-0 features of the proposals.
//!
//! The per-cell feature vectors (one-stage) and the region embeddings
//! (two-stage) are the tensors consumed by the prediction heads, and the
//! place where object-type discriminators attach during training.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, ImageId};
use crate::detector::anchors::{generate_anchors, AnchorGrid, LevelConfig};
use crate::detector::boxcoder::decode_box;
use crate::detector::nms::nms;
use crate::detector::nn::{silu, silu_backward, Conv2d, Linear, Parameters};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OneStage,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    ClassAware,
    ClassAgnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    /// Output grid side of the crop-and-pool step.
    pub pool: usize,
    pub hidden: usize,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub proposal_nms: f64,
    pub regions_per_image: usize,
    pub foreground_fraction: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            pool: 5,
            hidden: 64,
            train_proposals: 64,
            test_proposals: 1000,
            proposal_nms: 0.7,
            regions_per_image: 32,
            foreground_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub head_type: HeadType,
    pub image_width: usize,
    pub image_height: usize,
    pub blocks: Vec<BlockConfig>,
    /// Block indices whose outputs are feature levels, shallow to deep.
    pub level_blocks: Vec<usize>,
    /// One anchor layout per level; strides must match the backbone.
    pub anchors: Vec<LevelConfig>,
    /// Object types seen in training (`C`).
    pub num_types: usize,
    /// Vocabulary class id for each type label, used for class-aware output.
    #[serde(default)]
    pub type_class_ids: Vec<usize>,
    pub roi: RoiConfig,
    pub head_init_std: f64,
}

impl ModelConfig {
    /// 128×128 input, six conv blocks, levels at strides 8/16/32.
    pub fn toy(mode: Mode, head_type: HeadType, num_types: usize) -> Self {
        let b = |channels, stride| BlockConfig { channels, stride };
        let level = |stride, sizes: &[f64]| LevelConfig {
            stride,
            sizes: sizes.to_vec(),
            ratios: vec![1.0],
        };
        Self {
            mode,
            head_type,
            image_width: 128,
            image_height: 128,
            blocks: vec![b(8, 2), b(16, 2), b(32, 2), b(32, 1), b(32, 2), b(32, 2)],
            level_blocks: vec![3, 4, 5],
            anchors: vec![
                level(8, &[16.0, 24.0]),
                level(16, &[32.0, 48.0]),
                level(32, &[64.0]),
            ],
            num_types,
            type_class_ids: (0..num_types).collect(),
            roi: RoiConfig::default(),
            head_init_std: 0.01,
        }
    }

    /// A tiny network for gradient checks and fast tests.
    pub fn micro(mode: Mode, head_type: HeadType, num_types: usize) -> Self {
        let b = |channels, stride| BlockConfig { channels, stride };
        let level = |stride, sizes: &[f64]| LevelConfig {
            stride,
            sizes: sizes.to_vec(),
            ratios: vec![1.0, 2.0],
        };
        Self {
            mode,
            head_type,
            image_width: 16,
            image_height: 16,
            blocks: vec![b(3, 2), b(4, 2), b(4, 2)],
            level_blocks: vec![1, 2],
            anchors: vec![level(4, &[6.0]), level(8, &[12.0])],
            num_types,
            type_class_ids: (0..num_types).collect(),
            roi: RoiConfig {
                pool: 2,
                hidden: 6,
                train_proposals: 8,
                test_proposals: 16,
                regions_per_image: 6,
                ..RoiConfig::default()
            },
            head_init_std: 0.3,
        }
    }

    /// Logits per anchor (or region) for the main classification head.
    pub fn num_logits(&self) -> usize {
        match self.head_type {
            HeadType::ClassAgnostic => 2,
            HeadType::ClassAware => self.num_types + 1,
        }
    }

    /// Logits per anchor emitted by the per-level heads.
    pub fn level_logits(&self) -> usize {
        match self.mode {
            Mode::OneStage => self.num_logits(),
            Mode::TwoStage => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.level_blocks.is_empty() {
            return Err(Error::Config(
                "backbone needs at least one block and one level".into(),
            ));
        }
        if self.level_blocks.len() != self.anchors.len() {
            return Err(Error::Config(
                "one anchor layout per feature level is required".into(),
            ));
        }
        if self.head_type == HeadType::ClassAware && self.num_types == 0 {
            return Err(Error::Config(
                "class-aware head needs at least one object type".into(),
            ));
        }
        let mut stride = 1;
        let mut strides = Vec::new();
        for blk in &self.blocks {
            stride *= blk.stride;
            strides.push(stride);
        }
        for (lvl, (&bi, a)) in self.level_blocks.iter().zip(&self.anchors).enumerate() {
            let s = *strides
                .get(bi)
                .ok_or_else(|| Error::Config(format!("level {lvl} uses missing block {bi}")))?;
            if s != a.stride {
                return Err(Error::Config(format!(
                    "level {lvl}: backbone stride {s} but anchor stride {}",
                    a.stride
                )));
            }
            if a.sizes.is_empty() || a.ratios.is_empty() {
                return Err(Error::Config(format!("level {lvl} has no anchors")));
            }
        }
        if !self.image_width.is_multiple_of(stride) || !self.image_height.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "image size must be a multiple of the total stride {stride}"
            )));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.blocks[self.level_blocks[level]].channels
    }

    /// Width of the embedding each discriminator sees.
    pub fn embedding_dims(&self) -> Vec<usize> {
        match self.mode {
            Mode::OneStage => (0..self.level_blocks.len())
                .map(|l| self.level_channels(l))
                .collect(),
            Mode::TwoStage => vec![self.roi.hidden],
        }
    }
}

/// Region head of the two-stage detector.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiHead {
    pub fc: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

impl Parameters for RoiHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.fc.visit(&format!("{prefix}roi.fc"), f);
        self.cls.visit(&format!("{prefix}roi.cls"), f);
        self.reg.visit(&format!("{prefix}roi.reg"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.fc.visit_mut(f);
        self.cls.visit_mut(f);
        self.reg.visit_mut(f);
    }
}

/// All trainable detector tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    pub backbone: Vec<Conv2d>,
    /// Per level `(C_l → A·K)`.
    pub cls_heads: Vec<Linear>,
    /// Per level `(C_l → A·4)`.
    pub reg_heads: Vec<Linear>,
    pub roi: Option<RoiHead>,
}

impl Parameters for DetectorWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, c) in self.backbone.iter().enumerate() {
            c.visit(&format!("{prefix}backbone.{i}"), f);
        }
        for (i, c) in self.cls_heads.iter().enumerate() {
            c.visit(&format!("{prefix}cls_head.{i}"), f);
        }
        for (i, c) in self.reg_heads.iter().enumerate() {
            c.visit(&format!("{prefix}reg_head.{i}"), f);
        }
        if let Some(roi) = &self.roi {
            roi.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for c in &mut self.backbone {
            c.visit_mut(f);
        }
        for c in &mut self.cls_heads {
            c.visit_mut(f);
        }
        for c in &mut self.reg_heads {
            c.visit_mut(f);
        }
        if let Some(roi) = &mut self.roi {
            roi.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub weights: DetectorWeights,
    pub anchors: AnchorGrid,
}

/// Everything `backward` needs from one forward pass over one image.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    block_cols: Vec<Array2<f64>>,
    block_pre: Vec<Array3<f64>>,
    block_out: Vec<Array3<f64>>,
    /// Per level `(cells, C_l)`: the per-cell embeddings fed to the heads.
    pub embeddings: Vec<Array2<f64>>,
    /// Per level `(anchors_l, K)`.
    pub logits: Vec<Array2<f64>>,
    /// Per level `(anchors_l, 4)`.
    pub offsets: Vec<Array2<f64>>,
}

impl ForwardPass {
    /// Per-level outputs stacked in anchor order.
    pub fn all_logits(&self) -> Array2<f64> {
        let views: Vec<_> = self.logits.iter().map(|l| l.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("same width")
    }

    pub fn all_offsets(&self) -> Array2<f64> {
        let views: Vec<_> = self.offsets.iter().map(|l| l.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("same width")
    }

    pub fn level0_features(&self, model: &DetectorModel) -> &Array3<f64> {
        &self.block_out[model.config.level_blocks[0]]
    }
}

/// Bilinear taps of one region: for each pooled bin, `(cell, weight)` pairs
/// over the level-0 grid.
#[derive(Debug, Clone)]
pub struct RegionTaps {
    pub bins: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
pub struct RoiPass {
    pub boxes: Vec<BoundingBox>,
    taps: Vec<RegionTaps>,
    pooled: Array2<f64>,
    fc_pre: Array2<f64>,
    /// `(R, hidden)` region embeddings fed to the region heads.
    pub embeddings: Array2<f64>,
    /// `(R, K)`
    pub logits: Array2<f64>,
    /// `(R, 4)`, relative to `boxes`.
    pub offsets: Array2<f64>,
}

/// Upstream gradients for [`DetectorModel::backward`].
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub logits: Vec<Array2<f64>>,
    pub offsets: Vec<Array2<f64>>,
    /// Extra gradient on the per-level embeddings (from discriminators).
    pub embeddings: Vec<Option<Array2<f64>>>,
    pub roi: Option<RoiGrads>,
}

#[derive(Debug, Clone)]
pub struct RoiGrads {
    pub logits: Array2<f64>,
    pub offsets: Array2<f64>,
    pub embeddings: Option<Array2<f64>>,
}

impl OutputGrads {
    pub fn zeros(pass: &ForwardPass) -> Self {
        Self {
            logits: pass.logits.iter().map(|l| Array2::zeros(l.dim())).collect(),
            offsets: pass
                .offsets
                .iter()
                .map(|l| Array2::zeros(l.dim()))
                .collect(),
            embeddings: vec![None; pass.embeddings.len()],
            roi: None,
        }
    }

    /// Splits stacked `(N, K)` / `(N, 4)` gradients back into levels.
    pub fn from_stacked(pass: &ForwardPass, logits: &Array2<f64>, offsets: &Array2<f64>) -> Self {
        let mut g = Self::zeros(pass);
        let mut start = 0;
        for l in 0..pass.logits.len() {
            let n = pass.logits[l].nrows();
            g.logits[l].assign(&logits.slice(s![start..start + n, ..]));
            g.offsets[l].assign(&offsets.slice(s![start..start + n, ..]));
            start += n;
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub pre_nms_top: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            score_threshold: 0.0,
            pre_nms_top: 2000,
        }
    }
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Object score and optional type index per row.
fn score_rows(probs: &Array2<f64>, aware: bool) -> Vec<(f64, Option<usize>)> {
    probs
        .rows()
        .into_iter()
        .map(|p| {
            if aware {
                let (best, score) =
                    p.iter()
                        .enumerate()
                        .skip(1)
                        .fold(
                            (1, f64::NEG_INFINITY),
                            |acc, (i, &v)| {
                                if v > acc.1 {
                                    (i, v)
                                } else {
                                    acc
                                }
                            },
                        );
                (score, Some(best - 1))
            } else {
                (p[1], None)
            }
        })
        .collect()
}

fn offsets_row(offsets: &Array2<f64>, i: usize) -> [f64; 4] {
    [
        offsets[[i, 0]],
        offsets[[i, 1]],
        offsets[[i, 2]],
        offsets[[i, 3]],
    ]
}

impl DetectorModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(config.blocks.len());
        let mut in_ch = 3;
        for blk in &config.blocks {
            backbone.push(Conv2d::new(&mut rng, in_ch, blk.channels, 3, blk.stride, 1));
            in_ch = blk.channels;
        }
        let k = config.level_logits();
        let std = config.head_init_std;
        let mut cls_heads = Vec::new();
        let mut reg_heads = Vec::new();
        for (l, a) in config.anchors.iter().enumerate() {
            let c = config.level_channels(l);
            cls_heads.push(Linear::with_std(&mut rng, c, a.anchors_per_cell() * k, std));
            reg_heads.push(Linear::with_std(&mut rng, c, a.anchors_per_cell() * 4, std));
        }
        let roi = match config.mode {
            Mode::OneStage => None,
            Mode::TwoStage => {
                let c0 = config.level_channels(0);
                let p = config.roi.pool;
                Some(RoiHead {
                    fc: Linear::new(&mut rng, c0 * p * p, config.roi.hidden),
                    cls: Linear::with_std(&mut rng, config.roi.hidden, config.num_logits(), std),
                    reg: Linear::with_std(&mut rng, config.roi.hidden, 4, std),
                })
            }
        };
        let anchors = generate_anchors(config.image_width, config.image_height, &config.anchors)?;
        Ok(Self {
            config,
            weights: DetectorWeights {
                backbone,
                cls_heads,
                reg_heads,
                roi,
            },
            anchors,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: DetectorWeights) -> Result<Self> {
        config.validate()?;
        let anchors = generate_anchors(config.image_width, config.image_height, &config.anchors)?;
        Ok(Self {
            config,
            weights,
            anchors,
        })
    }

    /// Class-agnostic copy for finetuning: every tensor is kept except the
    /// class-aware classification head, which is freshly initialized.
    pub fn agnostic_from(&self, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.head_type = HeadType::ClassAgnostic;
        let mut out = Self::new(config, seed)?;
        out.weights.backbone = self.weights.backbone.clone();
        out.weights.reg_heads = self.weights.reg_heads.clone();
        if let (Some(dst), Some(src)) = (&mut out.weights.roi, &self.weights.roi) {
            // The dense heads are the proposal network here and stay.
            out.weights.cls_heads = self.weights.cls_heads.clone();
            dst.fc = src.fc.clone();
            dst.reg = src.reg.clone();
        }
        Ok(out)
    }

    pub fn num_levels(&self) -> usize {
        self.config.level_blocks.len()
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<ForwardPass> {
        let (c, h, w) = image.dim();
        if c != 3 || h != self.config.image_height || w != self.config.image_width {
            return Err(Error::Shape(format!(
                "expected 3x{}x{} input, got {c}x{h}x{w}",
                self.config.image_height, self.config.image_width
            )));
        }
        let mut block_cols = Vec::new();
        let mut block_pre = Vec::new();
        let mut block_out: Vec<Array3<f64>> = Vec::new();
        for (i, conv) in self.weights.backbone.iter().enumerate() {
            let input = if i == 0 { image } else { &block_out[i - 1] };
            let (pre, cols) = conv.forward(input);
            block_out.push(silu(&pre));
            block_pre.push(pre);
            block_cols.push(cols);
        }
        let k = self.config.level_logits();
        let mut embeddings = Vec::new();
        let mut logits = Vec::new();
        let mut offsets = Vec::new();
        for (l, &bi) in self.config.level_blocks.iter().enumerate() {
            let feat = &block_out[bi];
            let (ch, fh, fw) = feat.dim();
            let emb = feat
                .to_shape((ch, fh * fw))
                .expect("row-major reshape")
                .t()
                .to_owned();
            let a = self.config.anchors[l].anchors_per_cell();
            let lg = self.weights.cls_heads[l].forward(emb.view());
            let of = self.weights.reg_heads[l].forward(emb.view());
            logits.push(
                lg.to_shape((fh * fw * a, k))
                    .expect("row-major reshape")
                    .into_owned(),
            );
            offsets.push(
                of.to_shape((fh * fw * a, 4))
                    .expect("row-major reshape")
                    .into_owned(),
            );
            embeddings.push(emb);
        }
        Ok(ForwardPass {
            block_cols,
            block_pre,
            block_out,
            embeddings,
            logits,
            offsets,
        })
    }

    /// Level-0 bilinear taps for `pool × pool` bins, 2×2 samples per bin.
    fn region_taps(&self, b: &BoundingBox, fh: usize, fw: usize) -> RegionTaps {
        let stride = self.config.anchors[0].stride as f64;
        let p = self.config.roi.pool;
        let mut bins = Vec::with_capacity(p * p);
        let sample = |v: f64, n: usize| -> (usize, usize, f64) {
            let v = v.clamp(0.0, (n - 1) as f64);
            let lo = v.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, v - lo as f64)
        };
        for by in 0..p {
            for bx in 0..p {
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(16);
                for sy in 0..2 {
                    for sx in 0..2 {
                        let fy = (by as f64 + (sy as f64 + 0.5) / 2.0) / p as f64;
                        let fx = (bx as f64 + (sx as f64 + 0.5) / 2.0) / p as f64;
                        let y = (b.y_min + fy * b.height()) / stride - 0.5;
                        let x = (b.x_min + fx * b.width()) / stride - 0.5;
                        let (y0, y1, ty) = sample(y, fh);
                        let (x0, x1, tx) = sample(x, fw);
                        for (cell, wgt) in [
                            (y0 * fw + x0, (1.0 - ty) * (1.0 - tx)),
                            (y0 * fw + x1, (1.0 - ty) * tx),
                            (y1 * fw + x0, ty * (1.0 - tx)),
                            (y1 * fw + x1, ty * tx),
                        ] {
                            if wgt != 0.0 {
                                taps.push((cell, 0.25 * wgt));
                            }
                        }
                    }
                }
                bins.push(taps);
            }
        }
        RegionTaps { bins }
    }

    /// Region head over `boxes` (constants: no gradient flows into them).
    pub fn roi_forward(&self, pass: &ForwardPass, boxes: &[BoundingBox]) -> Result<RoiPass> {
        let roi = self.weights.roi.as_ref().ok_or_else(|| {
            Error::InvalidArgument("region head requires a two-stage model".into())
        })?;
        let feat = pass.level0_features(self);
        let (c, fh, fw) = feat.dim();
        let flat = feat.to_shape((c, fh * fw)).expect("row-major reshape");
        let bins = self.config.roi.pool * self.config.roi.pool;
        let mut pooled = Array2::zeros((boxes.len(), c * bins));
        let mut taps = Vec::with_capacity(boxes.len());
        for (r, b) in boxes.iter().enumerate() {
            let t = self.region_taps(b, fh, fw);
            for (bin, bin_taps) in t.bins.iter().enumerate() {
                for ch in 0..c {
                    pooled[[r, ch * bins + bin]] = bin_taps
                        .iter()
                        .map(|&(cell, wgt)| wgt * flat[[ch, cell]])
                        .sum();
                }
            }
            taps.push(t);
        }
        let fc_pre = roi.fc.forward(pooled.view());
        let embeddings = silu(&fc_pre);
        let logits = roi.cls.forward(embeddings.view());
        let offsets = roi.reg.forward(embeddings.view());
        Ok(RoiPass {
            boxes: boxes.to_vec(),
            taps,
            pooled,
            fc_pre,
            embeddings,
            logits,
            offsets,
        })
    }

    /// Backpropagates output gradients into a fresh weight-gradient value.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        roi_pass: Option<&RoiPass>,
        grads: &OutputGrads,
    ) -> DetectorWeights {
        let mut g = self.weights.zeros_like();
        let mut block_grads: Vec<Option<Array3<f64>>> = vec![None; self.weights.backbone.len()];
        for (l, &bi) in self.config.level_blocks.iter().enumerate() {
            let (ch, fh, fw) = pass.block_out[bi].dim();
            let a = self.config.anchors[l].anchors_per_cell();
            let k = self.config.level_logits();
            let cells = fh * fw;
            let gl = grads.logits[l]
                .to_shape((cells, a * k))
                .expect("row-major reshape")
                .to_owned();
            let go = grads.offsets[l]
                .to_shape((cells, a * 4))
                .expect("row-major reshape")
                .to_owned();
            let emb = pass.embeddings[l].view();
            let mut gemb = self.weights.cls_heads[l].backward(emb, gl.view(), &mut g.cls_heads[l]);
            gemb += &self.weights.reg_heads[l].backward(emb, go.view(), &mut g.reg_heads[l]);
            if let Some(extra) = &grads.embeddings[l] {
                gemb += extra;
            }
            let gmap = gemb
                .t()
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((ch, fh, fw))
                .expect("contiguous");
            match &mut block_grads[bi] {
                Some(acc) => *acc += &gmap,
                slot => *slot = Some(gmap),
            }
        }
        if let (Some(rg), Some(rp), Some(roi)) = (&grads.roi, roi_pass, &self.weights.roi) {
            let groi = g.roi.as_mut().expect("two-stage gradient container");
            let mut gemb = roi
                .cls
                .backward(rp.embeddings.view(), rg.logits.view(), &mut groi.cls);
            gemb += &roi
                .reg
                .backward(rp.embeddings.view(), rg.offsets.view(), &mut groi.reg);
            if let Some(extra) = &rg.embeddings {
                gemb += extra;
            }
            silu_backward(&rp.fc_pre, &mut gemb);
            let gpooled = roi.fc.backward(rp.pooled.view(), gemb.view(), &mut groi.fc);
            let bi = self.config.level_blocks[0];
            let (c, fh, fw) = pass.block_out[bi].dim();
            let bins = self.config.roi.pool * self.config.roi.pool;
            let mut gmap = Array2::<f64>::zeros((c, fh * fw));
            for (r, taps) in rp.taps.iter().enumerate() {
                for (bin, bin_taps) in taps.bins.iter().enumerate() {
                    for ch in 0..c {
                        let go = gpooled[[r, ch * bins + bin]];
                        if go != 0.0 {
                            for &(cell, wgt) in bin_taps {
                                gmap[[ch, cell]] += wgt * go;
                            }
                        }
                    }
                }
            }
            let gmap = gmap.into_shape_with_order((c, fh, fw)).expect("contiguous");
            match &mut block_grads[bi] {
                Some(acc) => *acc += &gmap,
                slot => *slot = Some(gmap),
            }
        }
        // Walk the backbone from the deepest block that received gradient.
        let Some(last) = block_grads.iter().rposition(Option::is_some) else {
            return g;
        };
        let mut carry: Option<Array3<f64>> = None;
        for i in (0..=last).rev() {
            let mut gout = match (carry.take(), block_grads[i].take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            silu_backward(&pass.block_pre[i], &mut gout);
            let conv = &self.weights.backbone[i];
            if i == 0 {
                conv.backward_params(&pass.block_cols[0], &gout, &mut g.backbone[0]);
            } else {
                let in_shape = pass.block_out[i - 1].dim();
                carry =
                    Some(conv.backward(&pass.block_cols[i], &gout, in_shape, &mut g.backbone[i]));
            }
        }
        g
    }

    /// Scored, decoded boxes for every anchor from the per-level heads.
    /// In two-stage mode these are the raw proposals.
    pub fn dense_candidates(&self, pass: &ForwardPass, image_id: ImageId) -> Vec<Detection> {
        let aware =
            self.config.mode == Mode::OneStage && self.config.head_type == HeadType::ClassAware;
        let (w, h) = (
            self.config.image_width as f64,
            self.config.image_height as f64,
        );
        let mut out = Vec::with_capacity(self.anchors.len());
        for (l, level) in self.anchors.levels.iter().enumerate() {
            let probs = softmax_rows(pass.logits[l].view());
            for (i, (score, ty)) in score_rows(&probs, aware).into_iter().enumerate() {
                let b = clip_box(
                    &decode_box(&level.anchors[i], &offsets_row(&pass.offsets[l], i)),
                    w,
                    h,
                );
                if b.is_degenerate() {
                    continue;
                }
                let class_id = ty.map(|t| self.config.type_class_ids.get(t).copied().unwrap_or(t));
                out.push(Detection {
                    image_id,
                    bbox: b,
                    score,
                    class_id,
                });
            }
        }
        out
    }

    /// Top proposals after NMS, as used by the region head.
    pub fn proposals(&self, pass: &ForwardPass, max: usize) -> Vec<BoundingBox> {
        let mut cands = self.dense_candidates(pass, 0);
        crate::metrics::sort_by_score(&mut cands);
        cands.truncate(max.max(1) * 4);
        nms(cands, self.config.roi.proposal_nms, max)
            .into_iter()
            .map(|d| d.bbox)
            .collect()
    }

    /// Detections for one image. Class-agnostic heads never report a class.
    pub fn infer(
        &self,
        image: &Array3<f64>,
        image_id: ImageId,
        max_detections: usize,
        cfg: &InferConfig,
    ) -> Result<Vec<Detection>> {
        if max_detections == 0 {
            return Ok(Vec::new());
        }
        let pass = self.forward(image)?;
        let mut cands = match self.config.mode {
            Mode::OneStage => self.dense_candidates(&pass, image_id),
            Mode::TwoStage => self.region_detections(&pass, image_id)?,
        };
        cands.retain(|d| d.score >= cfg.score_threshold);
        crate::metrics::sort_by_score(&mut cands);
        cands.truncate(cfg.pre_nms_top);
        Ok(nms(cands, cfg.nms_iou, max_detections))
    }

    /// Raw proposal-network output (two-stage only), for the proposal baseline.
    pub fn infer_proposals(
        &self,
        image: &Array3<f64>,
        image_id: ImageId,
        max_detections: usize,
        cfg: &InferConfig,
    ) -> Result<Vec<Detection>> {
        if self.config.mode != Mode::TwoStage {
            return Err(Error::InvalidArgument(
                "proposals exist only for two-stage models".into(),
            ));
        }
        let pass = self.forward(image)?;
        let mut cands = self.dense_candidates(&pass, image_id);
        crate::metrics::sort_by_score(&mut cands);
        cands.truncate(cfg.pre_nms_top);
        let cap = max_detections.min(self.config.roi.test_proposals);
        Ok(nms(cands, self.config.roi.proposal_nms, cap))
    }

    fn region_detections(&self, pass: &ForwardPass, image_id: ImageId) -> Result<Vec<Detection>> {
        let boxes = self.proposals(pass, self.config.roi.test_proposals);
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let rp = self.roi_forward(pass, &boxes)?;
        let aware = self.config.head_type == HeadType::ClassAware;
        let probs = softmax_rows(rp.logits.view());
        let (w, h) = (
            self.config.image_width as f64,
            self.config.image_height as f64,
        );
        let mut out = Vec::with_capacity(boxes.len());
        for (i, (score, ty)) in score_rows(&probs, aware).into_iter().enumerate() {
            let b = clip_box(&decode_box(&boxes[i], &offsets_row(&rp.offsets, i)), w, h);
            if b.is_degenerate() {
                continue;
            }
            let class_id = ty.map(|t| self.config.type_class_ids.get(t).copied().unwrap_or(t));
            out.push(Detection {
                image_id,
                bbox: b,
                score,
                class_id,
            });
        }
        Ok(out)
    }
}

/// `(v / 255 - 0.5) * 2` per channel, laid out `(3, H, W)`.
pub fn image_to_tensor(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        (img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0 - 0.5) * 2.0
    })
}
