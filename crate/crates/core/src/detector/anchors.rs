use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Anchor layout for one feature level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub stride: usize,
    /// Square-equivalent side lengths in pixels.
    pub sizes: Vec<f64>,
    /// Width / height ratios.
    pub ratios: Vec<f64>,
}

impl LevelConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLevel {
    pub config: LevelConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Ordered by cell (row-major), then size, then ratio.
    pub anchors: Vec<BoundingBox>,
}

impl AnchorLevel {
    /// Flat cell index of anchor `i` within this level.
    pub fn cell_of(&self, i: usize) -> usize {
        i / self.config.anchors_per_cell()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub image_width: usize,
    pub image_height: usize,
    pub levels: Vec<AnchorLevel>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors concatenated level by level.
    pub fn all(&self) -> Vec<BoundingBox> {
        self.levels
            .iter()
            .flat_map(|l| l.anchors.iter().copied())
            .collect()
    }

    /// Offset of each level's first anchor in the concatenated order.
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.anchors.len();
                o
            })
            .collect()
    }

    /// `(level, index within level)` for a concatenated anchor index.
    pub fn locate(&self, mut index: usize) -> (usize, usize) {
        for (li, l) in self.levels.iter().enumerate() {
            if index < l.anchors.len() {
                return (li, index);
            }
            index -= l.anchors.len();
        }
        panic!("anchor index out of range");
    }
}

/// Centers sit at `(i + 0.5) * stride`; each cell holds one anchor per
/// (size, ratio) pair.
pub fn generate_anchors(width: usize, height: usize, levels: &[LevelConfig]) -> Result<AnchorGrid> {
    let mut out = Vec::with_capacity(levels.len());
    for cfg in levels {
        if cfg.stride == 0
            || !width.is_multiple_of(cfg.stride)
            || !height.is_multiple_of(cfg.stride)
        {
            return Err(Error::InvalidArgument(format!(
                "stride {} does not divide image size {width}x{height}",
                cfg.stride
            )));
        }
        let (gh, gw) = (height / cfg.stride, width / cfg.stride);
        let mut anchors = Vec::with_capacity(gh * gw * cfg.anchors_per_cell());
        for gy in 0..gh {
            for gx in 0..gw {
                let cx = (gx as f64 + 0.5) * cfg.stride as f64;
                let cy = (gy as f64 + 0.5) * cfg.stride as f64;
                for &size in &cfg.sizes {
                    for &ratio in &cfg.ratios {
                        let w = size * ratio.sqrt();
                        let h = size / ratio.sqrt();
                        anchors.push(BoundingBox::from_center(cx, cy, w, h));
                    }
                }
            }
        }
        out.push(AnchorLevel {
            config: cfg.clone(),
            grid_h: gh,
            grid_w: gw,
            anchors,
        });
    }
    Ok(AnchorGrid {
        image_width: width,
        image_height: height,
        levels: out,
    })
}
