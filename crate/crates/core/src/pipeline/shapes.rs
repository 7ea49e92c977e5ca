//! Synthetic shapes dataset: flat-colored shapes on textured backgrounds
//! with exact integer boxes.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ClassVocabulary, DatasetIndex, ImageRecord, ImageStore};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

pub const SHAPE_CLASSES: [&str; 8] = [
    "circle", "square", "triangle", "cross", "ring", "star", "diamond", "hexagon",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub num_images: usize,
    pub width: u32,
    pub height: u32,
    pub classes: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: u32,
    pub max_size: u32,
    /// First image id; lets several generated sets share one id space.
    pub first_id: u64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            width: 128,
            height: 128,
            classes: SHAPE_CLASSES[..5].iter().map(|s| s.to_string()).collect(),
            min_objects: 1,
            max_objects: 3,
            min_size: 16,
            max_size: 48,
            first_id: 1,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(
                "shapes: at least one class is required".into(),
            ));
        }
        for c in &self.classes {
            if !SHAPE_CLASSES.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "shapes: unknown shape `{c}` (known: {})",
                    SHAPE_CLASSES.join(", ")
                )));
            }
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(
                "shapes: need 1 <= min_objects <= max_objects".into(),
            ));
        }
        if self.min_size < 4
            || self.min_size > self.max_size
            || self.max_size > self.width.min(self.height)
        {
            return Err(Error::Config(
                "shapes: need 4 <= min_size <= max_size <= image side".into(),
            ));
        }
        Ok(())
    }
}

/// Inside test in unit coordinates, the shape spanning exactly [-1, 1]².
fn inside(shape: &str, u: f64, v: f64) -> bool {
    match shape {
        "circle" => u * u + v * v <= 1.0,
        "square" => u.abs() <= 1.0 && v.abs() <= 1.0,
        "triangle" => {
            // Apex at the top center, base along the bottom edge.
            let t = (v + 1.0) / 2.0;
            u.abs() <= t
        }
        "cross" => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        "ring" => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
        "diamond" => u.abs() + v.abs() <= 1.0,
        "hexagon" => v.abs() <= 1.0 && u.abs() + 0.5 * v.abs() <= 1.0,
        "star" => in_polygon(&STAR, u, v),
        _ => false,
    }
}

static STAR: std::sync::LazyLock<Vec<(f64, f64)>> = std::sync::LazyLock::new(|| {
    let raw: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 1.0 } else { 0.45 };
            let a = -PI / 2.0 + i as f64 * PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let (x0, x1) = raw
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = raw
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    raw.iter()
        .map(|&(x, y)| {
            (
                2.0 * (x - x0) / (x1 - x0) - 1.0,
                2.0 * (y - y0) / (y1 - y0) - 1.0,
            )
        })
        .collect()
});

fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Background of a random base color, a soft stripe pattern and pixel noise.
fn background<R: Rng>(rng: &mut R, w: u32, h: u32) -> (Vec<[f64; 3]>, f64) {
    let base = random_color(rng);
    let tint = random_color(rng);
    let freq = rng.random_range(0.05..0.3);
    let angle = rng.random_range(0.0..PI);
    let amp = rng.random_range(0.05..0.2);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut px = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let s = ((x as f64 * ca + y as f64 * sa) * freq).sin() * amp;
            let n = rng.random_range(-0.04..0.04);
            px.push(std::array::from_fn(|k| {
                (base[k] * (1.0 - amp) + tint[k] * s + n).clamp(0.0, 1.0)
            }));
        }
    }
    (px, luminance(base))
}

/// Generates `num_images` images; returns the index and an in-memory store
/// whose file names are `shapes_{id}.png`.
pub fn generate_shapes(cfg: &ShapesConfig) -> Result<(DatasetIndex, ImageStore)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocabulary = ClassVocabulary::new(cfg.classes.clone(), BTreeMap::new())?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut pixels = BTreeMap::new();
    let mut ann_id = 1u64;
    for n in 0..cfg.num_images {
        let id = cfg.first_id + n as u64;
        let (mut px, bg_lum) = background(&mut rng, cfg.width, cfg.height);
        let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut placed: Vec<BoundingBox> = Vec::new();
        for _ in 0..count {
            for _attempt in 0..30 {
                let bw = rng.random_range(cfg.min_size..=cfg.max_size);
                let aspect: f64 = rng.random_range(0.75..1.33);
                let bh = ((bw as f64 * aspect).round() as u32).clamp(cfg.min_size, cfg.max_size);
                let x0 = rng.random_range(0..=cfg.width - bw);
                let y0 = rng.random_range(0..=cfg.height - bh);
                let b = BoundingBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
                if placed
                    .iter()
                    .any(|p| iou(p, &b) > 0.0 || p.intersection_area(&b) > 0.0)
                {
                    continue;
                }
                let class_id = rng.random_range(0..cfg.classes.len());
                let shape = cfg.classes[class_id].as_str();
                let mut color = random_color(&mut rng);
                // Keep the shape visibly distinct from the background.
                if (luminance(color) - bg_lum).abs() < 0.25 {
                    let shift = if bg_lum > 0.5 { -0.5 } else { 0.5 };
                    color = color.map(|c| (c + shift).clamp(0.0, 1.0));
                }
                let mut touched = false;
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        let u = 2.0 * (x as f64 + 0.5 - x0 as f64) / bw as f64 - 1.0;
                        let v = 2.0 * (y as f64 + 0.5 - y0 as f64) / bh as f64 - 1.0;
                        if inside(shape, u, v) {
                            px[(y * cfg.width + x) as usize] = color;
                            touched = true;
                        }
                    }
                }
                if touched {
                    placed.push(b);
                    annotations.push(Annotation {
                        id: ann_id,
                        image_id: id,
                        bbox: b,
                        class_id,
                        is_crowd: false,
                    });
                    ann_id += 1;
                }
                break;
            }
        }
        let img = RgbImage::from_fn(cfg.width, cfg.height, |x, y| {
            let p = px[(y * cfg.width + x) as usize];
            Rgb(p.map(|c| (c * 255.0).round() as u8))
        });
        pixels.insert(id, img);
        images.push(ImageRecord {
            id,
            width: cfg.width,
            height: cfg.height,
            file_name: format!("shapes_{id}.png"),
        });
    }
    Ok((
        DatasetIndex {
            images,
            annotations,
            vocabulary,
        },
        ImageStore::Memory(pixels),
    ))
}
