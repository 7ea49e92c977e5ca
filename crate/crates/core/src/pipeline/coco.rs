//! COCO-style annotation files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ClassVocabulary, DatasetIndex, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BoundingBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supercategory: Option<String>,
}

/// A parsed file plus the annotations dropped while loading.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCoco {
    pub index: DatasetIndex,
    pub warnings: Vec<String>,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len();
    }
    offset
}

/// Parses COCO JSON text. Category ids are mapped to class ids by sorted
/// category id; boxes are converted to corner form and clipped to the image,
/// and annotations left with zero area are dropped with a warning.
pub fn parse_coco(
    text: &str,
    path: &Path,
    aliases: &BTreeMap<String, String>,
) -> Result<LoadedCoco> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let file: CocoFile = serde_json::from_str(text).map_err(|e| {
        let at = byte_offset(text, e.line(), e.column());
        parse_err(format!("{e} (byte offset {at})"))
    })?;
    let mut cats = file.categories.clone();
    cats.sort_by_key(|c| c.id);
    let mut class_of = BTreeMap::new();
    for (i, c) in cats.iter().enumerate() {
        if class_of.insert(c.id, i).is_some() {
            return Err(parse_err(format!("duplicate category id {}", c.id)));
        }
    }
    let vocabulary = ClassVocabulary::new(
        cats.iter().map(|c| c.name.clone()).collect(),
        aliases.clone(),
    )
    .map_err(|e| parse_err(e.to_string()))?;
    let mut sizes = BTreeMap::new();
    for img in &file.images {
        if img.width == 0 || img.height == 0 {
            return Err(parse_err(format!(
                "image {} has zero width or height",
                img.id
            )));
        }
        if sizes
            .insert(img.id, (img.width as f64, img.height as f64))
            .is_some()
        {
            return Err(parse_err(format!("duplicate image id {}", img.id)));
        }
    }
    let mut warnings = Vec::new();
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for (n, a) in file.annotations.iter().enumerate() {
        let Some(&class_id) = class_of.get(&a.category_id) else {
            return Err(parse_err(format!(
                "annotations[{n}] (id {}) has unknown category id {}",
                a.id, a.category_id
            )));
        };
        let Some(&(w, h)) = sizes.get(&a.image_id) else {
            return Err(parse_err(format!(
                "annotations[{n}] (id {}) references missing image {}",
                a.id, a.image_id
            )));
        };
        if a.bbox.iter().any(|v| !v.is_finite()) || a.bbox[2] < 0.0 || a.bbox[3] < 0.0 {
            return Err(parse_err(format!(
                "annotations[{n}] (id {}) has an invalid bbox {:?}",
                a.id, a.bbox
            )));
        }
        let bbox = clip_box(
            &BoundingBox::from_xywh(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
            w,
            h,
        );
        if bbox.is_degenerate() {
            warnings.push(format!(
                "annotation {} dropped: zero area after clipping",
                a.id
            ));
            continue;
        }
        annotations.push(Annotation {
            id: a.id,
            image_id: a.image_id,
            bbox,
            class_id,
            is_crowd: a.iscrowd != 0,
        });
    }
    let images = file
        .images
        .into_iter()
        .map(|i| ImageRecord {
            id: i.id,
            width: i.width,
            height: i.height,
            file_name: i.file_name,
        })
        .collect();
    Ok(LoadedCoco {
        index: DatasetIndex {
            images,
            annotations,
            vocabulary,
        },
        warnings,
    })
}

pub fn load_coco_json(path: &Path) -> Result<DatasetIndex> {
    load_coco_json_with(path, &BTreeMap::new()).map(|l| l.index)
}

pub fn load_coco_json_with(path: &Path, aliases: &BTreeMap<String, String>) -> Result<LoadedCoco> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_coco(&text, path, aliases)
}

/// Serializes with category id `class_id + 1` and `[x, y, w, h]` boxes.
pub fn to_coco_string(index: &DatasetIndex) -> Result<String> {
    let file = CocoFile {
        images: index
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.id,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
            })
            .collect(),
        annotations: index
            .annotations
            .iter()
            .map(|a| CocoAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.class_id as u64 + 1,
                bbox: a.bbox.to_xywh(),
                iscrowd: u8::from(a.is_crowd),
                area: Some(a.bbox.area()),
            })
            .collect(),
        categories: index
            .vocabulary
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.clone(),
                supercategory: None,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_coco_json(index: &DatasetIndex, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, to_coco_string(index)?)?;
    Ok(())
}
