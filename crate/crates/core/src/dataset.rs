//! Ground truth, predictions, class vocabularies and image storage.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, BoundingBox};
use crate::protocol::normalize_name;

pub type ImageId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: ImageId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    #[serde(default)]
    pub is_crowd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    /// Absent for class-agnostic output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
}

impl Detection {
    pub fn agnostic(image_id: ImageId, bbox: BoundingBox, score: f64) -> Self {
        Self {
            image_id,
            bbox,
            score,
            class_id: None,
        }
    }
}

/// Canonical class names plus a manual alias table. Class ids are indices
/// into `names`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>, aliases: BTreeMap<String, String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for name in &names {
            let canon = normalize_name(name, &BTreeMap::new());
            if !seen.insert(canon) {
                return Err(Error::Data(format!(
                    "duplicate class name `{name}` after normalization"
                )));
            }
        }
        for (raw, target) in &aliases {
            let target_canon = normalize_name(target, &BTreeMap::new());
            if !names
                .iter()
                .any(|n| normalize_name(n, &BTreeMap::new()) == target_canon)
            {
                return Err(Error::Data(format!(
                    "alias `{raw}` points at unknown class `{target}`"
                )));
            }
        }
        Ok(Self { names, aliases })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names.iter().map(|s| s.as_ref().to_string()).collect(),
            BTreeMap::new(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Normalized, alias-resolved form of class `id`.
    pub fn canonical(&self, id: usize) -> Option<String> {
        self.names.get(id).map(|n| normalize_name(n, &self.aliases))
    }

    /// Looks a raw name up after normalization and alias resolution.
    pub fn id_of(&self, raw: &str) -> Option<usize> {
        let canon = normalize_name(raw, &self.aliases);
        self.names
            .iter()
            .position(|n| normalize_name(n, &self.aliases) == canon)
    }

    pub fn ids_of<'a, I: IntoIterator<Item = &'a String>>(
        &self,
        names: I,
    ) -> Result<BTreeSet<usize>> {
        names
            .into_iter()
            .map(|n| {
                self.id_of(n)
                    .ok_or_else(|| Error::Data(format!("class `{n}` not in vocabulary")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    /// Pixel source, relative to the dataset's image directory.
    pub file_name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub vocabulary: ClassVocabulary,
}

impl DatasetIndex {
    pub fn validate(&self) -> Result<()> {
        let mut sizes = BTreeMap::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Data(format!("image {} has zero size", img.id)));
            }
            if sizes
                .insert(img.id, (img.width as f64, img.height as f64))
                .is_some()
            {
                return Err(Error::Data(format!("duplicate image id {}", img.id)));
            }
        }
        for ann in &self.annotations {
            let Some(&(w, h)) = sizes.get(&ann.image_id) else {
                return Err(Error::Data(format!(
                    "annotation {} references missing image {}",
                    ann.id, ann.image_id
                )));
            };
            if ann.class_id >= self.vocabulary.len() {
                return Err(Error::Data(format!(
                    "annotation {} has class id {} outside vocabulary",
                    ann.id, ann.class_id
                )));
            }
            if !ann.bbox.is_valid() || clip_box(&ann.bbox, w, h) != ann.bbox {
                return Err(Error::Data(format!(
                    "annotation {} box lies outside its image",
                    ann.id
                )));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Annotations grouped by image id, every image present (possibly empty).
    pub fn annotations_by_image(&self) -> BTreeMap<ImageId, Vec<&Annotation>> {
        let mut map: BTreeMap<ImageId, Vec<&Annotation>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for ann in &self.annotations {
            map.entry(ann.image_id).or_default().push(ann);
        }
        map
    }

    /// Keeps only annotations whose class is in `keep`, dropping images left
    /// without any annotation.
    pub fn filter_classes(&self, keep: &BTreeSet<usize>) -> DatasetIndex {
        let annotations: Vec<Annotation> = self
            .annotations
            .iter()
            .filter(|a| keep.contains(&a.class_id))
            .cloned()
            .collect();
        let used: BTreeSet<ImageId> = annotations.iter().map(|a| a.image_id).collect();
        DatasetIndex {
            images: self
                .images
                .iter()
                .filter(|i| used.contains(&i.id))
                .cloned()
                .collect(),
            annotations,
            vocabulary: self.vocabulary.clone(),
        }
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for a in &self.annotations {
            *counts.entry(a.class_id).or_insert(0) += 1;
        }
        counts
    }
}

/// Where image pixels come from.
#[derive(Debug, Clone)]
pub enum ImageStore {
    Directory(PathBuf),
    Memory(BTreeMap<ImageId, RgbImage>),
}

impl ImageStore {
    pub fn directory(path: impl AsRef<Path>) -> Self {
        ImageStore::Directory(path.as_ref().to_path_buf())
    }

    pub fn load(&self, record: &ImageRecord) -> Result<RgbImage> {
        match self {
            ImageStore::Directory(dir) => {
                let path = dir.join(&record.file_name);
                let img = image::open(&path)
                    .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
                    .to_rgb8();
                Ok(img)
            }
            ImageStore::Memory(map) => map
                .get(&record.id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("image {} not in memory store", record.id))),
        }
    }

    /// Writes every in-memory image as PNG under `dir` using the record names.
    pub fn save_to_dir(&self, index: &DatasetIndex, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for record in &index.images {
            let img = self.load(record)?;
            let path = dir.join(&record.file_name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            img.save(&path)?;
        }
        Ok(())
    }
}
