//! COCO-format ground truth and detection results.
//!
//! Everything here is immutable after construction. Lists are kept sorted by id
//! so that a dataset written back out and re-read compares equal to the original.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{fsutil, Error, Result};

/// Axis-aligned box in pixels, `[x, y, w, h]` with `(x, y)` the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Intersects the box with `[0, width] x [0, height]`.
    ///
    /// Axes already in bounds are returned untouched, so clamping is idempotent.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let (x, w) = clamp_axis(self.x, self.w, width);
        let (y, h) = clamp_axis(self.y, self.h, height);
        BBox::new(x, y, w, h)
    }
}

fn clamp_axis(start: f64, len: f64, limit: f64) -> (f64, f64) {
    if start >= 0.0 && start + len <= limit {
        return (start, len);
    }
    let lo = start.max(0.0);
    let hi = (start + len).min(limit);
    let mut len = hi - lo;
    while len > 0.0 && lo + len > hi {
        len = len.next_down();
    }
    (lo, len)
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Unicode lowercase, trimmed, internal whitespace runs collapsed to one space.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Category {
    pub id: u64,
    pub name: String,
    pub normalized_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    /// Ignore region (COCO `iscrowd = 1`): excluded from crops and neutral in matching.
    pub ignore: bool,
}

// Raw COCO JSON shapes. Unknown keys are ignored on read.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// A validated detection dataset with id indexes.
#[derive(Clone, Debug)]
pub struct Dataset {
    dataset_id: String,
    categories: Vec<Category>,
    images: Vec<Image>,
    annotations: Vec<Annotation>,
    category_pos: HashMap<u64, usize>,
    image_pos: HashMap<u64, usize>,
    anns_by_image: HashMap<u64, Vec<usize>>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.dataset_id == other.dataset_id
            && self.categories == other.categories
            && self.images == other.images
            && self.annotations == other.annotations
    }
}

impl Dataset {
    /// Validates and indexes a parsed COCO file.
    pub fn from_coco(dataset_id: impl Into<String>, coco: CocoFile) -> Result<Self> {
        let dataset_id = dataset_id.into();

        let mut categories = Vec::with_capacity(coco.categories.len());
        for c in coco.categories {
            let normalized_name = normalize_name(&c.name);
            if normalized_name.is_empty() {
                return Err(Error::MalformedFile(format!(
                    "category {} has an empty name",
                    c.id
                )));
            }
            categories.push(Category {
                id: c.id,
                name: c.name,
                normalized_name,
            });
        }
        categories.sort_by_key(|c| c.id);
        let category_pos = unique_index(categories.iter().map(|c| c.id), "category")?;

        let mut images: Vec<Image> = coco
            .images
            .into_iter()
            .map(|i| Image {
                id: i.id,
                width: i.width,
                height: i.height,
                file_name: i.file_name,
            })
            .collect();
        images.sort_by_key(|i| i.id);
        let image_pos = unique_index(images.iter().map(|i| i.id), "image")?;

        let mut annotations = Vec::with_capacity(coco.annotations.len());
        for a in coco.annotations {
            let image = image_pos.get(&a.image_id).map(|&p| &images[p]).ok_or_else(|| {
                Error::DanglingReference(format!(
                    "annotation {} references unknown image {}",
                    a.id, a.image_id
                ))
            })?;
            if !category_pos.contains_key(&a.category_id) {
                return Err(Error::DanglingReference(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                )));
            }
            let raw = BBox::from(a.bbox);
            if !raw.is_finite() {
                return Err(Error::MalformedFile(format!(
                    "annotation {} has a non-finite bbox",
                    a.id
                )));
            }
            let bbox = raw.clamp_to(f64::from(image.width), f64::from(image.height));
            if !(bbox.w > 0.0 && bbox.h > 0.0) {
                return Err(Error::DegenerateBox {
                    ann_id: a.id,
                    w: bbox.w,
                    h: bbox.h,
                });
            }
            annotations.push(Annotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox,
                ignore: a.iscrowd != 0,
            });
        }
        annotations.sort_by_key(|a| a.id);
        unique_index(annotations.iter().map(|a| a.id), "annotation")?;

        let mut anns_by_image: HashMap<u64, Vec<usize>> = HashMap::new();
        for (pos, a) in annotations.iter().enumerate() {
            anns_by_image.entry(a.image_id).or_default().push(pos);
        }

        Ok(Self {
            dataset_id,
            categories,
            images,
            annotations,
            category_pos,
            image_pos,
            anns_by_image,
        })
    }

    pub fn from_json(dataset_id: impl Into<String>, json: &str) -> Result<Self> {
        let coco: CocoFile =
            serde_json::from_str(json).map_err(|e| Error::MalformedFile(e.to_string()))?;
        Self::from_coco(dataset_id, coco)
    }

    pub fn to_coco(&self) -> CocoFile {
        CocoFile {
            images: self
                .images
                .iter()
                .map(|i| CocoImage {
                    id: i.id,
                    width: i.width,
                    height: i.height,
                    file_name: i.file_name.clone(),
                })
                .collect(),
            annotations: self.annotations.iter().map(to_coco_annotation).collect(),
            categories: self
                .categories
                .iter()
                .map(|c| CocoCategory {
                    id: c.id,
                    name: c.name.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_coco()).expect("COCO structs always serialize")
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.category_pos.get(&id).map(|&p| &self.categories[p])
    }

    pub fn image(&self, id: u64) -> Option<&Image> {
        self.image_pos.get(&id).map(|&p| &self.images[p])
    }

    /// All annotations on an image, ignore regions included, in id order.
    pub fn annotations_on(&self, image_id: u64) -> impl Iterator<Item = &Annotation> + '_ {
        self.anns_by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(move |&p| &self.annotations[p])
    }
}

pub(crate) fn to_coco_annotation(a: &Annotation) -> CocoAnnotation {
    CocoAnnotation {
        id: a.id,
        image_id: a.image_id,
        category_id: a.category_id,
        bbox: a.bbox.into(),
        iscrowd: u8::from(a.ignore),
    }
}

fn unique_index(ids: impl Iterator<Item = u64>, what: &str) -> Result<HashMap<u64, usize>> {
    let mut index = HashMap::new();
    for (pos, id) in ids.enumerate() {
        if index.insert(id, pos).is_some() {
            return Err(Error::DuplicateId(format!("{what} id {id}")));
        }
    }
    Ok(index)
}

/// Loads a COCO annotation file. The dataset id is the file stem.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_dataset_as(path, id)
}

pub fn load_dataset_as(path: &Path, dataset_id: impl Into<String>) -> Result<Dataset> {
    let text = fsutil::read_to_string(path)?;
    Dataset::from_json(dataset_id, &text).map_err(|e| match e {
        Error::MalformedFile(msg) => Error::MalformedFile(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Detections bound to one dataset. Order is the file order, which breaks score ties.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResultSet {
    pub dataset_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionResultSet {
    pub fn new(dataset: &Dataset, detections: Vec<Detection>) -> Result<Self> {
        for (i, d) in detections.iter().enumerate() {
            if dataset.image(d.image_id).is_none() {
                return Err(Error::DanglingReference(format!(
                    "detection {i} references unknown image {}",
                    d.image_id
                )));
            }
            if dataset.category(d.category_id).is_none() {
                return Err(Error::DanglingReference(format!(
                    "detection {i} references unknown category {}",
                    d.category_id
                )));
            }
            if !d.bbox.is_finite() || !d.score.is_finite() {
                return Err(Error::MalformedFile(format!(
                    "detection {i} has a non-finite bbox or score"
                )));
            }
        }
        Ok(Self {
            dataset_id: dataset.dataset_id().to_owned(),
            detections,
        })
    }

    pub fn from_json(json: &str, dataset: &Dataset) -> Result<Self> {
        let raw: Vec<CocoDetection> =
            serde_json::from_str(json).map_err(|e| Error::MalformedFile(e.to_string()))?;
        let detections = raw
            .into_iter()
            .map(|d| Detection {
                image_id: d.image_id,
                category_id: d.category_id,
                bbox: d.bbox.into(),
                score: d.score,
            })
            .collect();
        Self::new(dataset, detections)
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

pub fn load_detections(path: &Path, dataset: &Dataset) -> Result<DetectionResultSet> {
    let text = fsutil::read_to_string(path)?;
    DetectionResultSet::from_json(&text, dataset)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropEntry {
    pub ann_id: u64,
    pub file_name: String,
    pub bbox: BBox,
}

/// One entry per non-ignored annotation, ascending by annotation id.
pub fn crop_manifest(dataset: &Dataset) -> Vec<CropEntry> {
    dataset
        .annotations()
        .iter()
        .filter(|a| !a.ignore)
        .map(|a| CropEntry {
            ann_id: a.id,
            file_name: dataset
                .image(a.image_id)
                .map(|i| i.file_name.clone())
                .unwrap_or_default(),
            bbox: a.bbox,
        })
        .collect()
}
