//! Crack-instance datasets in COCO polygon format.
//!
//! [`load_coco`] parses and validates an annotation file into an immutable
//! [`DatasetSplit`]; images are decoded lazily through
//! [`DatasetSplit::load_image`].

pub mod coco;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{BBox, BinaryMask};
use coco::{CocoAnnotation, CocoCategory, CocoFile, CocoImage};

/// Maximum distance between an annotation's box and its polygon bounds.
pub const BBOX_POLYGON_TOLERANCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("annotation file does not parse at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("image {image_id}: {reason}")]
    InvalidImage { image_id: u64, reason: String },
    #[error("annotation {annotation_id}: {reason}")]
    InvalidAnnotation { annotation_id: u64, reason: String },
    #[error("categories: {0}")]
    InvalidCategories(String),
    #[error("{} image file(s) missing: {}", paths.len(), display_paths(paths))]
    MissingImages { paths: Vec<PathBuf> },
    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
    #[error("invalid split request: {0}")]
    InvalidSplit(String),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneLevel {
    /// Zoomed-in surface patch.
    Pixel,
    /// A whole structural member in view.
    Object,
    /// An entire building or bridge in view.
    Structural,
    #[default]
    Unknown,
}

impl SceneLevel {
    pub const ALL: [SceneLevel; 4] = [Self::Pixel, Self::Object, Self::Structural, Self::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pixel => "pixel",
            Self::Object => "object",
            Self::Structural => "structural",
            Self::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for SceneLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_path: String,
    pub width: u32,
    pub height: u32,
    pub scene_level: SceneLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Crack,
}

pub const CRACK_CATEGORY_NAME: &str = "crack";

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category: Category,
    pub polygon: Vec<(f64, f64)>,
    pub bbox: BBox,
    pub area: f64,
}

impl InstanceAnnotation {
    /// Builds an annotation whose box is the polygon's tight bounds.
    pub fn from_polygon(id: u64, image_id: u64, polygon: Vec<(f64, f64)>) -> Self {
        let bbox = polygon_bounds(&polygon);
        let area = polygon_area(&polygon);
        Self {
            id,
            image_id,
            category: Category::Crack,
            polygon,
            bbox,
            area,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Immutable, validated collection of images and their crack instances.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub image_root: PathBuf,
    records: Vec<ImageRecord>,
    annotations: BTreeMap<u64, Vec<InstanceAnnotation>>,
}

impl DatasetSplit {
    /// Validates every record/annotation invariant. Does not touch the
    /// filesystem; see [`DatasetSplit::check_files`].
    pub fn new(
        name: SplitName,
        image_root: impl Into<PathBuf>,
        records: Vec<ImageRecord>,
        annotations: Vec<InstanceAnnotation>,
    ) -> Result<Self, DatasetError> {
        let mut by_id: BTreeMap<u64, &ImageRecord> = BTreeMap::new();
        for r in &records {
            if r.width < 1 || r.height < 1 {
                return Err(DatasetError::InvalidImage {
                    image_id: r.id,
                    reason: format!("non-positive size {}x{}", r.width, r.height),
                });
            }
            if by_id.insert(r.id, r).is_some() {
                return Err(DatasetError::InvalidImage {
                    image_id: r.id,
                    reason: "duplicate image id".into(),
                });
            }
        }
        let mut seen = BTreeSet::new();
        let mut index: BTreeMap<u64, Vec<InstanceAnnotation>> = BTreeMap::new();
        for ann in annotations {
            if !seen.insert(ann.id) {
                return Err(invalid(ann.id, "duplicate annotation id"));
            }
            let Some(record) = by_id.get(&ann.image_id) else {
                return Err(invalid(ann.id, format!("image_id {} not in dataset", ann.image_id)));
            };
            validate_annotation(&ann, record.width, record.height)?;
            index.entry(ann.image_id).or_default().push(ann);
        }
        let mut records = records;
        records.sort_by_key(|r| r.id);
        Ok(Self {
            name,
            image_root: image_root.into(),
            records,
            annotations: index,
        })
    }

    pub fn with_name(mut self, name: SplitName) -> Self {
        self.name = name;
        self
    }

    /// Records in ascending id order.
    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn record(&self, id: u64) -> Option<&ImageRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn annotations(&self, image_id: u64) -> &[InstanceAnnotation] {
        self.annotations.get(&image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn annotation_index(&self) -> &BTreeMap<u64, Vec<InstanceAnnotation>> {
        &self.annotations
    }

    pub fn all_annotations(&self) -> impl Iterator<Item = &InstanceAnnotation> {
        self.annotations.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.image_root.join(&record.file_path)
    }

    /// Every image path that does not exist on disk.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.records
            .iter()
            .map(|r| self.image_path(r))
            .filter(|p| !p.is_file())
            .collect()
    }

    pub fn check_files(&self) -> Result<(), DatasetError> {
        let paths = self.missing_files();
        if paths.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::MissingImages { paths })
        }
    }

    /// Decodes an image as 8-bit RGB.
    pub fn load_image(&self, record: &ImageRecord) -> Result<RgbImage, DatasetError> {
        let path = self.image_path(record);
        let img = image::open(&path).map_err(|e| DatasetError::ImageDecode {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        if rgb.width() != record.width || rgb.height() != record.height {
            return Err(DatasetError::ImageDecode {
                path,
                message: format!(
                    "decoded size {}x{} differs from annotated {}x{}",
                    rgb.width(),
                    rgb.height(),
                    record.width,
                    record.height
                ),
            });
        }
        Ok(rgb)
    }

    /// Rasterized masks for every instance of an image, in annotation order.
    pub fn masks(&self, record: &ImageRecord) -> Result<Vec<BinaryMask>, DatasetError> {
        self.annotations(record.id)
            .iter()
            .map(|a| rasterize_mask(a, record.width as usize, record.height as usize))
            .collect()
    }

    /// Back to the interchange format.
    pub fn to_coco(&self) -> CocoFile {
        CocoFile {
            images: self
                .records
                .iter()
                .map(|r| CocoImage {
                    id: r.id,
                    file_name: r.file_path.clone(),
                    width: r.width,
                    height: r.height,
                    scene_level: (r.scene_level != SceneLevel::Unknown).then(|| r.scene_level.to_string()),
                })
                .collect(),
            annotations: self
                .all_annotations()
                .map(|a| CocoAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: 1,
                    segmentation: serde_json::json!([a.polygon.iter().flat_map(|&(x, y)| [x, y]).collect::<Vec<_>>()]),
                    bbox: a.bbox.to_xywh(),
                    area: a.area,
                    iscrowd: 0,
                })
                .collect(),
            categories: vec![CocoCategory {
                id: 1,
                name: CRACK_CATEGORY_NAME.into(),
                supercategory: None,
            }],
        }
    }

    pub fn write_coco(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(&self.to_coco()).expect("COCO structures serialize");
        fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// SHA-256 over the canonical interchange form; identifies the data an
    /// evaluation was computed on.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&self.to_coco()).expect("COCO structures serialize");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn invalid(annotation_id: u64, reason: impl Into<String>) -> DatasetError {
    DatasetError::InvalidAnnotation {
        annotation_id,
        reason: reason.into(),
    }
}

fn validate_annotation(ann: &InstanceAnnotation, width: u32, height: u32) -> Result<(), DatasetError> {
    if ann.polygon.len() < 3 {
        return Err(invalid(ann.id, format!("polygon has {} vertices, need at least 3", ann.polygon.len())));
    }
    if ann.polygon.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(invalid(ann.id, "non-finite polygon vertex"));
    }
    let b = ann.bbox;
    let (w, h) = (width as f64, height as f64);
    if !(0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= w && 0.0 <= b.y1 && b.y1 < b.y2 && b.y2 <= h) {
        return Err(invalid(
            ann.id,
            format!("bbox ({}, {}, {}, {}) outside image {}x{} or empty", b.x1, b.y1, b.x2, b.y2, width, height),
        ));
    }
    let bounds = polygon_bounds(&ann.polygon);
    if bounds.max_abs_diff(&b) > BBOX_POLYGON_TOLERANCE {
        return Err(invalid(
            ann.id,
            format!(
                "bbox ({}, {}, {}, {}) differs from polygon bounds ({}, {}, {}, {}) by more than {BBOX_POLYGON_TOLERANCE} px",
                b.x1, b.y1, b.x2, b.y2, bounds.x1, bounds.y1, bounds.x2, bounds.y2
            ),
        ));
    }
    if !(ann.area.is_finite() && ann.area >= 0.0) {
        return Err(invalid(ann.id, format!("invalid area {}", ann.area)));
    }
    rasterize_mask(ann, width as usize, height as usize)?;
    Ok(())
}

pub fn polygon_bounds(polygon: &[(f64, f64)]) -> BBox {
    let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in polygon {
        b.x1 = b.x1.min(x);
        b.y1 = b.y1.min(y);
        b.x2 = b.x2.max(x);
        b.y2 = b.y2.max(y);
    }
    b
}

/// Shoelace area.
pub fn polygon_area(polygon: &[(f64, f64)]) -> f64 {
    let n = polygon.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = polygon[i];
            let (x1, y1) = polygon[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    0.5 * twice.abs()
}

/// Pixel `(row, col)` is set iff its center lies inside the polygon under
/// the even-odd rule.
pub fn rasterize_mask(ann: &InstanceAnnotation, width: usize, height: usize) -> Result<BinaryMask, DatasetError> {
    let mask = rasterize_polygon(&ann.polygon, width, height);
    if mask.is_empty() {
        return Err(invalid(ann.id, "polygon covers no pixel center"));
    }
    Ok(mask)
}

pub fn rasterize_polygon(polygon: &[(f64, f64)], width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    let n = polygon.len();
    let mut crossings = Vec::with_capacity(n);
    for row in 0..height {
        let cy = row as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (xi, yi) = polygon[i];
            let (xj, yj) = polygon[(i + n - 1) % n];
            if (yi > cy) != (yj > cy) {
                crossings.push((xj - xi) * (cy - yi) / (yj - yi) + xi);
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        for col in 0..width {
            let cx = col as f64 + 0.5;
            // number of crossings strictly to the right of the center
            let right = crossings.len() - crossings.partition_point(|&x| x <= cx);
            if right % 2 == 1 {
                mask.set(row, col, true);
            }
        }
    }
    mask
}

/// Reads, parses and validates an annotation file. The returned split is
/// named [`SplitName::Train`]; rename with [`DatasetSplit::with_name`].
pub fn load_coco(annotation_file: &Path, image_root: &Path) -> Result<DatasetSplit, DatasetError> {
    let text = fs::read_to_string(annotation_file).map_err(|source| DatasetError::Io {
        path: annotation_file.to_path_buf(),
        source,
    })?;
    let split = parse_coco(&text, image_root)?;
    split.check_files()?;
    Ok(split)
}

/// Parses and validates without checking image files.
pub fn parse_coco(text: &str, image_root: &Path) -> Result<DatasetSplit, DatasetError> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        offset: coco::byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    from_coco(file, image_root)
}

pub fn from_coco(file: CocoFile, image_root: &Path) -> Result<DatasetSplit, DatasetError> {
    let crack_id = match file.categories.as_slice() {
        [c] if c.name == CRACK_CATEGORY_NAME => c.id,
        [c] => return Err(DatasetError::InvalidCategories(format!("expected `crack`, found `{}`", c.name))),
        cs => {
            return Err(DatasetError::InvalidCategories(format!(
                "expected exactly one category, found {}",
                cs.len()
            )))
        }
    };
    let mut records = Vec::with_capacity(file.images.len());
    for img in file.images {
        let scene_level = match img.scene_level.as_deref() {
            None => SceneLevel::Unknown,
            Some(s) => SceneLevel::parse(s).ok_or_else(|| DatasetError::InvalidImage {
                image_id: img.id,
                reason: format!("unknown scene_level `{s}`"),
            })?,
        };
        records.push(ImageRecord {
            id: img.id,
            file_path: img.file_name,
            width: img.width,
            height: img.height,
            scene_level,
        });
    }
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for a in file.annotations {
        if a.category_id != crack_id {
            return Err(invalid(a.id, format!("category_id {} is not the crack category {crack_id}", a.category_id)));
        }
        if a.iscrowd != 0 {
            return Err(invalid(a.id, "crowd annotations are not supported"));
        }
        let polygon = parse_polygon(a.id, &a.segmentation)?;
        let [x, y, w, h] = a.bbox;
        annotations.push(InstanceAnnotation {
            id: a.id,
            image_id: a.image_id,
            category: Category::Crack,
            polygon,
            bbox: BBox::from_xywh(x, y, w, h),
            area: a.area,
        });
    }
    DatasetSplit::new(SplitName::Train, image_root, records, annotations)
}

fn parse_polygon(id: u64, seg: &serde_json::Value) -> Result<Vec<(f64, f64)>, DatasetError> {
    let parts = seg
        .as_array()
        .ok_or_else(|| invalid(id, "segmentation must be a list of polygons (RLE is not supported)"))?;
    let [flat] = parts.as_slice() else {
        return Err(invalid(id, format!("expected exactly one polygon, found {}", parts.len())));
    };
    let coords = flat
        .as_array()
        .ok_or_else(|| invalid(id, "polygon must be a flat list of coordinates"))?
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| invalid(id, "polygon coordinate is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    if coords.len() % 2 != 0 {
        return Err(invalid(id, "polygon has an odd number of coordinates"));
    }
    Ok(coords.chunks(2).map(|c| (c[0], c[1])).collect())
}

/// Partitions `all` into disjoint, exhaustive train/val/test splits.
///
/// Split sizes are `round(n · fraction)`; the test split takes the rest and
/// is only requested when the fractions sum below 1. Every requested split
/// receives at least one image. Membership depends only on `seed`.
pub fn split_dataset(
    all: &DatasetSplit,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit), DatasetError> {
    let (ft, fv) = fractions;
    if !(ft > 0.0 && fv > 0.0) {
        return Err(DatasetError::InvalidSplit(format!("fractions must be positive, got ({ft}, {fv})")));
    }
    let sum = ft + fv;
    if sum > 1.0 + 1e-12 {
        return Err(DatasetError::InvalidSplit(format!("fractions sum to {sum} > 1")));
    }
    let wants_test = sum < 1.0 - 1e-12;
    let requested = if wants_test { 3 } else { 2 };
    let n = all.len();
    if n < requested {
        return Err(DatasetError::InvalidSplit(format!(
            "{n} record(s) cannot fill {requested} splits"
        )));
    }
    let mut n_train = ((n as f64) * ft).round() as usize;
    let mut n_val = ((n as f64) * fv).round() as usize;
    n_train = n_train.clamp(1, n);
    n_val = n_val.clamp(1, n);
    let min_test = usize::from(wants_test);
    while n_train + n_val + min_test > n {
        if n_train >= n_val && n_train > 1 {
            n_train -= 1;
        } else {
            n_val -= 1;
        }
    }
    if !wants_test {
        n_val = n - n_train;
    }

    let mut ids: Vec<u64> = all.records.iter().map(|r| r.id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let parts = [
        (SplitName::Train, &ids[..n_train]),
        (SplitName::Val, &ids[n_train..n_train + n_val]),
        (SplitName::Test, &ids[n_train + n_val..]),
    ];
    let mut out = parts.into_iter().map(|(name, members)| {
        let members: BTreeSet<u64> = members.iter().copied().collect();
        let records = all.records.iter().filter(|r| members.contains(&r.id)).cloned().collect();
        let anns = members.iter().flat_map(|id| all.annotations(*id).iter().cloned()).collect();
        DatasetSplit::new(name, all.image_root.clone(), records, anns)
    });
    Ok((out.next().unwrap()?, out.next().unwrap()?, out.next().unwrap()?))
}
