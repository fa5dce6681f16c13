//! COCO-format detection datasets: loading, validation, persistence,
//! subsampling and rare/common/frequent bucketing.
//!
//! Standard COCO keys are read and written as-is. Everything this crate adds
//! (image source, generation seed, aesthetic score, filter flags, mock
//! corruption metadata) lives under the vendor key [`EXT_KEY`] on each record,
//! so other COCO tooling still parses the files.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

/// Vendor extension key used on every COCO record.
pub const EXT_KEY: &str = "synthdet";

/// Tolerance for box-inside-image checks on float coordinates.
const BOUNDS_EPS: f64 = 1e-6;

pub type Box64 = BBox<f64>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid COCO json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("annotation {annotation_id} references missing image {image_id}")]
    DanglingImage { annotation_id: u64, image_id: u64 },
    #[error("annotation {annotation_id} references missing category {category_id}")]
    DanglingCategory { annotation_id: u64, category_id: u64 },
    #[error("image {image_id} has invalid size {width}x{height}")]
    InvalidImageSize { image_id: u64, width: u32, height: u32 },
    #[error("annotation {annotation_id} has zero-area or non-finite bbox {bbox:?}")]
    DegenerateBox { annotation_id: u64, bbox: Box64 },
    #[error("annotation {annotation_id} bbox {bbox:?} exceeds image {image_id} bounds")]
    OutOfBounds { annotation_id: u64, image_id: u64, bbox: Box64 },
    #[error("category {category_id}: bucket {bucket:?} inconsistent with image_count {image_count}")]
    BucketMismatch { category_id: u64, bucket: FrequencyBucket, image_count: u64 },
    #[error("subsample fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("subsample fraction {fraction} of {total} images selects no image")]
    EmptySubsample { fraction: f64, total: usize },
    #[error("operation requires a {expected:?} dataset")]
    WrongSource { expected: Source },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyBucket {
    Rare,
    Common,
    Frequent,
}

/// Failure modes injected by the mock generator; ground truth for filtering tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    WrongCategory,
    Blank,
    Misplaced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_path: String,
    pub source: Source,
    pub aesthetic_score: Option<f64>,
    /// Set when the aesthetic scorer failed on this image.
    pub scoring_failed: bool,
    pub generation_seed: Option<u64>,
    /// Real image this synthetic one was generated from.
    pub parent_id: Option<u64>,
    /// Unannotated instances the mock generator added.
    pub hallucinations: u32,
}

impl ImageRecord {
    pub fn new(id: u64, width: u32, height: u32, file_path: impl Into<String>) -> Self {
        Self {
            id,
            width,
            height,
            file_path: file_path.into(),
            source: Source::Real,
            aesthetic_score: None,
            scoring_failed: false,
            generation_seed: None,
            parent_id: None,
            hallucinations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: Box64,
    pub filtered_out: bool,
    pub corruption: Option<CorruptionKind>,
    /// Passed through untouched.
    pub segmentation: Option<serde_json::Value>,
}

impl InstanceAnnotation {
    pub fn new(id: u64, image_id: u64, category_id: u64, bbox: Box64) -> Self {
        Self {
            id,
            image_id,
            category_id,
            bbox,
            filtered_out: false,
            corruption: None,
            segmentation: None,
        }
    }
}

/// Image-count thresholds separating rare / common / frequent categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketThresholds {
    pub rare_max: u64,
    pub common_max: u64,
}

impl Default for BucketThresholds {
    fn default() -> Self {
        Self { rare_max: 10, common_max: 100 }
    }
}

impl BucketThresholds {
    pub fn bucket(&self, image_count: u64) -> FrequencyBucket {
        if image_count <= self.rare_max {
            FrequencyBucket::Rare
        } else if image_count <= self.common_max {
            FrequencyBucket::Common
        } else {
            FrequencyBucket::Frequent
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub id: u64,
    pub name: String,
    pub frequency_bucket: FrequencyBucket,
    pub image_count: u64,
}

impl Category {
    pub fn new(id: u64, name: impl Into<String>) -> Self {
        Self { id, name: name.into(), frequency_bucket: FrequencyBucket::Rare, image_count: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<InstanceAnnotation>,
    pub categories: Vec<Category>,
    pub source: Source,
}

impl Dataset {
    pub fn new(
        images: Vec<ImageRecord>,
        annotations: Vec<InstanceAnnotation>,
        categories: Vec<Category>,
        source: Source,
    ) -> Result<Self, DatasetError> {
        let d = Self { images, annotations, categories, source };
        d.validate()?;
        Ok(d)
    }

    /// Check every referential and geometric invariant.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut images = HashMap::with_capacity(self.images.len());
        for im in &self.images {
            if im.width == 0 || im.height == 0 {
                return Err(DatasetError::InvalidImageSize {
                    image_id: im.id,
                    width: im.width,
                    height: im.height,
                });
            }
            if images.insert(im.id, im).is_some() {
                return Err(DatasetError::DuplicateId { kind: "image", id: im.id });
            }
        }
        let mut cats = HashSet::with_capacity(self.categories.len());
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(DatasetError::DuplicateId { kind: "category", id: c.id });
            }
        }
        let mut ann_ids = HashSet::with_capacity(self.annotations.len());
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(DatasetError::DuplicateId { kind: "annotation", id: a.id });
            }
            let Some(im) = images.get(&a.image_id) else {
                return Err(DatasetError::DanglingImage { annotation_id: a.id, image_id: a.image_id });
            };
            if !cats.contains(&a.category_id) {
                return Err(DatasetError::DanglingCategory {
                    annotation_id: a.id,
                    category_id: a.category_id,
                });
            }
            let b = a.bbox;
            let finite = [b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite());
            if !finite || b.is_degenerate() {
                return Err(DatasetError::DegenerateBox { annotation_id: a.id, bbox: b });
            }
            if b.x < -BOUNDS_EPS
                || b.y < -BOUNDS_EPS
                || b.x1() > im.width as f64 + BOUNDS_EPS
                || b.y1() > im.height as f64 + BOUNDS_EPS
            {
                return Err(DatasetError::OutOfBounds {
                    annotation_id: a.id,
                    image_id: a.image_id,
                    bbox: b,
                });
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Annotations grouped by image id, in dataset order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&InstanceAnnotation>> {
        let mut map: BTreeMap<u64, Vec<&InstanceAnnotation>> =
            self.images.iter().map(|im| (im.id, Vec::new())).collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    pub fn annotations_of(&self, image_id: u64) -> Vec<&InstanceAnnotation> {
        self.annotations.iter().filter(|a| a.image_id == image_id).collect()
    }

    /// Keep only the images whose id is in `keep`, with their annotations.
    pub fn retain_images(&self, keep: &BTreeSet<u64>) -> Dataset {
        Dataset {
            images: self.images.iter().filter(|im| keep.contains(&im.id)).cloned().collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| keep.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
            source: self.source,
        }
    }

    /// Category id to dense index `0..categories.len()`, in category order.
    pub fn category_index(&self) -> HashMap<u64, usize> {
        self.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect()
    }
}

// ---------------------------------------------------------------------------
// COCO wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
struct CocoFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<serde_json::Value>,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
    #[serde(rename = "synthdet", default)]
    ext: DatasetExt,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct DatasetExt {
    #[serde(default)]
    source: Source,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
    #[serde(rename = "synthdet", default)]
    ext: ImageExt,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ImageExt {
    #[serde(default)]
    source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aesthetic_score: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    scoring_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generation_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent_id: Option<u64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    hallucinations: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: Box64,
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentation: Option<serde_json::Value>,
    #[serde(rename = "synthdet", default)]
    ext: AnnotationExt,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct AnnotationExt {
    #[serde(default)]
    filtered_out: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corruption: Option<CorruptionKind>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(rename = "synthdet", default)]
    ext: Option<CategoryExt>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryExt {
    frequency_bucket: FrequencyBucket,
    image_count: u64,
}

impl From<CocoFile> for Dataset {
    fn from(f: CocoFile) -> Self {
        Dataset {
            images: f
                .images
                .into_iter()
                .map(|im| ImageRecord {
                    id: im.id,
                    width: im.width,
                    height: im.height,
                    file_path: im.file_name,
                    source: im.ext.source,
                    aesthetic_score: im.ext.aesthetic_score,
                    scoring_failed: im.ext.scoring_failed,
                    generation_seed: im.ext.generation_seed,
                    parent_id: im.ext.parent_id,
                    hallucinations: im.ext.hallucinations,
                })
                .collect(),
            annotations: f
                .annotations
                .into_iter()
                .map(|a| InstanceAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: a.bbox,
                    filtered_out: a.ext.filtered_out,
                    corruption: a.ext.corruption,
                    segmentation: a.segmentation,
                })
                .collect(),
            categories: f
                .categories
                .into_iter()
                .map(|c| {
                    let (frequency_bucket, image_count) = match c.ext {
                        Some(e) => (e.frequency_bucket, e.image_count),
                        None => (FrequencyBucket::Rare, 0),
                    };
                    Category { id: c.id, name: c.name, frequency_bucket, image_count }
                })
                .collect(),
            source: f.ext.source,
        }
    }
}

impl From<&Dataset> for CocoFile {
    fn from(d: &Dataset) -> Self {
        CocoFile {
            info: None,
            images: d
                .images
                .iter()
                .map(|im| CocoImage {
                    id: im.id,
                    width: im.width,
                    height: im.height,
                    file_name: im.file_path.clone(),
                    ext: ImageExt {
                        source: im.source,
                        aesthetic_score: im.aesthetic_score,
                        scoring_failed: im.scoring_failed,
                        generation_seed: im.generation_seed,
                        parent_id: im.parent_id,
                        hallucinations: im.hallucinations,
                    },
                })
                .collect(),
            annotations: d
                .annotations
                .iter()
                .map(|a| CocoAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: a.bbox,
                    area: a.bbox.area(),
                    iscrowd: 0,
                    segmentation: a.segmentation.clone(),
                    ext: AnnotationExt { filtered_out: a.filtered_out, corruption: a.corruption },
                })
                .collect(),
            categories: d
                .categories
                .iter()
                .map(|c| CocoCategory {
                    id: c.id,
                    name: c.name.clone(),
                    ext: Some(CategoryExt {
                        frequency_bucket: c.frequency_bucket,
                        image_count: c.image_count,
                    }),
                })
                .collect(),
            ext: DatasetExt { source: d.source },
        }
    }
}

/// Parse a COCO JSON string; all invariants are checked.
pub fn from_json_str(s: &str) -> Result<Dataset, serde_json::Error> {
    let f: CocoFile = serde_json::from_str(s)?;
    Ok(f.into())
}

pub fn to_json_string(d: &Dataset) -> String {
    serde_json::to_string_pretty(&CocoFile::from(d)).expect("dataset serializes")
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let d = from_json_str(&text)
        .map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })?;
    d.validate()?;
    for c in &d.categories {
        // Plain COCO files carry no counts; only check what we wrote ourselves.
        if c.image_count > 0 && BucketThresholds::default().bucket(c.image_count) != c.frequency_bucket
        {
            return Err(DatasetError::BucketMismatch {
                category_id: c.id,
                bucket: c.frequency_bucket,
                image_count: c.image_count,
            });
        }
    }
    Ok(d)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|source| DatasetError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, to_json_string(d))
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

/// Uniform image subsample without replacement; keeps all and only the
/// selected images' annotations. Size is `fraction * |images|` rounded half-up.
pub fn subsample(d: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if d.source != Source::Real {
        return Err(DatasetError::WrongSource { expected: Source::Real });
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let total = d.images.len();
    let n = ((fraction * total as f64) + 0.5).floor() as usize;
    let n = n.min(total);
    if n == 0 {
        return Err(DatasetError::EmptySubsample { fraction, total });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, total, n);
    let keep: BTreeSet<u64> = picked.iter().map(|i| d.images[i].id).collect();
    Ok(d.retain_images(&keep))
}

/// Recount distinct images per category and assign buckets.
pub fn assign_frequency_buckets(d: &Dataset) -> Dataset {
    assign_frequency_buckets_with(d, BucketThresholds::default())
}

pub fn assign_frequency_buckets_with(d: &Dataset, thresholds: BucketThresholds) -> Dataset {
    let mut images_per_cat: HashMap<u64, HashSet<u64>> = HashMap::new();
    for a in &d.annotations {
        images_per_cat.entry(a.category_id).or_default().insert(a.image_id);
    }
    let mut out = d.clone();
    for c in &mut out.categories {
        c.image_count = images_per_cat.get(&c.id).map_or(0, |s| s.len() as u64);
        c.frequency_bucket = thresholds.bucket(c.image_count);
    }
    out
}
