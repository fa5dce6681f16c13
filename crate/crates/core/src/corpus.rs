//! A dataset together with its pixels, plus the long-tailed glyph corpus
//! builder used by the desk experiments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    self, assign_frequency_buckets, Category, Dataset, DatasetError, ImageRecord,
    InstanceAnnotation, Source,
};
use crate::geometry::{iou_unchecked, BBox};
use crate::glyph::{paint_background, render_glyph, GlyphPalette};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {image_id}: pixel buffer {got:?} does not match record size {expected:?}")]
    SizeMismatch { image_id: u64, expected: (u32, u32), got: (u32, u32) },
    #[error("image {0} has no pixel buffer")]
    MissingPixels(u64),
    #[error("toy corpus: {0}")]
    Layout(String),
}

/// Annotations plus decoded pixels, keyed by image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub dataset: Dataset,
    pub pixels: BTreeMap<u64, RgbImage>,
}

impl Corpus {
    pub fn new(dataset: Dataset, pixels: BTreeMap<u64, RgbImage>) -> Result<Self, CorpusError> {
        let c = Self { dataset, pixels };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.dataset.validate()?;
        for im in &self.dataset.images {
            let px = self.pixels.get(&im.id).ok_or(CorpusError::MissingPixels(im.id))?;
            if px.dimensions() != (im.width, im.height) {
                return Err(CorpusError::SizeMismatch {
                    image_id: im.id,
                    expected: (im.width, im.height),
                    got: px.dimensions(),
                });
            }
        }
        Ok(())
    }

    pub fn pixels_of(&self, image_id: u64) -> Result<&RgbImage, CorpusError> {
        self.pixels.get(&image_id).ok_or(CorpusError::MissingPixels(image_id))
    }

    /// Restrict pixels to the images still present in `dataset`.
    pub fn with_dataset(&self, dataset: Dataset) -> Corpus {
        let pixels = dataset
            .images
            .iter()
            .filter_map(|im| self.pixels.get(&im.id).map(|p| (im.id, p.clone())))
            .collect();
        Corpus { dataset, pixels }
    }

    pub fn empty_like(&self, source: Source) -> Corpus {
        Corpus {
            dataset: Dataset { categories: self.dataset.categories.clone(), source, ..Dataset::default() },
            pixels: BTreeMap::new(),
        }
    }
}

/// Write `<json_path>` and every image as PNG at its `file_path`, relative to
/// the json's directory.
pub fn save_corpus(corpus: &Corpus, json_path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let json_path = json_path.as_ref();
    let root = json_path.parent().unwrap_or(Path::new("."));
    for im in &corpus.dataset.images {
        let px = corpus.pixels_of(im.id)?;
        let path = root.join(&im.file_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|source| CorpusError::Io { path: parent.to_path_buf(), source })?;
        }
        px.save(&path).map_err(|source| CorpusError::Image { path, source })?;
    }
    dataset::save_dataset(&corpus.dataset, json_path)?;
    Ok(())
}

pub fn load_corpus(json_path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let json_path = json_path.as_ref();
    let root = json_path.parent().unwrap_or(Path::new("."));
    let dataset = dataset::load_dataset(json_path)?;
    let mut pixels = BTreeMap::new();
    for im in &dataset.images {
        let path = root.join(&im.file_path);
        let px = image::open(&path).map_err(|source| CorpusError::Image { path, source })?;
        pixels.insert(im.id, px.to_rgb8());
    }
    Corpus::new(dataset, pixels)
}

/// Layout of a generated glyph corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub image_size: u32,
    pub num_images: usize,
    /// `(name, number of images containing the category)`.
    pub categories: Vec<(String, usize)>,
    pub max_objects_per_image: usize,
    /// Nominal glyph side lengths; glyphs are centered on multiples of `grid`.
    pub glyph_sizes: Vec<u32>,
    pub grid: u32,
    pub position_jitter: f64,
    pub size_jitter: f64,
    pub hue_jitter: f64,
    pub seed: u64,
    /// First image id; lets train and test corpora use disjoint ids.
    pub first_image_id: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_images: 200,
            categories: long_tailed_categories(),
            max_objects_per_image: 3,
            glyph_sizes: vec![16, 24],
            grid: 8,
            position_jitter: 2.0,
            size_jitter: 2.0,
            hue_jitter: 0.7,
            seed: 0,
            first_image_id: 1,
        }
    }
}

/// Six categories: two frequent, two common, two rare (by images containing
/// them). Each rare hue sits next to a frequent one on the color wheel.
pub fn long_tailed_categories() -> Vec<(String, usize)> {
    [
        ("red_square", 130),
        ("yellow_disk", 6),
        ("green_diamond", 115),
        ("cyan_ring", 45),
        ("blue_cross", 25),
        ("magenta_triangle", 4),
    ]
        .iter()
        .map(|&(n, c)| (n.to_string(), c))
        .collect()
}

impl ToyCorpusConfig {
    /// Same categories with every count set to `per_category`.
    pub fn balanced(&self, num_images: usize, per_category: usize, seed: u64) -> Self {
        Self {
            num_images,
            categories: self.categories.iter().map(|(n, _)| (n.clone(), per_category)).collect(),
            seed,
            ..self.clone()
        }
    }

    pub fn palette(&self) -> GlyphPalette {
        let ids: Vec<u64> = (1..=self.categories.len() as u64).collect();
        GlyphPalette::evenly_spaced(&ids, self.hue_jitter)
    }
}

/// Build a glyph corpus in which category `k` (id `k + 1`) appears in exactly
/// the requested number of images, one instance per image.
pub fn build_toy_corpus(cfg: &ToyCorpusConfig) -> Result<Corpus, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let palette = cfg.palette();
    let size = cfg.image_size as f64;
    let n_img = cfg.num_images;
    if n_img == 0 {
        return Err(CorpusError::Layout("num_images must be positive".into()));
    }

    let mut boxes: Vec<Vec<(u64, BBox<f64>)>> = vec![Vec::new(); n_img];
    let mut order: Vec<usize> = (0..cfg.categories.len()).collect();
    order.sort_by_key(|&k| std::cmp::Reverse(cfg.categories[k].1));
    for k in order {
        let (name, want) = &cfg.categories[k];
        let cat_id = k as u64 + 1;
        let mut candidates: Vec<usize> =
            (0..n_img).filter(|&i| boxes[i].len() < cfg.max_objects_per_image).collect();
        candidates.shuffle(&mut rng);
        // Prefer emptier images so objects spread out.
        candidates.sort_by_key(|&i| boxes[i].len());
        let mut placed = 0;
        for i in candidates {
            if placed == *want {
                break;
            }
            if let Some(b) = place_box(cfg, &boxes[i], &mut rng) {
                boxes[i].push((cat_id, b));
                placed += 1;
            }
        }
        if placed < *want {
            return Err(CorpusError::Layout(format!(
                "could only place {placed} of {want} images for {name}"
            )));
        }
    }

    let mut images = Vec::with_capacity(n_img);
    let mut annotations = Vec::new();
    let mut pixels = BTreeMap::new();
    let mut ann_id = cfg.first_image_id * 16;
    for (i, objs) in boxes.iter().enumerate() {
        let id = cfg.first_image_id + i as u64;
        let mut img = RgbImage::new(cfg.image_size, cfg.image_size);
        paint_background(&mut img, &mut rng);
        for &(cat, b) in objs {
            let glyph = palette.get(cat).expect("palette covers categories");
            let app = palette.sample_appearance(glyph, &mut rng);
            render_glyph(&mut img, &b, glyph.shape, app, &mut rng);
            annotations.push(InstanceAnnotation::new(ann_id, id, cat, b));
            ann_id += 1;
        }
        images.push(ImageRecord::new(id, cfg.image_size, cfg.image_size, format!("images/{id:06}.png")));
        pixels.insert(id, img);
    }
    let categories = cfg
        .categories
        .iter()
        .enumerate()
        .map(|(k, (n, _))| Category::new(k as u64 + 1, n.clone()))
        .collect();
    let dataset = Dataset::new(images, annotations, categories, Source::Real)?;
    debug_assert!(dataset.images.iter().all(|im| im.width as f64 == size));
    Corpus::new(assign_frequency_buckets(&dataset), pixels)
}

fn place_box<R: Rng + ?Sized>(
    cfg: &ToyCorpusConfig,
    existing: &[(u64, BBox<f64>)],
    rng: &mut R,
) -> Option<BBox<f64>> {
    let size = cfg.image_size as f64;
    let grid = cfg.grid as f64;
    for _ in 0..64 {
        let nominal = cfg.glyph_sizes[rng.random_range(0..cfg.glyph_sizes.len())] as f64;
        let side = (nominal + rng.random_range(-cfg.size_jitter..=cfg.size_jitter)).round();
        let cells = (size / grid) as u32;
        let cx = (rng.random_range(0..cells) as f64 + 0.5) * grid
            + rng.random_range(-cfg.position_jitter..=cfg.position_jitter).round();
        let cy = (rng.random_range(0..cells) as f64 + 0.5) * grid
            + rng.random_range(-cfg.position_jitter..=cfg.position_jitter).round();
        let b = BBox::new((cx - side / 2.0).round(), (cy - side / 2.0).round(), side, side);
        if !b.within(size, size) {
            continue;
        }
        // Keep a two pixel gap between glyphs.
        let grown = BBox::new(b.x - 2.0, b.y - 2.0, b.w + 4.0, b.h + 4.0);
        if existing.iter().all(|(_, o)| iou_unchecked(&grown, o) == 0.0) {
            return Some(b);
        }
    }
    None
}
