//! Grounded inpainting: the generator contract, a deterministic glyph-based
//! mock used by every test and desk experiment, and an HTTP adapter for a real
//! inference service.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::dataset::{
    Box64, CorruptionKind, Dataset, DatasetError, ImageRecord, InstanceAnnotation, Source,
};
use crate::geometry::{iou_unchecked, BBox};
use crate::glyph::{fill_box, render_glyph, surrounding_color, GlyphPalette};
use crate::http::{self, HttpError, RetryPolicy};
use crate::prompt::{build_prompts, PromptError};

/// Smallest box side the mock can draw a glyph into.
pub const MIN_GLYPH_SIDE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("box {index} is {w}x{h}, below the {MIN_GLYPH_SIDE}px glyph minimum")]
    BoxTooSmall { index: usize, w: f64, h: f64 },
    #[error("box {index} lies outside the {width}x{height} image")]
    BoxOutOfBounds { index: usize, width: u32, height: u32 },
    #[error("no glyph for category {0}")]
    UnknownCategory(u64),
    #[error("generator returned {got:?}, expected {expected:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("image {image_id}: {source}")]
    Image {
        image_id: u64,
        #[source]
        source: Box<GenerationError>,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("image {0} has no pixels")]
    MissingPixels(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpec {
    pub bbox: Box64,
    pub category_id: u64,
    pub label: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub image: RgbImage,
    pub boxes: Vec<BoxSpec>,
    pub image_prompt: String,
    pub seed: u64,
}

impl GenerationRequest {
    fn check_bounds(&self) -> Result<(), GenerationError> {
        let (w, h) = self.image.dimensions();
        for (index, b) in self.boxes.iter().enumerate() {
            if !b.bbox.within(w as f64, h as f64) || b.bbox.is_degenerate() {
                return Err(GenerationError::BoxOutOfBounds { index, width: w, height: h });
            }
        }
        Ok(())
    }
}

/// Mock-only ground truth about what was drawn into a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxMetadata {
    pub corrupted: bool,
    pub corruption_kind: Option<CorruptionKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub image: RgbImage,
    pub seed: u64,
    /// Present iff produced by the mock.
    pub per_box_metadata: Option<Vec<BoxMetadata>>,
    /// Unannotated instances added (mock only).
    pub hallucinations: u32,
}

/// A grounded inpainting backend.
pub trait Generator: Sync {
    fn inpaint(&self, req: &GenerationRequest) -> Result<GenerationResult, GenerationError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockGenConfig {
    pub corruption_rate: f64,
    pub hallucination_rate: f64,
    pub glyph_palette: GlyphPalette,
    /// Force every corruption to this kind instead of drawing it uniformly.
    #[serde(default)]
    pub forced_kind: Option<CorruptionKind>,
    /// Independent hallucination draws per image, each with probability
    /// `hallucination_rate`.
    #[serde(default = "one")]
    pub hallucination_attempts: u32,
    /// Relative odds of each category being drawn for a wrong-category
    /// substitute or a hallucination; uniform when empty.
    #[serde(default)]
    pub category_weights: BTreeMap<u64, f64>,
}

fn one() -> u32 {
    1
}

impl MockGenConfig {
    pub fn new(palette: GlyphPalette, corruption_rate: f64, hallucination_rate: f64) -> Self {
        Self { corruption_rate, hallucination_rate, glyph_palette: palette, forced_kind: None, hallucination_attempts: 1, category_weights: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        for (name, r) in [("corruption_rate", self.corruption_rate), ("hallucination_rate", self.hallucination_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(GenerationError::InvalidConfig(format!("{name}={r} not in [0,1]")));
            }
        }
        if self.category_weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(GenerationError::InvalidConfig("category weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Draw one of `ids` by `category_weights`.
    fn pick<R: Rng + ?Sized>(&self, ids: &[u64], rng: &mut R) -> u64 {
        let weights: Vec<f64> = ids.iter().map(|id| self.category_weights.get(id).copied().unwrap_or(0.0)).collect();
        match WeightedIndex::new(&weights) {
            Ok(w) if !self.category_weights.is_empty() => ids[w.sample(rng)],
            _ => ids[rng.random_range(0..ids.len())],
        }
    }
}

const KINDS: [CorruptionKind; 3] =
    [CorruptionKind::WrongCategory, CorruptionKind::Blank, CorruptionKind::Misplaced];

/// Deterministic glyph inpainter. Every box region is erased to the local
/// background and redrawn with a fresh instance of its category, unless the
/// box is corrupted; optionally one unannotated glyph is added.
pub fn mock_inpaint(
    req: &GenerationRequest,
    cfg: &MockGenConfig,
) -> Result<GenerationResult, GenerationError> {
    cfg.validate()?;
    req.check_bounds()?;
    for (index, b) in req.boxes.iter().enumerate() {
        if b.bbox.w < MIN_GLYPH_SIDE || b.bbox.h < MIN_GLYPH_SIDE {
            return Err(GenerationError::BoxTooSmall { index, w: b.bbox.w, h: b.bbox.h });
        }
        if cfg.glyph_palette.get(b.category_id).is_none() {
            return Err(GenerationError::UnknownCategory(b.category_id));
        }
    }
    if req.boxes.is_empty() {
        return Ok(GenerationResult {
            image: req.image.clone(),
            seed: req.seed,
            per_box_metadata: Some(Vec::new()),
            hallucinations: 0,
        });
    }

    // Decisions and pixels use separate streams so rendering detail never
    // shifts which boxes get corrupted.
    let mut decide = ChaCha8Rng::seed_from_u64(req.seed);
    let mut paint = ChaCha8Rng::seed_from_u64(req.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (w, h) = req.image.dimensions();
    let mut out = req.image.clone();
    let mut occupied: Vec<Box64> = req.boxes.iter().map(|b| b.bbox).collect();

    let backgrounds: Vec<[f64; 3]> =
        req.boxes.iter().map(|b| surrounding_color(&req.image, &b.bbox)).collect();
    for (b, bg) in req.boxes.iter().zip(&backgrounds) {
        fill_box(&mut out, &b.bbox, *bg, &mut paint);
    }

    let mut meta = Vec::with_capacity(req.boxes.len());
    for b in &req.boxes {
        let corrupted = decide.random::<f64>() < cfg.corruption_rate;
        let kind_draw = decide.random_range(0..KINDS.len());
        let kind = corrupted.then(|| cfg.forced_kind.unwrap_or(KINDS[kind_draw]));
        let own = *cfg.glyph_palette.get(b.category_id).expect("checked above");
        match kind {
            None => {
                let app = cfg.glyph_palette.sample_appearance(&own, &mut paint);
                render_glyph(&mut out, &b.bbox, own.shape, app, &mut paint);
            }
            Some(CorruptionKind::WrongCategory) => {
                let others: Vec<u64> = cfg
                    .glyph_palette
                    .glyphs
                    .keys()
                    .copied()
                    .filter(|&c| c != b.category_id)
                    .collect();
                let glyph = if others.is_empty() { own } else { *cfg.glyph_palette.get(cfg.pick(&others, &mut decide)).unwrap() };
                let app = cfg.glyph_palette.sample_appearance(&glyph, &mut paint);
                render_glyph(&mut out, &b.bbox, glyph.shape, app, &mut paint);
            }
            Some(CorruptionKind::Blank) => {}
            Some(CorruptionKind::Misplaced) => {
                if let Some(spot) = free_spot(b.bbox.w, b.bbox.h, w, h, &occupied, &mut decide) {
                    let app = cfg.glyph_palette.sample_appearance(&own, &mut paint);
                    render_glyph(&mut out, &spot, own.shape, app, &mut paint);
                    occupied.push(spot);
                }
            }
        }
        meta.push(BoxMetadata { corrupted, corruption_kind: kind });
    }

    let mut hallucinations = 0;
    for _ in 0..cfg.hallucination_attempts {
        if decide.random::<f64>() >= cfg.hallucination_rate {
            continue;
        }
        let ids: Vec<u64> = cfg.glyph_palette.glyphs.keys().copied().collect();
        let glyph = *cfg.glyph_palette.get(cfg.pick(&ids, &mut decide)).unwrap();
        let template = req.boxes[decide.random_range(0..req.boxes.len())].bbox;
        if let Some(spot) = free_spot(template.w, template.h, w, h, &occupied, &mut decide) {
            let app = cfg.glyph_palette.sample_appearance(&glyph, &mut paint);
            render_glyph(&mut out, &spot, glyph.shape, app, &mut paint);
            occupied.push(spot);
            hallucinations += 1;
        }
    }

    Ok(GenerationResult { image: out, seed: req.seed, per_box_metadata: Some(meta), hallucinations })
}

/// A `bw x bh` integer-aligned spot inside the image that keeps a 2px gap to
/// everything in `occupied`.
fn free_spot<R: Rng + ?Sized>(
    bw: f64,
    bh: f64,
    width: u32,
    height: u32,
    occupied: &[Box64],
    rng: &mut R,
) -> Option<Box64> {
    let (bw, bh) = (bw.round(), bh.round());
    let max_x = width as f64 - bw;
    let max_y = height as f64 - bh;
    if max_x < 0.0 || max_y < 0.0 {
        return None;
    }
    for _ in 0..64 {
        let x = rng.random_range(0..=max_x as u32) as f64;
        let y = rng.random_range(0..=max_y as u32) as f64;
        let grown = BBox::new(x - 2.0, y - 2.0, bw + 4.0, bh + 4.0);
        if occupied.iter().all(|o| iou_unchecked(&grown, o) == 0.0) {
            return Some(BBox::new(x, y, bw, bh));
        }
    }
    None
}

/// The mock as a [`Generator`].
#[derive(Debug, Clone, PartialEq)]
pub struct MockGenerator {
    pub config: MockGenConfig,
}

impl Generator for MockGenerator {
    fn inpaint(&self, req: &GenerationRequest) -> Result<GenerationResult, GenerationError> {
        mock_inpaint(req, &self.config)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub label: String,
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub image_b64: String,
    pub boxes: Vec<WireBox>,
    pub image_prompt: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub image_b64: String,
    pub seed: u64,
}

impl From<&GenerationRequest> for WireRequest {
    fn from(r: &GenerationRequest) -> Self {
        WireRequest {
            image_b64: http::encode_png_b64(&r.image),
            boxes: r
                .boxes
                .iter()
                .map(|b| WireBox {
                    x: b.bbox.x,
                    y: b.bbox.y,
                    w: b.bbox.w,
                    h: b.bbox.h,
                    label: b.label.clone(),
                    prompt: b.prompt.clone(),
                })
                .collect(),
            image_prompt: r.image_prompt.clone(),
            seed: r.seed,
        }
    }
}

/// Adapter for a remote inpainting service: one JSON request per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpGenerator {
    pub endpoint: String,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl Generator for HttpGenerator {
    fn inpaint(&self, req: &GenerationRequest) -> Result<GenerationResult, GenerationError> {
        req.check_bounds()?;
        let wire = WireRequest::from(req);
        let resp: WireResponse = http::post_json(&self.endpoint, &wire, &self.retry)?;
        let image = http::decode_png_b64(&resp.image_b64)
            .map_err(|message| HttpError::Malformed { attempts: 1, message })?;
        if image.dimensions() != req.image.dimensions() {
            return Err(GenerationError::DimensionMismatch {
                expected: req.image.dimensions(),
                got: image.dimensions(),
            });
        }
        Ok(GenerationResult { image, seed: resp.seed, per_box_metadata: None, hallucinations: 0 })
    }
}

/// Seed for copy `copy` of image `image_id`: a splitmix64 mix of the inputs.
pub fn copy_seed(base_seed: u64, image_id: u64, copy: u32) -> u64 {
    let mut z = base_seed
        ^ image_id.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (copy as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn build_request(
    dataset: &Dataset,
    image: &ImageRecord,
    pixels: &RgbImage,
    seed: u64,
) -> Result<GenerationRequest, GenerationError> {
    let anns = dataset.annotations_of(image.id);
    let prompts = build_prompts(dataset, &anns)?;
    let boxes = anns
        .iter()
        .zip(prompts.box_prompts)
        .map(|(a, (_, prompt))| BoxSpec {
            bbox: a.bbox,
            category_id: a.category_id,
            label: dataset.category(a.category_id).map(|c| c.name.clone()).unwrap_or_default(),
            prompt,
        })
        .collect();
    Ok(GenerationRequest { image: pixels.clone(), boxes, image_prompt: prompts.image_prompt, seed })
}

/// `copies` synthetic images per real image, reusing each real layout.
/// Requests run on at most `max_in_flight` worker threads; output order is
/// `(real image order, copy index)` regardless of scheduling.
pub fn generate_synthetic_dataset(
    real: &Corpus,
    copies: u32,
    base_seed: u64,
    generator: &dyn Generator,
    max_in_flight: usize,
) -> Result<Corpus, GenerationError> {
    if copies == 0 {
        return Err(GenerationError::InvalidConfig("copies must be at least 1".into()));
    }
    let d = &real.dataset;
    let jobs: Vec<(&ImageRecord, u32)> =
        d.images.iter().flat_map(|im| (0..copies).map(move |c| (im, c))).collect();

    let run = |&(im, c): &(&ImageRecord, u32)| -> Result<(u64, GenerationResult), GenerationError> {
        let wrap = |e: GenerationError| GenerationError::Image { image_id: im.id, source: Box::new(e) };
        let pixels = real.pixels.get(&im.id).ok_or(GenerationError::MissingPixels(im.id))?;
        let seed = copy_seed(base_seed, im.id, c);
        let req = build_request(d, im, pixels, seed).map_err(wrap)?;
        let res = generator.inpaint(&req).map_err(wrap)?;
        if res.image.dimensions() != pixels.dimensions() {
            return Err(wrap(GenerationError::DimensionMismatch {
                expected: pixels.dimensions(),
                got: res.image.dimensions(),
            }));
        }
        Ok((seed, res))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| GenerationError::InvalidConfig(e.to_string()))?;
    let results: Vec<(u64, GenerationResult)> =
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_, _>>())?;

    let by_image = d.annotations_by_image();
    let mut next_image = d.images.iter().map(|i| i.id).max().unwrap_or(0) + 1;
    let mut next_ann = d.annotations.iter().map(|a| a.id).max().unwrap_or(0) + 1;
    let mut images = Vec::with_capacity(jobs.len());
    let mut annotations = Vec::new();
    let mut pixels = BTreeMap::new();
    for (&(im, c), (seed, res)) in jobs.iter().zip(results) {
        let id = next_image;
        next_image += 1;
        let mut rec = ImageRecord::new(id, im.width, im.height, format!("synthetic/{id:06}_{:06}_c{c}.png", im.id));
        rec.source = Source::Synthetic;
        rec.generation_seed = Some(seed);
        rec.parent_id = Some(im.id);
        rec.hallucinations = res.hallucinations;
        let meta = res.per_box_metadata.unwrap_or_default();
        for (k, a) in by_image[&im.id].iter().enumerate() {
            let mut ann = InstanceAnnotation::new(next_ann, id, a.category_id, a.bbox);
            next_ann += 1;
            ann.segmentation = None;
            ann.corruption = meta.get(k).and_then(|m| m.corruption_kind);
            annotations.push(ann);
        }
        images.push(rec);
        pixels.insert(id, res.image);
    }
    let dataset = Dataset::new(images, annotations, d.categories.clone(), Source::Synthetic)?;
    Ok(Corpus { dataset, pixels })
}
