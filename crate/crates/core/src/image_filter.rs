//! Image-level filtering of generated images by a global quality score.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::dataset::{Dataset, Source};
use crate::http::{self, HttpError, RetryPolicy};

/// Default aesthetic threshold.
pub const DEFAULT_TAU_A: f64 = 4.5;

#[derive(Debug, Error)]
pub enum ImageFilterError {
    #[error("image {0} was never scored")]
    Unscored(u64),
    #[error("scoring requires a synthetic dataset")]
    NotSynthetic,
    #[error("tau_a must not be NaN")]
    InvalidThreshold,
    #[error("scorer failed on image {image_id}: {message}")]
    Scorer { image_id: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageFilterConfig {
    pub tau_a: f64,
}

impl Default for ImageFilterConfig {
    fn default() -> Self {
        Self { tau_a: DEFAULT_TAU_A }
    }
}

/// Global image quality scorer. Must be deterministic per image.
pub trait AestheticScorer: Sync {
    fn score(&self, image_id: u64, image: &RgbImage) -> Result<f64, ImageFilterError>;
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl AestheticScorer for ConstantScorer {
    fn score(&self, _: u64, _: &RgbImage) -> Result<f64, ImageFilterError> {
        Ok(self.0)
    }
}

/// Mock scorer: `base - span * density + jitter`, where density is the share
/// of an image's annotated instances that the mock generator corrupted,
/// and jitter is a small deterministic per-image offset.
#[derive(Debug, Clone)]
pub struct CorruptionDensityScorer {
    densities: HashMap<u64, f64>,
    pub base: f64,
    pub span: f64,
    pub jitter: f64,
}

impl CorruptionDensityScorer {
    pub fn from_dataset(d: &Dataset) -> Self {
        let mut counts: HashMap<u64, (usize, usize)> =
            d.images.iter().map(|im| (im.id, (0, 0))).collect();
        for a in &d.annotations {
            let e = counts.entry(a.image_id).or_default();
            e.1 += 1;
            e.0 += a.corruption.is_some() as usize;
        }
        let densities = counts
            .into_iter()
            .map(|(id, (bad, total))| (id, if total == 0 { 0.0 } else { bad as f64 / total as f64 }))
            .collect();
        Self { densities, base: 5.6, span: 1.5, jitter: 0.3 }
    }

    pub fn density(&self, image_id: u64) -> Option<f64> {
        self.densities.get(&image_id).copied()
    }
}

impl AestheticScorer for CorruptionDensityScorer {
    fn score(&self, image_id: u64, _: &RgbImage) -> Result<f64, ImageFilterError> {
        let density = self.density(image_id).ok_or(ImageFilterError::Scorer {
            image_id,
            message: "image unknown to mock scorer".into(),
        })?;
        // Map the id to [-1, 1) deterministically.
        let h = image_id.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11;
        let u = h as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        Ok(self.base - self.span * density + self.jitter * u)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub image_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

/// Remote scorer speaking `{image_b64}` -> `{score}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpScorer {
    pub endpoint: String,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl AestheticScorer for HttpScorer {
    fn score(&self, image_id: u64, image: &RgbImage) -> Result<f64, ImageFilterError> {
        let req = ScoreRequest { image_b64: http::encode_png_b64(image) };
        let resp: ScoreResponse = http::post_json(&self.endpoint, &req, &self.retry).map_err(
            |e: HttpError| ImageFilterError::Scorer { image_id, message: e.to_string() },
        )?;
        Ok(resp.score)
    }
}

/// Score every image. A scorer failure leaves the image unscored with
/// `scoring_failed` set, which `filter_by_score` treats as a discard.
pub fn score_images(corpus: &Corpus, scorer: &dyn AestheticScorer) -> Result<Corpus, ImageFilterError> {
    if corpus.dataset.source != Source::Synthetic {
        return Err(ImageFilterError::NotSynthetic);
    }
    let scores: Vec<Option<f64>> = corpus
        .dataset
        .images
        .par_iter()
        .map(|im| {
            let px = corpus.pixels.get(&im.id)?;
            scorer.score(im.id, px).ok().filter(|s| s.is_finite())
        })
        .collect();
    let mut out = corpus.clone();
    for (im, s) in out.dataset.images.iter_mut().zip(scores) {
        im.aesthetic_score = s;
        im.scoring_failed = s.is_none();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDecision {
    pub image_id: u64,
    pub score: Option<f64>,
    pub tau_a: f64,
    pub kept: bool,
}

/// One decision per image, in dataset order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageFilterReport {
    pub decisions: Vec<ImageDecision>,
}

impl ImageFilterReport {
    pub fn discarded(&self) -> impl Iterator<Item = &ImageDecision> {
        self.decisions.iter().filter(|d| !d.kept)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in &self.decisions {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Keep an image iff its score is `>= tau_a`; discarded images take all their
/// annotations with them. Real images always pass.
pub fn filter_by_score(
    d: &Dataset,
    cfg: &ImageFilterConfig,
) -> Result<(Dataset, ImageFilterReport), ImageFilterError> {
    if cfg.tau_a.is_nan() {
        return Err(ImageFilterError::InvalidThreshold);
    }
    let mut decisions = Vec::new();
    let mut keep = BTreeSet::new();
    for im in &d.images {
        if im.source == Source::Real {
            keep.insert(im.id);
            continue;
        }
        let kept = match (im.aesthetic_score, im.scoring_failed) {
            (Some(s), _) => s >= cfg.tau_a,
            (None, true) => false,
            (None, false) => return Err(ImageFilterError::Unscored(im.id)),
        };
        if kept {
            keep.insert(im.id);
        }
        decisions.push(ImageDecision { image_id: im.id, score: im.aesthetic_score, tau_a: cfg.tau_a, kept });
    }
    Ok((d.retain_images(&keep), ImageFilterReport { decisions }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_toy_corpus, ToyCorpusConfig};
    use crate::dataset::{Category, CorruptionKind, ImageRecord, InstanceAnnotation};
    use crate::generation::{generate_synthetic_dataset, MockGenConfig, MockGenerator};
    use crate::geometry::BBox;
    use crate::http::testing::serve;
    use proptest::prelude::*;

    fn scored(scores: &[f64]) -> Dataset {
        let images = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut im = ImageRecord::new(i as u64, 16, 16, "");
                im.source = Source::Synthetic;
                im.aesthetic_score = Some(s);
                im
            })
            .collect();
        let anns = (0..scores.len() as u64)
            .map(|i| InstanceAnnotation::new(i, i, 1, BBox::new(1.0, 1.0, 4.0, 4.0)))
            .collect();
        Dataset::new(images, anns, vec![Category::new(1, "a")], Source::Synthetic).unwrap()
    }

    fn synthetic(corruption: f64) -> Corpus {
        let cfg = ToyCorpusConfig::default().balanced(12, 4, 2);
        let real = build_toy_corpus(&cfg).unwrap();
        let gen = MockGenerator { config: MockGenConfig::new(cfg.palette(), corruption, 0.0) };
        generate_synthetic_dataset(&real, 1, 5, &gen, 2).unwrap()
    }

    #[test]
    fn default_threshold() {
        assert_eq!(ImageFilterConfig::default().tau_a, 4.5);
    }

    #[test]
    fn constant_scorer_and_idempotence() {
        let s = synthetic(0.0);
        let once = score_images(&s, &ConstantScorer(3.25)).unwrap();
        assert!(once.dataset.images.iter().all(|im| im.aesthetic_score == Some(3.25)));
        let twice = score_images(&once, &ConstantScorer(3.25)).unwrap();
        assert_eq!(once, twice);
        let mock = CorruptionDensityScorer::from_dataset(&s.dataset);
        let a = score_images(&s, &mock).unwrap();
        assert_eq!(a, score_images(&a, &mock).unwrap());
    }

    #[test]
    fn real_dataset_is_not_scored() {
        let cfg = ToyCorpusConfig::default().balanced(3, 1, 2);
        let real = build_toy_corpus(&cfg).unwrap();
        assert!(matches!(score_images(&real, &ConstantScorer(1.0)), Err(ImageFilterError::NotSynthetic)));
    }

    #[test]
    fn corrupted_images_score_lower() {
        let s = synthetic(0.5);
        let mock = CorruptionDensityScorer::from_dataset(&s.dataset);
        let scored = score_images(&s, &mock).unwrap();
        let mut clean = Vec::new();
        let mut dirty = Vec::new();
        for im in &scored.dataset.images {
            let anns = scored.dataset.annotations_of(im.id);
            if anns.is_empty() {
                continue;
            }
            let bad = anns.iter().filter(|a| a.corruption.is_some()).count();
            let score = im.aesthetic_score.unwrap();
            if bad == 0 {
                clean.push(score);
            } else if bad == anns.len() {
                dirty.push(score);
            }
        }
        assert!(!clean.is_empty() && !dirty.is_empty());
        let max_dirty = dirty.iter().cloned().fold(f64::MIN, f64::max);
        let min_clean = clean.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max_dirty < min_clean);
    }

    #[test]
    fn boundary_is_kept() {
        let d = scored(&[4.4, 4.5, 4.6]);
        let (kept, report) = filter_by_score(&d, &ImageFilterConfig { tau_a: 4.5 }).unwrap();
        let ids: Vec<u64> = kept.images.iter().map(|i| i.id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(kept.annotations.len(), 2);
        assert!(kept.annotations.iter().all(|a| a.image_id != 0));
        let gone: Vec<u64> = report.discarded().map(|d| d.image_id).collect();
        assert_eq!(gone, vec![0]);
        assert_eq!(report.decisions[0].score, Some(4.4));
        assert_eq!(report.decisions[0].tau_a, 4.5);
    }

    #[test]
    fn negative_infinity_keeps_everything() {
        let d = scored(&[-100.0, 0.0, 9.0]);
        let (kept, report) = filter_by_score(&d, &ImageFilterConfig { tau_a: f64::NEG_INFINITY }).unwrap();
        assert_eq!(kept, d);
        assert_eq!(report.discarded().count(), 0);
    }

    #[test]
    fn unscored_and_failed_images() {
        let mut d = scored(&[5.0, 5.0]);
        d.images[0].aesthetic_score = None;
        assert!(matches!(
            filter_by_score(&d, &ImageFilterConfig::default()),
            Err(ImageFilterError::Unscored(0))
        ));
        d.images[0].scoring_failed = true;
        let (kept, report) = filter_by_score(&d, &ImageFilterConfig::default()).unwrap();
        assert_eq!(kept.images.len(), 1);
        assert_eq!(report.discarded().count(), 1);
    }

    #[test]
    fn scorer_failure_marks_image() {
        let s = synthetic(0.0);
        let mut partial = CorruptionDensityScorer::from_dataset(&s.dataset);
        let victim = s.dataset.images[0].id;
        partial.densities.remove(&victim);
        let scored = score_images(&s, &partial).unwrap();
        let im = scored.dataset.image(victim).unwrap();
        assert!(im.scoring_failed && im.aesthetic_score.is_none());
        let (kept, _) = filter_by_score(&scored.dataset, &ImageFilterConfig { tau_a: f64::NEG_INFINITY }).unwrap();
        assert!(kept.image(victim).is_none());
    }

    #[test]
    fn jsonl_report() {
        let (_, report) = filter_by_score(&scored(&[1.0, 6.0]), &ImageFilterConfig::default()).unwrap();
        let mut buf = Vec::new();
        report.write_jsonl(&mut buf).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], serde_json::json!({"image_id": 0, "score": 1.0, "tau_a": 4.5, "kept": false}));
    }

    #[test]
    fn http_scorer() {
        let srv = serve(1, |_, body| {
            let req: ScoreRequest = serde_json::from_str(body).unwrap();
            assert!(!req.image_b64.is_empty());
            (200, "{\"score\": 5.5}".into())
        });
        let scorer = HttpScorer { endpoint: srv.url.clone(), retry: RetryPolicy::default() };
        assert_eq!(scorer.score(1, &RgbImage::new(4, 4)).unwrap(), 5.5);
    }

    #[test]
    fn mock_metadata_drives_density() {
        let mut d = scored(&[0.0, 0.0]);
        d.annotations[0].corruption = Some(CorruptionKind::Blank);
        let m = CorruptionDensityScorer::from_dataset(&d);
        assert_eq!(m.density(0), Some(1.0));
        assert_eq!(m.density(1), Some(0.0));
    }

    proptest! {
        #[test]
        fn partition_and_monotone(scores in prop::collection::vec(0.0f64..10.0, 1..30), t1 in 0.0f64..10.0, t2 in 0.0f64..10.0) {
            let d = scored(&scores);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (kept_lo, rep_lo) = filter_by_score(&d, &ImageFilterConfig { tau_a: lo }).unwrap();
            let (kept_hi, _) = filter_by_score(&d, &ImageFilterConfig { tau_a: hi }).unwrap();
            let set = |k: &Dataset| k.images.iter().map(|i| i.id).collect::<BTreeSet<_>>();
            prop_assert!(set(&kept_hi).is_subset(&set(&kept_lo)));
            let gone: BTreeSet<u64> = rep_lo.discarded().map(|d| d.image_id).collect();
            prop_assert!(gone.is_disjoint(&set(&kept_lo)));
            prop_assert_eq!(gone.len() + kept_lo.images.len(), d.images.len());
            kept_lo.validate().unwrap();
        }
    }
}
