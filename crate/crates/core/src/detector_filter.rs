//! Instance-level filtering of synthetic annotations against predictions
//! of a detector trained on real data only.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::dataset::{Dataset, InstanceAnnotation, Source};
use crate::detection::Detection;
use crate::detector::{predict, train, DetectorError, TrainState, TrainingConfig, DEFAULT_NMS_IOU, DEFAULT_SCORE_FLOOR};
use crate::geometry::iou_unchecked;
use crate::scalar::Scalar;

pub const LVIS_TAU_S: f64 = 0.2;
pub const COCO_TAU_S: f64 = 0.1;
pub const DEFAULT_TAU_IOU: f64 = 0.3;

#[derive(Debug, Error)]
pub enum DetectorFilterError {
    #[error("{name} = {value} is outside [0, 1]")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error("prediction for image {got} passed with annotations of image {expected}")]
    WrongImage { expected: u64, got: u64 },
    #[error("the filter detector must be trained on a real dataset")]
    NotReal,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorFilterConfig {
    /// Minimum prediction score (exclusive).
    pub tau_s: f64,
    /// Minimum overlap with the annotation (exclusive).
    pub tau_iou: f64,
    /// Accept support from a prediction of any category.
    pub class_agnostic: bool,
}

impl Default for DetectorFilterConfig {
    fn default() -> Self {
        Self { tau_s: LVIS_TAU_S, tau_iou: DEFAULT_TAU_IOU, class_agnostic: false }
    }
}

impl DetectorFilterConfig {
    pub fn coco() -> Self {
        Self { tau_s: COCO_TAU_S, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DetectorFilterError> {
        for (name, value) in [("tau_s", self.tau_s), ("tau_iou", self.tau_iou)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DetectorFilterError::InvalidThreshold { name, value });
            }
        }
        Ok(())
    }
}

/// One line of the filter report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub annotation_id: u64,
    pub kept: bool,
    /// Highest score among eligible predictions overlapping by more than `tau_iou`.
    pub best_score: f64,
    /// Highest overlap among eligible predictions scoring above `tau_s`.
    pub best_iou: f64,
    pub tau_s: f64,
    pub tau_iou: f64,
}

/// Decide one annotation. It is kept iff some eligible prediction has
/// `score > tau_s` and `iou > tau_iou`, which holds exactly when
/// `best_score > tau_s`.
pub fn decide(ann: &InstanceAnnotation, preds: &[Detection], cfg: &DetectorFilterConfig) -> FilterDecision {
    let mut best_score: f64 = 0.0;
    let mut best_iou: f64 = 0.0;
    for p in preds.iter().filter(|p| cfg.class_agnostic || p.category_id == ann.category_id) {
        let iou = if ann.bbox.is_degenerate() || p.bbox.is_degenerate() { 0.0 } else { iou_unchecked(&ann.bbox, &p.bbox) };
        if iou > cfg.tau_iou {
            best_score = best_score.max(p.score);
        }
        if p.score > cfg.tau_s {
            best_iou = best_iou.max(iou);
        }
    }
    FilterDecision {
        annotation_id: ann.id,
        kept: best_score > cfg.tau_s,
        best_score,
        best_iou,
        tau_s: cfg.tau_s,
        tau_iou: cfg.tau_iou,
    }
}

/// Split the annotations of one image into kept and removed. Removed
/// annotations are returned with `filtered_out = true`.
pub fn filter_instances(
    gt: &[InstanceAnnotation],
    preds: &[Detection],
    cfg: &DetectorFilterConfig,
) -> Result<(Vec<InstanceAnnotation>, Vec<InstanceAnnotation>), DetectorFilterError> {
    let (kept, removed, _) = filter_with_decisions(gt, preds, cfg)?;
    Ok((kept, removed))
}

type Split = (Vec<InstanceAnnotation>, Vec<InstanceAnnotation>, Vec<FilterDecision>);

fn filter_with_decisions(
    gt: &[InstanceAnnotation],
    preds: &[Detection],
    cfg: &DetectorFilterConfig,
) -> Result<Split, DetectorFilterError> {
    cfg.validate()?;
    if let Some(first) = gt.first() {
        for id in gt.iter().map(|a| a.image_id).chain(preds.iter().map(|p| p.image_id)) {
            if id != first.image_id {
                return Err(DetectorFilterError::WrongImage { expected: first.image_id, got: id });
            }
        }
    }
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    let mut decisions = Vec::with_capacity(gt.len());
    for a in gt {
        let d = decide(a, preds, cfg);
        if d.kept && !a.filtered_out {
            kept.push(a.clone());
        } else {
            removed.push(InstanceAnnotation { filtered_out: true, ..a.clone() });
        }
        decisions.push(FilterDecision { kept: d.kept && !a.filtered_out, ..d });
    }
    Ok((kept, removed, decisions))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub decisions: Vec<FilterDecision>,
}

impl FilterReport {
    pub fn removed(&self) -> impl Iterator<Item = &FilterDecision> {
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

/// Train the filter detector on real data alone: no synthetic batches and
/// no background ignore.
pub fn train_filter_detector<T: Scalar>(real: &Corpus, cfg: &TrainingConfig) -> Result<TrainState<T>, DetectorFilterError> {
    if real.dataset.source != Source::Real {
        return Err(DetectorFilterError::NotReal);
    }
    let cfg = TrainingConfig { bg_ignore: false, ..cfg.clone() };
    Ok(train(real, None, &cfg)?)
}

/// Run the detector over every image of `synth`.
pub fn predict_corpus<T: Scalar>(
    corpus: &Corpus,
    det: &TrainState<T>,
    score_floor: f64,
) -> Result<Vec<Detection>, DetectorFilterError> {
    let per_image = corpus
        .dataset
        .images
        .par_iter()
        .map(|im| {
            let px = corpus.pixels_of(im.id)?;
            Ok(predict(det, im.id, px, DEFAULT_NMS_IOU, score_floor)?)
        })
        .collect::<Result<Vec<_>, DetectorFilterError>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Flag unsupported annotations given precomputed predictions.
pub fn apply_filter(
    synth: &Dataset,
    preds: &[Detection],
    cfg: &DetectorFilterConfig,
) -> Result<(Dataset, FilterReport), DetectorFilterError> {
    cfg.validate()?;
    let mut by_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for p in preds {
        by_image.entry(p.image_id).or_default().push(*p);
    }
    let anns = synth.annotations_by_image();
    let mut flagged: BTreeMap<u64, bool> = BTreeMap::new();
    let mut report = FilterReport::default();
    for (image_id, gt) in anns {
        let gt: Vec<InstanceAnnotation> = gt.into_iter().cloned().collect();
        let p = by_image.get(&image_id).map(Vec::as_slice).unwrap_or(&[]);
        let (_, removed, decisions) = filter_with_decisions(&gt, p, cfg)?;
        flagged.extend(removed.iter().map(|a| (a.id, true)));
        report.decisions.extend(decisions);
    }
    let mut out = synth.clone();
    for a in &mut out.annotations {
        if flagged.contains_key(&a.id) {
            a.filtered_out = true;
        }
    }
    Ok((out, report))
}

/// Predict with `det` on every synthetic image and flag unsupported
/// annotations. Pixels are never modified.
pub fn run_filter<T: Scalar>(
    synth: &Corpus,
    det: &TrainState<T>,
    cfg: &DetectorFilterConfig,
) -> Result<(Dataset, FilterReport), DetectorFilterError> {
    cfg.validate()?;
    let preds = predict_corpus(synth, det, DEFAULT_SCORE_FLOOR.min(cfg.tau_s))?;
    apply_filter(&synth.dataset, &preds, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn ann(id: u64, cat: u64, x: f64) -> InstanceAnnotation {
        InstanceAnnotation::new(id, 1, cat, BBox::new(x, 0.0, 10.0, 10.0))
    }

    fn pred(cat: u64, x: f64, score: f64) -> Detection {
        Detection { image_id: 1, category_id: cat, bbox: BBox::new(x, 0.0, 10.0, 10.0), score }
    }

    #[test]
    fn presets() {
        let d = DetectorFilterConfig::default();
        assert_eq!((d.tau_s, d.tau_iou, d.class_agnostic), (0.2, 0.3, false));
        assert_eq!(DetectorFilterConfig::coco().tau_s, 0.1);
    }

    #[test]
    fn strict_thresholds() {
        let cfg = DetectorFilterConfig::default();
        // x shift 10/3 gives IoU (20/3) / (40/3) = 0.5.
        let gt = [ann(1, 1, 0.0)];
        let (kept, removed) = filter_instances(&gt, &[pred(1, 10.0 / 3.0, 0.25)], &cfg).unwrap();
        assert_eq!((kept.len(), removed.len()), (1, 0));
        let (kept, removed) = filter_instances(&gt, &[pred(1, 10.0 / 3.0, 0.2)], &cfg).unwrap();
        assert_eq!((kept.len(), removed.len()), (0, 1));
        assert!(removed[0].filtered_out);
    }

    #[test]
    fn class_matching() {
        let gt = [ann(1, 1, 0.0)];
        let p = [pred(2, 0.0, 0.9)];
        assert_eq!(filter_instances(&gt, &p, &DetectorFilterConfig::default()).unwrap().0.len(), 0);
        let agnostic = DetectorFilterConfig { class_agnostic: true, ..Default::default() };
        assert_eq!(filter_instances(&gt, &p, &agnostic).unwrap().0.len(), 1);
    }

    #[test]
    fn wrong_image_is_an_error() {
        let mut p = pred(1, 0.0, 0.9);
        p.image_id = 7;
        assert!(matches!(
            filter_instances(&[ann(1, 1, 0.0)], &[p], &DetectorFilterConfig::default()),
            Err(DetectorFilterError::WrongImage { expected: 1, got: 7 })
        ));
    }

    fn oracle(gt: &[InstanceAnnotation], preds: &[Detection], cfg: &DetectorFilterConfig) -> Vec<bool> {
        gt.iter()
            .map(|g| {
                preds.iter().any(|p| {
                    let ix = (g.bbox.x1().min(p.bbox.x1()) - g.bbox.x.max(p.bbox.x)).max(0.0)
                        * (g.bbox.y1().min(p.bbox.y1()) - g.bbox.y.max(p.bbox.y)).max(0.0);
                    let iou = ix / (g.bbox.area() + p.bbox.area() - ix);
                    (cfg.class_agnostic || p.category_id == g.category_id) && p.score > cfg.tau_s && iou > cfg.tau_iou
                })
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_all_pairs_oracle(
            g in prop::collection::vec((1u64..3, 0.0f64..30.0), 0..8),
            p in prop::collection::vec((1u64..3, 0.0f64..30.0, 0.0f64..1.0), 0..8),
            tau_s in 0.0f64..1.0,
            tau_iou in 0.0f64..1.0,
            agnostic: bool,
        ) {
            let gt: Vec<_> = g.iter().enumerate().map(|(i, &(c, x))| ann(i as u64, c, x)).collect();
            let preds: Vec<_> = p.iter().map(|&(c, x, s)| pred(c, x, s)).collect();
            let cfg = DetectorFilterConfig { tau_s, tau_iou, class_agnostic: agnostic };
            let (kept, removed) = filter_instances(&gt, &preds, &cfg).unwrap();
            let want = oracle(&gt, &preds, &cfg);
            let kept_ids: Vec<u64> = kept.iter().map(|a| a.id).collect();
            let want_ids: Vec<u64> = gt.iter().zip(&want).filter(|(_, &k)| k).map(|(a, _)| a.id).collect();
            prop_assert_eq!(kept_ids, want_ids);
            prop_assert_eq!(kept.len() + removed.len(), gt.len());
            // Raising either threshold never shrinks the removed set.
            let stricter = DetectorFilterConfig { tau_s: (tau_s + 0.1).min(1.0), tau_iou: (tau_iou + 0.1).min(1.0), ..cfg };
            let (_, removed2) = filter_instances(&gt, &preds, &stricter).unwrap();
            prop_assert!(removed.iter().all(|r| removed2.iter().any(|s| s.id == r.id)));
        }
    }

    #[test]
    fn perfect_and_silent_detectors() {
        let d = Dataset::new(
            vec![crate::dataset::ImageRecord { source: Source::Synthetic, ..crate::dataset::ImageRecord::new(1, 64, 64, "a.png") }],
            vec![ann(1, 1, 0.0), ann(2, 2, 30.0)],
            vec![crate::dataset::Category::new(1, "a"), crate::dataset::Category::new(2, "b")],
            Source::Synthetic,
        )
        .unwrap();
        let echo: Vec<Detection> = d
            .annotations
            .iter()
            .map(|a| Detection { image_id: 1, category_id: a.category_id, bbox: a.bbox, score: 1.0 })
            .collect();
        let (out, report) = apply_filter(&d, &echo, &DetectorFilterConfig::default()).unwrap();
        assert_eq!(report.removed().count(), 0);
        assert_eq!(out, d);
        let (out, report) = apply_filter(&d, &[], &DetectorFilterConfig::default()).unwrap();
        assert_eq!(report.removed().count(), 2);
        assert!(out.annotations.iter().all(|a| a.filtered_out));
        let mut buf = Vec::new();
        report.write_jsonl(&mut buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(std::str::from_utf8(&buf).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first["kept"], false);
        assert_eq!(first["tau_iou"], 0.3);
    }
}
