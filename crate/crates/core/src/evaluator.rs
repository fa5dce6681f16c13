//! COCO-style box AP: greedy matching, 101-point interpolation, IoU
//! thresholds 0.50:0.05:0.95 and rare/common/frequent aggregates.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Box64, Dataset, FrequencyBucket};
use crate::detection::Detection;
use crate::geometry::iou_unchecked;

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const RECALL_POINTS: usize = 101;
pub const MAX_DETS_PER_IMAGE_CATEGORY: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("detection references unknown image {0}")]
    UnknownImage(u64),
    #[error("detection references unknown category {0}")]
    UnknownCategory(u64),
}

/// Ground-truth box as seen by the matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGt {
    pub category_id: u64,
    pub bbox: Box64,
}

/// TP/FP flag per detection. `dets` must be sorted by score, descending.
/// Each detection takes the unmatched same-category ground truth with the
/// highest IoU, provided it reaches `iou_threshold`.
pub fn match_for_eval(dets: &[Detection], gts: &[EvalGt], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.category_id != d.category_id {
                    continue;
                }
                let v = iou_unchecked(&d.bbox, &g.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Interpolated precision at recall `0.00, 0.01, …, 1.00`, each as
/// `(true positives, detections)` at the point that attains it.
fn interpolated_counts(flags: &[bool], num_gt: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 1); RECALL_POINTS];
    if num_gt == 0 || flags.is_empty() {
        return out;
    }
    let mut tp = 0usize;
    let mut counts = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        counts.push((tp, i + 1));
    }
    // Running maximum of precision from the right.
    let mut best = counts.clone();
    for i in (0..best.len().saturating_sub(1)).rev() {
        let (a, b) = best[i + 1];
        let (c, d) = best[i];
        if a * d > c * b {
            best[i] = best[i + 1];
        }
    }
    for (k, slot) in out.iter_mut().enumerate() {
        // First rank whose recall tp / num_gt reaches k / 100.
        let i = counts.partition_point(|&(t, _)| t * (RECALL_POINTS - 1) < k * num_gt);
        if i < best.len() {
            *slot = best[i];
        }
    }
    out
}

pub fn interpolated_precision(flags: &[bool], num_gt: usize) -> Vec<f64> {
    interpolated_counts(flags, num_gt).into_iter().map(|(t, n)| t as f64 / n as f64).collect()
}

/// 101-point interpolated AP, summed in exact rational arithmetic and
/// rounded once. `num_gt == 0` yields 0; callers exclude such categories
/// from means.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    let sum = interpolated_counts(flags, num_gt)
        .into_iter()
        .fold(BigRational::zero(), |acc, (t, n)| acc + BigRational::new(BigInt::from(t), BigInt::from(n)));
    (sum / BigRational::from_integer(BigInt::from(RECALL_POINTS))).to_f64().expect("finite ratio")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub name: String,
    pub bucket: FrequencyBucket,
    pub num_gt: usize,
    pub num_dets: usize,
    /// AP at each threshold of [`IOU_THRESHOLDS`].
    pub ap_per_threshold: Vec<f64>,
    pub ap: f64,
    pub ap50: f64,
    /// Interpolated precision at IoU 0.5 over the 101 recall points.
    pub pr_curve50: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap_rare: Option<f64>,
    pub ap_common: Option<f64>,
    pub ap_frequent: Option<f64>,
    /// Categories without ground truth are listed but excluded from means.
    pub per_category: BTreeMap<u64, CategoryEval>,
}

impl EvalResult {
    pub fn bucket_ap(&self, bucket: FrequencyBucket) -> Option<f64> {
        match bucket {
            FrequencyBucket::Rare => self.ap_rare,
            FrequencyBucket::Common => self.ap_common,
            FrequencyBucket::Frequent => self.ap_frequent,
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Evaluate detections against every image of `gt`. Annotations flagged
/// `filtered_out` are not counted as ground truth.
pub fn evaluate(dets: &[Detection], gt: &Dataset) -> Result<EvalResult, EvalError> {
    let cats: BTreeMap<u64, &crate::dataset::Category> = gt.categories.iter().map(|c| (c.id, c)).collect();
    // (image, category) -> detections, best first, capped.
    let mut by_key: BTreeMap<(u64, u64), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        if gt.image(d.image_id).is_none() {
            return Err(EvalError::UnknownImage(d.image_id));
        }
        if !cats.contains_key(&d.category_id) {
            return Err(EvalError::UnknownCategory(d.category_id));
        }
        by_key.entry((d.image_id, d.category_id)).or_default().push(*d);
    }
    for v in by_key.values_mut() {
        v.sort_by(det_order);
        v.truncate(MAX_DETS_PER_IMAGE_CATEGORY);
    }
    let mut gts: BTreeMap<(u64, u64), Vec<EvalGt>> = BTreeMap::new();
    for a in gt.annotations.iter().filter(|a| !a.filtered_out) {
        gts.entry((a.image_id, a.category_id)).or_default().push(EvalGt { category_id: a.category_id, bbox: a.bbox });
    }

    let mut per_category = BTreeMap::new();
    for (&cid, cat) in &cats {
        let num_gt: usize = gts.iter().filter(|((_, c), _)| *c == cid).map(|(_, v)| v.len()).sum();
        let mut ap_per_threshold = Vec::with_capacity(IOU_THRESHOLDS.len());
        let mut pr_curve50 = Vec::new();
        let mut num_dets = 0;
        for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            let mut scored: Vec<(Detection, bool)> = Vec::new();
            for ((img, c), ds) in by_key.iter().filter(|((_, c), _)| *c == cid) {
                let g = gts.get(&(*img, *c)).map(Vec::as_slice).unwrap_or(&[]);
                let flags = match_for_eval(ds, g, thr);
                scored.extend(ds.iter().copied().zip(flags));
            }
            // Stable: ties keep image order.
            scored.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));
            num_dets = scored.len();
            let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
            if t == 0 {
                pr_curve50 = interpolated_precision(&flags, num_gt);
            }
            ap_per_threshold.push(average_precision(&flags, num_gt));
        }
        let ap = ap_per_threshold.iter().sum::<f64>() / IOU_THRESHOLDS.len() as f64;
        per_category.insert(
            cid,
            CategoryEval {
                name: cat.name.clone(),
                bucket: cat.frequency_bucket,
                num_gt,
                num_dets,
                ap50: ap_per_threshold[0],
                ap_per_threshold,
                ap,
                pr_curve50,
            },
        );
    }

    let scored = || per_category.values().filter(|c| c.num_gt > 0);
    let bucket = |b: FrequencyBucket| mean(scored().filter(|c| c.bucket == b).map(|c| c.ap));
    Ok(EvalResult {
        ap: mean(scored().map(|c| c.ap)).unwrap_or(0.0),
        ap50: mean(scored().map(|c| c.ap50)).unwrap_or(0.0),
        ap_rare: bucket(FrequencyBucket::Rare),
        ap_common: bucket(FrequencyBucket::Common),
        ap_frequent: bucket(FrequencyBucket::Frequent),
        per_category,
    })
}

/// Fixed-width table with AP, AP50 and the bucket columns, scaled by 100.
pub fn format_table(rows: &[(String, &EvalResult)]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", x * 100.0));
    let mut s = format!("{:<24} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "run", "AP", "AP50", "AP_r", "AP_c", "AP_f");
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            name,
            cell(Some(r.ap)),
            cell(Some(r.ap50)),
            cell(r.ap_rare),
            cell(r.ap_common),
            cell(r.ap_frequent)
        ));
    }
    s
}
