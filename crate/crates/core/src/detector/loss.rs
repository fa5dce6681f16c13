//! Per-image loss assembly with background ignore and mask-loss gating.

use serde::{Deserialize, Serialize};

use super::anchors::{AnchorGrid, GtInstance, MatchLabel};
use super::model::{Outputs, CLS, OBJ};
use crate::dataset::Source;
use crate::geometry::BBox;
use crate::scalar::{sigmoid, softmax, softplus, Scalar};

/// Box deltas are regressed in units of these standard deviations.
pub const DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Encode `gt` relative to `anchor`.
pub fn encode<T: Scalar>(anchor: &BBox<T>, gt: &BBox<T>) -> [T; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / anchor.w / T::of(DELTA_STD[0]),
        (gcy - acy) / anchor.h / T::of(DELTA_STD[1]),
        (gt.w / anchor.w).ln() / T::of(DELTA_STD[2]),
        (gt.h / anchor.h).ln() / T::of(DELTA_STD[3]),
    ]
}

/// Inverse of [`encode`]. Size deltas are clamped to avoid overflow.
pub fn decode<T: Scalar>(anchor: &BBox<T>, d: &[T]) -> BBox<T> {
    let clamp = T::of(4.0);
    let (acx, acy) = anchor.center();
    let cx = acx + d[0] * T::of(DELTA_STD[0]) * anchor.w;
    let cy = acy + d[1] * T::of(DELTA_STD[1]) * anchor.h;
    let w = anchor.w * (d[2] * T::of(DELTA_STD[2])).min(clamp).exp();
    let h = anchor.h * (d[3] * T::of(DELTA_STD[3])).min(clamp).exp();
    BBox::new(cx - w * T::half(), cy - h * T::half(), w, h)
}

/// Training targets for one image over one anchor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets<T> {
    pub labels: Vec<MatchLabel>,
    /// Head class index (background is 0) per anchor; 0 unless positive.
    pub classes: Vec<usize>,
    pub deltas: Vec<[T; 4]>,
    /// Fraction of the anchor covered by its matched box.
    pub coverage: Vec<T>,
}

pub fn build_targets<T: Scalar>(grid: &AnchorGrid<T>, gt: &[GtInstance<T>], labels: Vec<MatchLabel>) -> AnchorTargets<T> {
    let n = grid.len();
    let mut classes = vec![0; n];
    let mut deltas = vec![[T::zero(); 4]; n];
    let mut coverage = vec![T::zero(); n];
    for (a, label) in labels.iter().enumerate() {
        if let MatchLabel::Positive(g) = *label {
            let anchor = &grid.anchors[a];
            let b = &gt[g].bbox;
            classes[a] = gt[g].class + 1;
            deltas[a] = encode(anchor, b);
            coverage[a] = anchor.intersection_area(b) / anchor.area();
        }
    }
    AnchorTargets { labels, classes, deltas, coverage }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_i: f64,
    /// Apply background ignore on synthetic images at all.
    pub bg_ignore: bool,
    pub apply_mask_loss_on_synthetic: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau_i: 0.0, bg_ignore: true, apply_mask_loss_on_synthetic: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objectness_loss: f64,
    pub classification_loss: f64,
    pub box_regression_loss: f64,
    pub mask_loss: f64,
    pub total: f64,
    /// True for anchors dropped by background ignore in either term.
    pub per_anchor_mask: Vec<bool>,
    pub ignored_objectness: usize,
    pub ignored_head: usize,
    pub iou_ignored: usize,
    pub positives: usize,
}

impl LossBreakdown {
    pub fn ignored_anchor_count(&self) -> usize {
        self.per_anchor_mask.iter().filter(|&&m| m).count()
    }
}

fn smooth_l1<T: Scalar>(d: T) -> (T, T) {
    let beta = T::of(SMOOTH_L1_BETA);
    if d.abs() < beta {
        (T::half() * d * d / beta, d / beta)
    } else {
        (d.abs() - T::half() * beta, d.signum())
    }
}

fn ce_with_grad<T: Scalar>(logits: &[T], target: usize, grad: &mut [T], scale: T) -> T {
    let p = softmax(logits);
    for (k, (g, &pk)) in grad.iter_mut().zip(&p).enumerate() {
        let y = if k == target { T::one() } else { T::zero() };
        *g = *g + scale * (pk - y);
    }
    -(p[target].max(T::min_positive_value())).ln()
}

fn mean_scale<T: Scalar>(n: usize) -> T {
    if n == 0 {
        T::zero()
    } else {
        T::one() / T::of(n as f64)
    }
}

/// Loss for one image, together with its gradient with respect to every output.
pub fn loss_and_grad<T: Scalar>(
    outputs: &Outputs<T>,
    targets: &AnchorTargets<T>,
    source: Source,
    cfg: &LossConfig,
) -> (LossBreakdown, Outputs<T>) {
    let n = outputs.anchors;
    assert_eq!(targets.labels.len(), n, "outputs and matches over different grids");
    let nc = outputs.num_classes;
    let box_off = CLS + nc + 1;
    let mask_off = box_off + 4;
    let tau = T::of(cfg.tau_i);
    let ignoring = source == Source::Synthetic && cfg.bg_ignore;

    let mut skip_obj = vec![false; n];
    let mut skip_head = vec![false; n];
    let mut iou_ignored = 0;
    let mut positives = 0;
    for a in 0..n {
        match targets.labels[a] {
            MatchLabel::Positive(_) => positives += 1,
            MatchLabel::IouIgnore => {
                iou_ignored += 1;
                skip_obj[a] = true;
                skip_head[a] = true;
            }
            MatchLabel::Background if ignoring => {
                skip_obj[a] = outputs.objectness(a) > tau;
                skip_head[a] = T::one() - outputs.class_probs(a)[0] > tau;
            }
            MatchLabel::Background => {}
        }
    }
    let per_anchor_mask: Vec<bool> = (0..n)
        .map(|a| targets.labels[a].is_background() && (skip_obj[a] || skip_head[a]))
        .collect();
    let ignored_objectness = (0..n).filter(|&a| targets.labels[a].is_background() && skip_obj[a]).count();
    let ignored_head = (0..n).filter(|&a| targets.labels[a].is_background() && skip_head[a]).count();

    let obj_n = skip_obj.iter().filter(|&&s| !s).count();
    let bg_head_n = (0..n).filter(|&a| targets.labels[a].is_background() && !skip_head[a]).count();
    let obj_scale: T = mean_scale(obj_n);
    let pos_scale: T = mean_scale(positives);
    let bg_scale: T = mean_scale(bg_head_n);
    let use_mask = source == Source::Real || cfg.apply_mask_loss_on_synthetic;

    let mut grad = Outputs::zeros_like(outputs);
    let (mut obj_l, mut pos_ce, mut bg_ce, mut box_l, mut mask_l) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for a in 0..n {
        let row = outputs.row(a);
        let positive = matches!(targets.labels[a], MatchLabel::Positive(_));
        let g = grad.row_mut(a);
        if !skip_obj[a] {
            let z = row[OBJ];
            let y = if positive { T::one() } else { T::zero() };
            obj_l = obj_l + softplus(z) - y * z;
            g[OBJ] = obj_scale * (sigmoid(z) - y);
        }
        if positive {
            pos_ce = pos_ce + ce_with_grad(&row[CLS..box_off], targets.classes[a], &mut g[CLS..box_off], pos_scale);
            for k in 0..4 {
                let (l, d) = smooth_l1(row[box_off + k] - targets.deltas[a][k]);
                box_l = box_l + l;
                g[box_off + k] = pos_scale * d;
            }
            if use_mask {
                let z = row[mask_off];
                let y = targets.coverage[a];
                mask_l = mask_l + softplus(z) - y * z;
                g[mask_off] = pos_scale * (sigmoid(z) - y);
            }
        } else if targets.labels[a].is_background() && !skip_head[a] {
            bg_ce = bg_ce + ce_with_grad(&row[CLS..box_off], 0, &mut g[CLS..box_off], bg_scale);
        }
    }
    let objectness_loss = (obj_l * obj_scale).as_f64();
    let classification_loss = (pos_ce * pos_scale + bg_ce * bg_scale).as_f64();
    let box_regression_loss = (box_l * pos_scale).as_f64();
    let mask_loss = (mask_l * pos_scale).as_f64();
    let breakdown = LossBreakdown {
        objectness_loss,
        classification_loss,
        box_regression_loss,
        mask_loss,
        total: objectness_loss + classification_loss + box_regression_loss + mask_loss,
        per_anchor_mask,
        ignored_objectness,
        ignored_head,
        iou_ignored,
        positives,
    };
    (breakdown, grad)
}

pub fn assemble_loss<T: Scalar>(
    outputs: &Outputs<T>,
    targets: &AnchorTargets<T>,
    source: Source,
    cfg: &LossConfig,
) -> LossBreakdown {
    loss_and_grad(outputs, targets, source, cfg).0
}
