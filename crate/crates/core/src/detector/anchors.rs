//! Anchor grid and two-threshold anchor/ground-truth assignment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_unchecked, BBox};
use crate::scalar::Scalar;

pub const POSITIVE_IOU: f64 = 0.5;
pub const BACKGROUND_IOU: f64 = 0.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("stride must be positive")]
    ZeroStride,
    #[error("at least one anchor scale is required")]
    NoScales,
    #[error("image {width}x{height} is smaller than the stride {stride}")]
    ImageTooSmall { width: u32, height: u32, stride: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub stride: u32,
    pub scales: Vec<u32>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { stride: 8, scales: vec![16, 24] }
    }
}

/// Square anchors centered on each stride cell, one per scale, clipped to the
/// image. Ordered row-major by cell, scale fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid<T> {
    pub anchors: Vec<BBox<T>>,
    pub scale_index: Vec<usize>,
    pub num_scales: usize,
}

impl<T: Scalar> AnchorGrid<T> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Cells that do not fit a whole stride are dropped.
pub fn build_anchors<T: Scalar>(
    width: u32,
    height: u32,
    stride: u32,
    scales: &[u32],
) -> Result<AnchorGrid<T>, AnchorError> {
    if stride == 0 {
        return Err(AnchorError::ZeroStride);
    }
    if scales.is_empty() {
        return Err(AnchorError::NoScales);
    }
    let (cols, rows) = (width / stride, height / stride);
    if cols == 0 || rows == 0 {
        return Err(AnchorError::ImageTooSmall { width, height, stride });
    }
    let (w, h) = (T::of(width as f64), T::of(height as f64));
    let mut anchors = Vec::with_capacity((cols * rows) as usize * scales.len());
    let mut scale_index = Vec::with_capacity(anchors.capacity());
    for r in 0..rows {
        for c in 0..cols {
            let cx = (c as f64 + 0.5) * stride as f64;
            let cy = (r as f64 + 0.5) * stride as f64;
            for (k, &s) in scales.iter().enumerate() {
                let half = s as f64 / 2.0;
                let b = BBox::new(T::of(cx - half), T::of(cy - half), T::of(s as f64), T::of(s as f64));
                anchors.push(b.clip(w, h));
                scale_index.push(k);
            }
        }
    }
    Ok(AnchorGrid { anchors, scale_index, num_scales: scales.len() })
}

/// A ground-truth box as seen by the matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtInstance<T> {
    pub bbox: BBox<T>,
    /// Dense class index, `0..num_categories`.
    pub class: usize,
    /// Removed by instance filtering: never a positive, and anchors on it
    /// are ignored rather than treated as background.
    pub filtered_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLabel {
    /// Index into the ground-truth slice.
    Positive(usize),
    Background,
    IouIgnore,
}

impl MatchLabel {
    pub fn is_background(self) -> bool {
        self == MatchLabel::Background
    }
}

/// Positive if best IoU over active ground truth is `>= 0.5`, background if
/// `< 0.4`, ignored in between. Anchors overlapping a filtered-out box with
/// IoU `>= 0.5` are always ignored.
pub fn match_anchors<T: Scalar>(grid: &AnchorGrid<T>, gt: &[GtInstance<T>]) -> Vec<MatchLabel> {
    let pos = T::of(POSITIVE_IOU);
    let bg = T::of(BACKGROUND_IOU);
    grid.anchors
        .iter()
        .map(|a| {
            if a.is_degenerate() {
                return MatchLabel::IouIgnore;
            }
            let mut best = (T::zero(), None);
            let mut filtered_best = T::zero();
            for (i, g) in gt.iter().enumerate() {
                let v = iou_unchecked(a, &g.bbox);
                if g.filtered_out {
                    filtered_best = filtered_best.max(v);
                } else if v > best.0 {
                    best = (v, Some(i));
                }
            }
            if filtered_best >= pos {
                return MatchLabel::IouIgnore;
            }
            match best {
                (v, Some(i)) if v >= pos => MatchLabel::Positive(i),
                (v, _) if v < bg => MatchLabel::Background,
                _ => MatchLabel::IouIgnore,
            }
        })
        .collect()
}
