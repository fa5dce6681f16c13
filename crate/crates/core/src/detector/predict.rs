//! Decoding anchor outputs into scored, suppressed detections.

use image::RgbImage;

use super::features::featurize;
use super::loss::decode;
use super::model::forward;
use super::train::TrainState;
use super::DetectorError;
use crate::detection::{nms_per_category, Detection};
use crate::scalar::Scalar;

pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.05;

/// Score of category `c` at an anchor is `objectness * p(c)`. Boxes are
/// clipped to the image; those that collapse are dropped.
pub fn predict<T: Scalar>(
    state: &TrainState<T>,
    image_id: u64,
    image: &RgbImage,
    nms_iou: f64,
    score_floor: f64,
) -> Result<Vec<Detection>, DetectorError> {
    if image.dimensions() != state.image_size {
        return Err(DetectorError::MixedImageSizes { expected: state.image_size, got: image.dimensions() });
    }
    let grid = state.grid()?;
    let out = forward(&state.params, &featurize(image, &grid))?;
    let (w, h) = (state.image_size.0 as f64, state.image_size.1 as f64);
    let mut dets = Vec::new();
    for a in 0..out.anchors {
        let obj = out.objectness(a).as_f64();
        if obj < score_floor {
            continue;
        }
        let probs = out.class_probs(a);
        let bbox = decode(&grid.anchors[a], out.deltas(a)).cast::<f64>().clip(w, h);
        if bbox.is_degenerate() {
            continue;
        }
        for (k, &cat) in state.category_ids.iter().enumerate() {
            let score = (obj * probs[k + 1].as_f64()).clamp(0.0, 1.0);
            if score >= score_floor {
                dets.push(Detection { image_id, category_id: cat, bbox, score });
            }
        }
    }
    Ok(nms_per_category(&dets, nms_iou))
}
