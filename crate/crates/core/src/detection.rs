//! Predicted boxes and per-category greedy non-maximum suppression.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::Box64;
use crate::geometry::iou_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: Box64,
    pub score: f64,
}

fn by_score_desc(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy NMS within each category; output sorted by score, descending.
/// Ties keep input order.
pub fn nms_per_category(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut groups: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups.entry(d.category_id).or_default().push(*d);
    }
    let mut kept = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(by_score_desc);
        let mut survivors: Vec<Detection> = Vec::new();
        for d in group {
            if survivors.iter().all(|s| iou_unchecked(&s.bbox, &d.bbox) <= iou_threshold) {
                survivors.push(d);
            }
        }
        kept.extend(survivors);
    }
    kept.sort_by(by_score_desc);
    kept
}

pub fn write_jsonl<W: Write>(dets: &[Detection], mut w: W) -> std::io::Result<()> {
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Detection>, serde_json::Error> {
    r.lines()
        .map(|l| l.map_err(serde_json::Error::io))
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn det(cat: u64, x: f64, score: f64) -> Detection {
        Detection { image_id: 1, category_id: cat, bbox: BBox::new(x, 0.0, 10.0, 10.0), score }
    }

    #[test]
    fn suppresses_within_category_only() {
        let dets = vec![det(1, 0.0, 0.9), det(1, 1.0, 0.8), det(2, 1.0, 0.7), det(1, 30.0, 0.6)];
        let out = nms_per_category(&dets, 0.5);
        assert_eq!(out, vec![det(1, 0.0, 0.9), det(2, 1.0, 0.7), det(1, 30.0, 0.6)]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dets = vec![det(1, 0.0, 0.9), det(3, 2.0, 0.1)];
        let mut buf = Vec::new();
        write_jsonl(&dets, &mut buf).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), dets);
    }

    proptest! {
        #[test]
        fn nms_idempotent_and_sorted(raw in prop::collection::vec((1u64..3, 0.0f64..40.0, 0.0f64..1.0), 0..20)) {
            let dets: Vec<Detection> = raw.iter().map(|&(c, x, s)| det(c, x, s)).collect();
            let once = nms_per_category(&dets, 0.5);
            prop_assert_eq!(nms_per_category(&once, 0.5), once.clone());
            prop_assert!(once.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
