//! Axis-aligned boxes in COCO `[x, y, w, h]` layout (top-left origin, pixels).

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box (w={w}, h={h})")]
    Degenerate { w: f64, h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    #[inline]
    pub fn x1(&self) -> T {
        self.x + self.w
    }

    #[inline]
    pub fn y1(&self) -> T {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn center(&self) -> (T, T) {
        (self.x + self.w * T::half(), self.y + self.h * T::half())
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > T::zero() && self.h > T::zero())
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let iw = self.x1().min(other.x1()) - self.x.max(other.x);
        let ih = self.y1().min(other.y1()) - self.y.max(other.y);
        if iw <= T::zero() || ih <= T::zero() {
            T::zero()
        } else {
            iw * ih
        }
    }

    /// Clip to `[0, width] x [0, height]`. The result may be degenerate.
    pub fn clip(&self, width: T, height: T) -> Self {
        let x0 = self.x.max(T::zero()).min(width);
        let y0 = self.y.max(T::zero()).min(height);
        let x1 = self.x1().max(T::zero()).min(width);
        let y1 = self.y1().max(T::zero()).min(height);
        Self::from_corners(x0, y0, x1, y1)
    }

    pub fn within(&self, width: T, height: T) -> bool {
        self.x >= T::zero() && self.y >= T::zero() && self.x1() <= width && self.y1() <= height
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x: U::of(self.x.as_f64()),
            y: U::of(self.y.as_f64()),
            w: U::of(self.w.as_f64()),
            h: U::of(self.h.as_f64()),
        }
    }
}

/// Intersection over union; rejects zero-area inputs.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> Result<T, GeometryError> {
    for bx in [a, b] {
        if bx.is_degenerate() {
            return Err(GeometryError::Degenerate { w: bx.w.as_f64(), h: bx.h.as_f64() });
        }
    }
    Ok(iou_unchecked(a, b))
}

/// IoU for boxes already known to be non-degenerate.
#[inline]
pub fn iou_unchecked<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

impl<T: Scalar> Serialize for BBox<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y, self.w, self.h].serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for BBox<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, w, h] = <[T; 4]>::deserialize(d)?;
        Ok(Self { x, y, w, h })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts unit pixels covered by both / either integer box.
    fn raster_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
        let inside = |bx: (i32, i32, i32, i32), px: i32, py: i32| {
            px >= bx.0 && px < bx.0 + bx.2 && py >= bx.1 && py < bx.1 + bx.3
        };
        let (mut inter, mut union) = (0u64, 0u64);
        for py in -1..80 {
            for px in -1..80 {
                let (ia, ib) = (inside(a, px, py), inside(b, px, py));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn identical_and_disjoint() {
        let a = BBox::new(3.0, 4.0, 10.0, 7.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = BBox::new(20.0, 4.0, 5.0, 5.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_shifted_square() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        let oracle = raster_iou((0, 0, 10, 10), (5, 0, 10, 10));
        assert!((oracle - 50.0 / 150.0).abs() < 1e-15);
        assert!((iou(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!((iou(&a.cast::<f32>(), &b.cast::<f32>()).unwrap() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_rejected() {
        let a = BBox::new(0.0, 0.0, 0.0, 10.0);
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(iou(&a, &b), Err(GeometryError::Degenerate { .. })));
    }

    #[test]
    fn clip_keeps_inside() {
        let b = BBox::new(-4.0, 60.0, 16.0, 16.0).clip(64.0, 64.0);
        assert_eq!(b, BBox::new(0.0, 60.0, 12.0, 4.0));
        assert!(b.within(64.0, 64.0));
    }

    #[test]
    fn json_is_coco_array() {
        let b = BBox::new(1.0, 2.0, 3.0, 4.5);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.5]");
        let back: BBox<f64> = serde_json::from_str("[1,2,3,4.5]").unwrap();
        assert_eq!(back, b);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_matches_raster(
            ax in 0i32..40, ay in 0i32..40, aw in 1i32..30, ah in 1i32..30,
            bx in 0i32..40, by in 0i32..40, bw in 1i32..30, bh in 1i32..30,
        ) {
            let a = BBox::new(ax as f64, ay as f64, aw as f64, ah as f64);
            let b = BBox::new(bx as f64, by as f64, bw as f64, bh as f64);
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - raster_iou((ax, ay, aw, ah), (bx, by, bw, bh))).abs() < 1e-9);
        }
    }
}
