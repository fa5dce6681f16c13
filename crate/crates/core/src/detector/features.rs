//! Closed-form per-anchor features: region means of pixel saturation,
//! chroma and edge strength over the anchor window, its center, its
//! surrounding ring and a 3x3 grid of sub-cells. Computed with integral
//! images.

use image::RgbImage;

use super::anchors::AnchorGrid;
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// Per-pixel channels: saturation, chroma r/g/b, edge strength.
const CHANNELS: usize = 5;
const SAT: usize = 0;
const CHROMA: usize = 1;
const EDGE: usize = 4;

/// Number of non-indicator features.
pub const BASE_FEATURES: usize = 20;

pub fn feature_dim(num_scales: usize) -> usize {
    num_scales + BASE_FEATURES
}

/// Row-major `anchors x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

struct Integral {
    w: usize,
    h: usize,
    /// `(h + 1) x (w + 1) x CHANNELS` prefix sums.
    sums: Vec<f64>,
}

impl Integral {
    fn new(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let lum = |x: usize, y: usize| {
            let p = img.get_pixel(x as u32, y as u32);
            (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
        };
        let stride = (w + 1) * CHANNELS;
        let mut sums = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = [0.0; CHANNELS];
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                let rgb = [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0];
                let max = rgb[0].max(rgb[1]).max(rgb[2]);
                let min = rgb[0].min(rgb[1]).min(rgb[2]);
                let mean = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                let l = lum(x, y);
                let gx = if x + 1 < w { (lum(x + 1, y) - l).abs() } else { 0.0 };
                let gy = if y + 1 < h { (lum(x, y + 1) - l).abs() } else { 0.0 };
                let px = [max - min, rgb[0] - mean, rgb[1] - mean, rgb[2] - mean, gx + gy];
                for c in 0..CHANNELS {
                    row[c] += px[c];
                    let above = sums[y * stride + (x + 1) * CHANNELS + c];
                    sums[(y + 1) * stride + (x + 1) * CHANNELS + c] = above + row[c];
                }
            }
        }
        Self { w, h, sums }
    }

    fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.sums[y * (self.w + 1) * CHANNELS + x * CHANNELS + c]
    }

    /// Pixel rectangle covering a float box, clamped to the image.
    fn rect(&self, b: &BBox<f64>) -> (usize, usize, usize, usize) {
        let cl = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
        (cl(b.x, self.w), cl(b.y, self.h), cl(b.x1(), self.w), cl(b.y1(), self.h))
    }

    /// Channel sums and pixel count over a rectangle.
    fn sum(&self, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> ([f64; CHANNELS], f64) {
        let mut out = [0.0; CHANNELS];
        if x1 <= x0 || y1 <= y0 {
            return (out, 0.0);
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.at(x1, y1, c) - self.at(x0, y1, c) - self.at(x1, y0, c) + self.at(x0, y0, c);
        }
        (out, ((x1 - x0) * (y1 - y0)) as f64)
    }

    fn mean(&self, b: &BBox<f64>) -> [f64; CHANNELS] {
        let (s, n) = self.sum(self.rect(b));
        if n == 0.0 {
            [0.0; CHANNELS]
        } else {
            s.map(|v| v / n)
        }
    }

    /// Mean over `outer \ inner`.
    fn ring_mean(&self, outer: &BBox<f64>, inner: &BBox<f64>) -> [f64; CHANNELS] {
        let (so, no) = self.sum(self.rect(outer));
        let (si, ni) = self.sum(self.rect(inner));
        let n = no - ni;
        if n <= 0.0 {
            return [0.0; CHANNELS];
        }
        let mut out = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            out[c] = (so[c] - si[c]) / n;
        }
        out
    }
}

fn window_features(ii: &Integral, a: &BBox<f64>) -> [f64; BASE_FEATURES] {
    let (w, h) = (a.w, a.h);
    let center = BBox::new(a.x + w / 4.0, a.y + h / 4.0, w / 2.0, h / 2.0);
    let outer = BBox::new(a.x - w / 4.0, a.y - h / 4.0, w * 1.5, h * 1.5);

    let mw = ii.mean(a);
    let mc = ii.mean(&center);
    let ring = ii.ring_mean(&outer, a);
    let mut f = [0.0; BASE_FEATURES];
    f[..11].copy_from_slice(&[
        mw[SAT],
        mc[SAT],
        ring[SAT],
        mw[CHROMA],
        mw[CHROMA + 1],
        mw[CHROMA + 2],
        mc[CHROMA],
        mc[CHROMA + 1],
        mc[CHROMA + 2],
        mw[EDGE],
        mc[EDGE],
    ]);
    // Saturation over a 3x3 grid of sub-cells.
    for (k, slot) in f[11..].iter_mut().enumerate() {
        let (i, j) = ((k % 3) as f64, (k / 3) as f64);
        let cell = BBox::new(a.x + i * w / 3.0, a.y + j * h / 3.0, w / 3.0, h / 3.0);
        *slot = ii.mean(&cell)[SAT];
    }
    f
}

/// Features for every anchor of `grid` on `img`. The first `num_scales`
/// columns are one-hot scale indicators and act as per-scale biases.
pub fn featurize<T: Scalar>(img: &RgbImage, grid: &AnchorGrid<T>) -> FeatureMatrix<T> {
    let ii = Integral::new(img);
    let dim = feature_dim(grid.num_scales);
    let mut data = Vec::with_capacity(grid.len() * dim);
    for (a, &k) in grid.anchors.iter().zip(&grid.scale_index) {
        for s in 0..grid.num_scales {
            data.push(if s == k { T::one() } else { T::zero() });
        }
        let f = window_features(&ii, &a.cast::<f64>());
        data.extend(f.iter().map(|&v| T::of(v)));
    }
    FeatureMatrix { rows: grid.len(), dim, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::anchors::build_anchors;
    use image::Rgb;

    fn brute_mean(img: &RgbImage, x0: u32, y0: u32, x1: u32, y1: u32) -> f64 {
        let mut s = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = img.get_pixel(x, y).0.map(|v| v as f64 / 255.0);
                s += p[0].max(p[1]).max(p[2]) - p[0].min(p[1]).min(p[2]);
            }
        }
        s / ((x1 - x0) * (y1 - y0)) as f64
    }

    #[test]
    fn integral_means_match_brute_force() {
        let mut img = RgbImage::new(32, 32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) * 5 % 256) as u8]);
        }
        let grid = build_anchors::<f64>(32, 32, 8, &[8, 16]).unwrap();
        let f = featurize(&img, &grid);
        assert_eq!(f.dim, 22);
        for (i, a) in grid.anchors.iter().enumerate() {
            let want = brute_mean(&img, a.x as u32, a.y as u32, a.x1() as u32, a.y1() as u32);
            assert!((f.row(i)[2] - want).abs() < 1e-9);
            assert_eq!(f.row(i)[grid.scale_index[i]], 1.0);
        }
    }

    #[test]
    fn saturated_square_lights_up_its_anchor() {
        let mut img = RgbImage::from_pixel(32, 32, Rgb([60, 60, 60]));
        for y in 4..20 {
            for x in 4..20 {
                img.put_pixel(x, y, Rgb([230, 30, 30]));
            }
        }
        let grid = build_anchors::<f32>(32, 32, 16, &[16]).unwrap();
        let f = featurize(&img, &grid);
        // At stride 16 the square straddles anchor 0 and its neighbours.
        assert!((f.row(0)[1] - 144.0 / 256.0 * 200.0 / 255.0).abs() < 1e-5);
        let grid = build_anchors::<f32>(32, 32, 8, &[16]).unwrap();
        let f = featurize(&img, &grid);
        let best = (0..grid.len()).max_by(|&a, &b| f.row(a)[1].total_cmp(&f.row(b)[1])).unwrap();
        assert_eq!(grid.anchors[best], BBox::new(4.0, 4.0, 16.0, 16.0));
        assert!(f.row(best)[3] < 1e-6, "ring is background");
        assert!(f.row(best)[4] > 0.3, "red chroma");
    }
}
