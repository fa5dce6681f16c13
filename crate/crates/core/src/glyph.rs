//! Procedural glyph world used as the desk-scale stand-in for natural images.
//!
//! Each category is drawn as one filled shape with its own hue. Instances vary
//! in hue, brightness and size, so a detector must generalize from examples
//! rather than memorize a template.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphShape {
    Square,
    Disk,
    Diamond,
    Ring,
    Cross,
    Triangle,
}

const SHAPES: [GlyphShape; 6] = [
    GlyphShape::Square,
    GlyphShape::Disk,
    GlyphShape::Diamond,
    GlyphShape::Ring,
    GlyphShape::Cross,
    GlyphShape::Triangle,
];

impl GlyphShape {
    /// Whether pixel center `(u, v)` in unit box coordinates `[0,1]^2` is inked.
    pub fn covers(self, u: f64, v: f64) -> bool {
        let (dx, dy) = (u - 0.5, v - 0.5);
        match self {
            GlyphShape::Square => true,
            GlyphShape::Disk => dx * dx + dy * dy <= 0.25,
            GlyphShape::Diamond => dx.abs() + dy.abs() <= 0.5,
            GlyphShape::Ring => dx.abs().max(dy.abs()) >= 0.25,
            GlyphShape::Cross => dx.abs() <= 0.17 || dy.abs() <= 0.17,
            GlyphShape::Triangle => dx.abs() <= 0.5 * v,
        }
    }
}

/// Distinctive (shape, hue) for one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub shape: GlyphShape,
    /// Hue in degrees.
    pub hue: f64,
}

/// Per-instance appearance drawn from the glyph's distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
}

/// Category id to glyph, plus the per-instance variation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphPalette {
    pub glyphs: BTreeMap<u64, Glyph>,
    /// Half-width of the uniform hue jitter, in degrees.
    pub hue_jitter: f64,
}

impl GlyphPalette {
    /// Hues evenly spaced around the wheel; jitter is `jitter_fraction` of
    /// half the spacing, so `< 1` keeps categories disjoint in hue.
    pub fn evenly_spaced(category_ids: &[u64], jitter_fraction: f64) -> Self {
        let n = category_ids.len().max(1) as f64;
        let spacing = 360.0 / n;
        let glyphs = category_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, Glyph { shape: SHAPES[i % SHAPES.len()], hue: i as f64 * spacing }))
            .collect();
        Self { glyphs, hue_jitter: jitter_fraction * spacing * 0.5 }
    }

    pub fn get(&self, category_id: u64) -> Option<&Glyph> {
        self.glyphs.get(&category_id)
    }

    pub fn sample_appearance<R: Rng + ?Sized>(&self, glyph: &Glyph, rng: &mut R) -> Appearance {
        let jitter = if self.hue_jitter > 0.0 {
            rng.random_range(-self.hue_jitter..=self.hue_jitter)
        } else {
            0.0
        };
        Appearance {
            hue: (glyph.hue + jitter).rem_euclid(360.0),
            saturation: rng.random_range(0.75..=0.95),
            value: rng.random_range(0.7..=1.0),
        }
    }

    /// Category whose nominal hue is closest to `hue`.
    pub fn nearest_category(&self, hue: f64) -> Option<u64> {
        self.glyphs
            .iter()
            .map(|(&id, g)| (id, hue_distance(hue, g.hue)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(id, _)| id)
    }
}

pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees and saturation of an RGB triple in `[0, 1]`.
pub fn rgb_to_hue_sat(rgb: [f64; 3]) -> (f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 1e-12 {
        return (0.0, 0.0);
    }
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    (h, if max > 0.0 { d / max } else { 0.0 })
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covered by a box, clamped to the image.
pub fn pixel_span(b: &BBox<f64>, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let x0 = b.x.round().clamp(0.0, width as f64) as u32;
    let y0 = b.y.round().clamp(0.0, height as f64) as u32;
    let x1 = b.x1().round().clamp(0.0, width as f64) as u32;
    let y1 = b.y1().round().clamp(0.0, height as f64) as u32;
    (x0, y0, x1, y1)
}

/// Low-saturation noisy background with a per-image gray level.
pub fn paint_background<R: Rng + ?Sized>(img: &mut RgbImage, rng: &mut R) {
    let level: f64 = rng.random_range(0.15..=0.35);
    let tint = [
        rng.random_range(-0.02..=0.02),
        rng.random_range(-0.02..=0.02),
        rng.random_range(-0.02..=0.02),
    ];
    for px in img.pixels_mut() {
        let n: f64 = rng.random_range(-0.03..=0.03);
        *px = Rgb([
            to_u8(level + tint[0] + n),
            to_u8(level + tint[1] + n),
            to_u8(level + tint[2] + n),
        ]);
    }
}

/// Fill a box region with a flat noisy color (used to erase content).
pub fn fill_box<R: Rng + ?Sized>(img: &mut RgbImage, b: &BBox<f64>, color: [f64; 3], rng: &mut R) {
    let (x0, y0, x1, y1) = pixel_span(b, img.width(), img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let n: f64 = rng.random_range(-0.03..=0.03);
            img.put_pixel(x, y, Rgb([to_u8(color[0] + n), to_u8(color[1] + n), to_u8(color[2] + n)]));
        }
    }
}

/// Mean color of the one-pixel frame just outside `b` (clipped).
pub fn surrounding_color(img: &RgbImage, b: &BBox<f64>) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0, x1, y1) = pixel_span(b, img.width(), img.height());
    let (x0, y0, x1, y1) = (x0 as i64 - 1, y0 as i64 - 1, x1 as i64, y1 as i64);
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    let mut take = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                acc[c] += p[c] as f64 / 255.0;
            }
            n += 1.0;
        }
    };
    for x in x0..=x1 {
        take(x, y0);
        take(x, y1);
    }
    for y in (y0 + 1)..y1 {
        take(x0, y);
        take(x1, y);
    }
    if n == 0.0 {
        return [0.25; 3];
    }
    acc.map(|v| v / n)
}

/// Draw a glyph filling `b`.
pub fn render_glyph<R: Rng + ?Sized>(
    img: &mut RgbImage,
    b: &BBox<f64>,
    shape: GlyphShape,
    appearance: Appearance,
    rng: &mut R,
) {
    let (x0, y0, x1, y1) = pixel_span(b, img.width(), img.height());
    let color = hsv_to_rgb(appearance.hue, appearance.saturation, appearance.value);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - b.x) / b.w;
            let v = (y as f64 + 0.5 - b.y) / b.h;
            if shape.covers(u, v) {
                let n: f64 = rng.random_range(-0.02..=0.02);
                img.put_pixel(
                    x,
                    y,
                    Rgb([to_u8(color[0] + n), to_u8(color[1] + n), to_u8(color[2] + n)]),
                );
            }
        }
    }
}

/// Mean hue of strongly saturated pixels inside `b`, if enough of them exist.
/// Used by tests to read back which glyph occupies a region.
pub fn dominant_hue(img: &RgbImage, b: &BBox<f64>) -> Option<f64> {
    let (x0, y0, x1, y1) = pixel_span(b, img.width(), img.height());
    let (mut sx, mut sy, mut n, mut total) = (0.0, 0.0, 0usize, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            total += 1;
            let p = img.get_pixel(x, y);
            let rgb = [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0];
            let (h, s) = rgb_to_hue_sat(rgb);
            if s > 0.5 {
                sx += h.to_radians().cos();
                sy += h.to_radians().sin();
                n += 1;
            }
        }
    }
    if total == 0 || (n as f64) < 0.2 * total as f64 {
        return None;
    }
    Some(sy.atan2(sx).to_degrees().rem_euclid(360.0))
}
