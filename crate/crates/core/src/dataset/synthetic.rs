//! Synthetic plate images: a textured background with one rotated bright
//! quadrilateral carrying dark glyph strokes. The mask covers exactly the
//! quadrilateral.

use rand::Rng;

use super::ImageSample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Plate placement in pixel coordinates. Pixel `(i, j)` has its centre at
/// `(i + ½, j + ½)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateGeometry {
    pub center_y: f64,
    pub center_x: f64,
    pub plate_h: f64,
    pub plate_w: f64,
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
}

impl PlateGeometry {
    /// Extents `(h, w)` of the axis-aligned box around the rotated plate.
    fn bounding_extent(&self) -> (f64, f64) {
        let (s, c) = (self.angle.sin().abs(), self.angle.cos().abs());
        (
            self.plate_w * s + self.plate_h * c,
            self.plate_w * c + self.plate_h * s,
        )
    }

    /// Plate-local coordinates `(v, u)` of a point; `u` runs along the width.
    fn local(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.center_y, x - self.center_x);
        (dy * c + dx * s, dx * c - dy * s)
    }

    fn contains_local(&self, v: f64, u: f64) -> bool {
        -self.plate_h / 2.0 <= v && v < self.plate_h / 2.0 && -self.plate_w / 2.0 <= u && u < self.plate_w / 2.0
    }
}

const MIN_AREA: f64 = 0.02;
const MAX_AREA: f64 = 0.30;

/// Segments of a seven-segment cell in unit coordinates `(v0, u0, v1, u1)`.
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (0.0, 0.0, 0.12, 1.0),
    (0.44, 0.0, 0.56, 1.0),
    (0.88, 0.0, 1.0, 1.0),
    (0.0, 0.0, 0.5, 0.2),
    (0.5, 0.0, 1.0, 0.2),
    (0.0, 0.8, 0.5, 1.0),
    (0.5, 0.8, 1.0, 1.0),
];

/// Renders one sample with the plate at `geom`.
pub fn render_plate<R: Rng + ?Sized>(h: usize, w: usize, geom: &PlateGeometry, rng: &mut R) -> Result<ImageSample> {
    let (bh, bw) = geom.bounding_extent();
    let inside = geom.center_y - bh / 2.0 >= 0.0
        && geom.center_y + bh / 2.0 <= h as f64
        && geom.center_x - bw / 2.0 >= 0.0
        && geom.center_x + bw / 2.0 <= w as f64;
    if !(inside && geom.plate_h > 0.0 && geom.plate_w > 0.0) {
        return Err(Error::Config(format!(
            "plate {:.1}x{:.1} at ({:.1}, {:.1}) does not fit a {h}x{w} image",
            geom.plate_h, geom.plate_w, geom.center_y, geom.center_x
        )));
    }

    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let (gy, gx) = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
    let (fy, fx, phase) = (
        rng.random_range(1.0..4.0f32),
        rng.random_range(1.0..4.0f32),
        rng.random_range(0.0..std::f32::consts::TAU),
    );
    let blobs: Vec<([f64; 4], f32)> = (0..rng.random_range(1..4))
        .map(|_| {
            let bh = rng.random_range(0.05..0.3) * h as f64;
            let bw = rng.random_range(0.05..0.3) * w as f64;
            let y0 = rng.random_range(0.0..h as f64 - bh);
            let x0 = rng.random_range(0.0..w as f64 - bw);
            ([y0, x0, y0 + bh, x0 + bw], rng.random_range(0.02..0.6))
        })
        .collect();
    let plate_color: [f32; 3] = {
        let v = rng.random_range(0.78..0.95);
        [v, v, v * rng.random_range(0.8..1.0)]
    };

    let glyphs = rng.random_range(4..=7usize);
    let cell_w = 0.84 / glyphs as f64;
    let strokes: Vec<[bool; 7]> = (0..glyphs)
        .map(|_| loop {
            let s: [bool; 7] = std::array::from_fn(|_| rng.random_bool(0.5));
            if s.iter().filter(|&&b| b).count() >= 2 {
                break s;
            }
        })
        .collect();
    let ink: f32 = rng.random_range(0.03..0.2);

    let mut image = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let (ny, nx) = (y as f32 / h as f32, x as f32 / w as f32);
            let texture = 0.06 * (fy * ny * std::f32::consts::TAU + phase).sin() * (fx * nx * std::f32::consts::TAU).cos();
            let mut px: [f32; 3] = std::array::from_fn(|k| base[k] + gy * ny + gx * nx + texture);
            for (b, v) in &blobs {
                if y >= b[0] && y < b[2] && x >= b[1] && x < b[3] {
                    px = [*v; 3];
                }
            }
            let (v, u) = geom.local(y, x);
            let on_plate = geom.contains_local(v, u);
            if on_plate {
                px = plate_color;
                // Unit coordinates inside the plate.
                let pv = v / geom.plate_h + 0.5;
                let pu = u / geom.plate_w + 0.5;
                if (0.2..0.8).contains(&pv) && (0.08..0.92).contains(&pu) {
                    let g = ((pu - 0.08) / cell_w) as usize;
                    let cu = ((pu - 0.08) / cell_w - g as f64 - 0.15) / 0.7;
                    let cv = (pv - 0.2) / 0.6;
                    let hit = g < glyphs
                        && SEGMENTS
                            .iter()
                            .zip(&strokes[g])
                            .any(|(s, &on)| on && cv >= s.0 && cv < s.2 && cu >= s.1 && cu < s.3);
                    if hit {
                        px = [ink; 3];
                    }
                }
            }
            for p in px {
                image.push((p + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0));
            }
            let m = if on_plate { 1.0 } else { 0.0 };
            mask.extend_from_slice(&[m; 3]);
        }
    }
    Ok(ImageSample {
        id: String::new(),
        image: Tensor::new([h, w, 3], image)?,
        mask: Tensor::new([h, w, 3], mask)?,
    })
}

/// `count` samples of size `h × w`. Sample `i` depends only on `(seed, i)`.
/// Plates cover between 2% and 30% of the image and are rotated by up to 25°.
pub fn generate_synthetic(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if count == 0 {
        return Err(Error::Config("synthetic sample count must be positive".into()));
    }
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("synthetic images must be at least 16x16, got {h}x{w}")));
    }
    (0..count)
        .map(|i| {
            let mut r = rng::stream_at(seed, &[0x5A7, i as u64]);
            for _ in 0..1000 {
                let area = r.random_range(0.04..0.2) * (h * w) as f64;
                let aspect = r.random_range(2.0..4.0);
                let plate_h = (area / aspect).sqrt();
                let geom0 = PlateGeometry {
                    center_y: 0.0,
                    center_x: 0.0,
                    plate_h,
                    plate_w: aspect * plate_h,
                    angle: r.random_range(-25.0f64..25.0).to_radians(),
                };
                let (bh, bw) = geom0.bounding_extent();
                if bh >= h as f64 || bw >= w as f64 {
                    continue;
                }
                let geom = PlateGeometry {
                    center_y: r.random_range(bh / 2.0..h as f64 - bh / 2.0),
                    center_x: r.random_range(bw / 2.0..w as f64 - bw / 2.0),
                    ..geom0
                };
                let mut s = render_plate(h, w, &geom, &mut r)?;
                let frac = s.mask.sum() as f64 / s.mask.len() as f64;
                if (MIN_AREA..=MAX_AREA).contains(&frac) {
                    s.id = format!("syn_{i:05}");
                    return Ok(s);
                }
            }
            Err(Error::Config(format!("cannot place a plate in a {h}x{w} image")))
        })
        .collect()
}
