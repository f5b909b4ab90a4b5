//! Per-image geometric augmentation shared by the cube, its RGB companion and
//! the label map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hsicube::{Datacube, LabelMap, LoadedImage, IGNORE};

pub const SHIFT_LIMIT: f64 = 0.0625;
pub const SCALE_LIMIT: f64 = 0.1;
pub const ROTATE_LIMIT_DEG: f64 = 45.0;
pub const APPLY_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flip {
    Horizontal,
    Vertical,
}

/// Drawn transform; `None` entries are not applied.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Fractions of width and height.
    pub shift: Option<(f64, f64)>,
    pub scale: Option<f64>,
    pub rotate_deg: Option<f64>,
    pub flip: Option<Flip>,
}

impl AugmentParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut p = AugmentParams::default();
        if rng.gen::<f64>() < APPLY_PROBABILITY {
            p.shift = Some((
                rng.gen_range(-SHIFT_LIMIT..=SHIFT_LIMIT),
                rng.gen_range(-SHIFT_LIMIT..=SHIFT_LIMIT),
            ));
        }
        if rng.gen::<f64>() < APPLY_PROBABILITY {
            p.scale = Some(1.0 + rng.gen_range(-SCALE_LIMIT..=SCALE_LIMIT));
        }
        if rng.gen::<f64>() < APPLY_PROBABILITY {
            p.rotate_deg = Some(rng.gen_range(-ROTATE_LIMIT_DEG..=ROTATE_LIMIT_DEG));
        }
        if rng.gen::<f64>() < APPLY_PROBABILITY {
            p.flip = Some(if rng.gen::<bool>() {
                Flip::Horizontal
            } else {
                Flip::Vertical
            });
        }
        p
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentParams::default()
    }

    /// Output pixel → source position. Forward order: flip, then scale and
    /// rotate about the image center, then shift.
    fn source(&self, w: usize, h: usize, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (mut u, mut v) = (x, y);
        if let Some((sx, sy)) = self.shift {
            u -= sx * w as f64;
            v -= sy * h as f64;
        }
        let (mut du, mut dv) = (u - cx, v - cy);
        if let Some(deg) = self.rotate_deg {
            let (s, c) = (-deg.to_radians()).sin_cos();
            (du, dv) = (c * du - s * dv, s * du + c * dv);
        }
        if let Some(k) = self.scale {
            du /= k;
            dv /= k;
        }
        let (mut u, mut v) = (du + cx, dv + cy);
        match self.flip {
            Some(Flip::Horizontal) => u = w as f64 - 1.0 - u,
            Some(Flip::Vertical) => v = h as f64 - 1.0 - v,
            None => {}
        }
        (u, v)
    }
}

/// Half a pixel of slack so exact grid positions never fall out of frame.
const FRAME_TOL: f64 = 1e-6;

fn warp_cube(cube: &Datacube, p: &AugmentParams) -> Datacube {
    let (w, h, c) = (cube.width(), cube.height(), cube.channels());
    let mut out = vec![0f32; w * h * c];
    let data = cube.data();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = p.source(w, h, x as f64, y as f64);
            if u < -FRAME_TOL || v < -FRAME_TOL || u > w as f64 - 1.0 + FRAME_TOL || v > h as f64 - 1.0 + FRAME_TOL {
                continue;
            }
            let u = u.clamp(0.0, w as f64 - 1.0);
            let v = v.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = ((u - x0 as f64) as f32, (v - y0 as f64) as f32);
            let dst = &mut out[(y * w + x) * c..][..c];
            for (ch, d) in dst.iter_mut().enumerate() {
                let at = |xx: usize, yy: usize| data[(yy * w + xx) * c + ch];
                let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                let bot = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                *d = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    cube.with_data(out)
}

fn warp_labels(labels: &LabelMap, p: &AugmentParams) -> LabelMap {
    let (w, h) = (labels.width(), labels.height());
    let mut out = vec![IGNORE; w * h];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = p.source(w, h, x as f64, y as f64);
            let (ui, vi) = (u.round(), v.round());
            if ui >= 0.0 && vi >= 0.0 && ui < w as f64 && vi < h as f64 {
                out[y * w + x] = labels.get(ui as usize, vi as usize);
            }
        }
    }
    LabelMap::new(w, h, out).expect("same size")
}

/// Applies one transform to cube (bilinear, zero fill) and labels (nearest,
/// IGNORE fill).
pub fn apply(cube: &Datacube, labels: &LabelMap, p: &AugmentParams) -> (Datacube, LabelMap) {
    if p.is_identity() {
        return (cube.clone(), labels.clone());
    }
    (warp_cube(cube, p), warp_labels(labels, p))
}

/// Draws a transform from `seed` and applies it.
pub fn augment(cube: &Datacube, labels: &LabelMap, seed: u64) -> (Datacube, LabelMap) {
    let mut rng = crate::rng::rng_for(seed, &[]);
    apply(cube, labels, &AugmentParams::sample(&mut rng))
}

pub(crate) fn augment_image(img: LoadedImage, p: &AugmentParams) -> LoadedImage {
    if p.is_identity() {
        return img;
    }
    LoadedImage {
        cube: warp_cube(&img.cube, p),
        rgb: img.rgb.as_ref().map(|r| warp_cube(r, p)),
        labels: warp_labels(&img.labels, p),
        ..img
    }
}
