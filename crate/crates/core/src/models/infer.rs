//! Full-image inference: per-part predictions mapped back to pixel positions.

use rayon::prelude::*;

use super::tensors::{cube_to_chw, pad_to};
use super::{Granularity, Model, UNET_DEPTH};
use crate::dataload::crop;
use crate::hsicube::{Datacube, LabelMap};
use crate::nnet::{softmax, Tensor};
use crate::superpixel::{extract_superpixel_cube, slico};
use crate::{Error, Result};

const PIXEL_CHUNK: usize = 4096;
const PART_CHUNK: usize = 32;

/// Class map plus the softmax scores it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPrediction {
    pub labels: LabelMap,
    pub classes: usize,
    /// Pixel-major `H×W×O` softmax values.
    pub scores: Option<Vec<f32>>,
}

impl SegmentationPrediction {
    /// Argmax over `H×W×O` scores; ties go to the lowest class id.
    pub fn from_scores(width: usize, height: usize, classes: usize, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != width * height * classes || classes == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} scores for {width}×{height}×{classes}",
                scores.len()
            )));
        }
        let labels = scores.chunks_exact(classes).map(|row| argmax(row) as u8).collect();
        Ok(Self {
            labels: LabelMap::new(width, height, labels)?,
            classes,
            scores: Some(scores),
        })
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax of the mean softmax over members.
pub fn ensemble(members: &[SegmentationPrediction]) -> Result<SegmentationPrediction> {
    let first = members
        .first()
        .ok_or_else(|| Error::Empty("ensemble needs at least one member".into()))?;
    let (w, h, o) = (first.width(), first.height(), first.classes);
    let mut sum = vec![0f64; w * h * o];
    for m in members {
        if (m.width(), m.height(), m.classes) != (w, h, o) {
            return Err(Error::DimensionMismatch("ensemble members differ in shape".into()));
        }
        let s = m
            .scores
            .as_ref()
            .ok_or_else(|| Error::InvalidData("ensemble member without scores".into()))?;
        for (a, &b) in sum.iter_mut().zip(s) {
            *a += b as f64;
        }
    }
    let k = members.len() as f64;
    SegmentationPrediction::from_scores(w, h, o, sum.into_iter().map(|v| (v / k) as f32).collect())
}

/// `(rows, cols)` of the non-overlapping tile grid after zero padding.
pub fn patch_grid(width: usize, height: usize, patch: usize) -> (usize, usize) {
    (height.div_ceil(patch), width.div_ceil(patch))
}

/// Softmax rows `N×O` from logits.
fn class_probs(model: &Model, x: Tensor) -> Result<Vec<f64>> {
    Ok(softmax(&model.net.predict(x)?)?.into_data())
}

/// Segments the full image. Superpixel models need the RGB companion for
/// SLIC unless the cube itself is RGB.
pub fn predict_image(model: &Model, cube: &Datacube, rgb: Option<&Datacube>) -> Result<SegmentationPrediction> {
    let kind = model.kind();
    if cube.modality() != kind.modality || cube.channels() != kind.modality.channels() {
        return Err(Error::InvalidData(format!(
            "model {kind} cannot read a {} cube with {} channels",
            cube.modality(),
            cube.channels()
        )));
    }
    let (w, h, c, o) = (cube.width(), cube.height(), cube.channels(), model.classes());
    let mut scores = vec![0f32; w * h * o];
    match kind.granularity {
        Granularity::Pixel => {
            let chunks: Vec<Vec<f64>> = cube
                .data()
                .par_chunks(PIXEL_CHUNK * c)
                .map(|chunk| {
                    let n = chunk.len() / c;
                    let x = Tensor::new(vec![n, c], chunk.iter().map(|&v| v as f64).collect())?;
                    class_probs(model, x)
                })
                .collect::<Result<_>>()?;
            for (dst, p) in scores.iter_mut().zip(chunks.into_iter().flatten()) {
                *dst = p as f32;
            }
        }
        Granularity::Superpixel => {
            let rgb = match rgb {
                Some(r) => r,
                None if cube.modality() == crate::hsicube::Modality::Rgb => cube,
                None => return Err(Error::InvalidData("superpixel inference needs the RGB image".into())),
            };
            let dec = slico(rgb, &model.meta.superpixels)?;
            let segs: Vec<u32> = (0..dec.len() as u32).collect();
            let probs: Vec<Vec<f64>> = segs
                .par_chunks(PART_CHUNK)
                .map(|ids| {
                    let mut x = Vec::new();
                    let mut side = 0;
                    for &s in ids {
                        let sc = extract_superpixel_cube(cube, &dec, s)?;
                        side = sc.width();
                        cube_to_chw(&sc, &mut x);
                    }
                    class_probs(model, Tensor::new(vec![ids.len(), c, side, side], x)?)
                })
                .collect::<Result<_>>()?;
            let probs: Vec<f64> = probs.into_iter().flatten().collect();
            for (p, &s) in dec.segments().iter().enumerate() {
                for k in 0..o {
                    scores[p * o + k] = probs[s as usize * o + k] as f32;
                }
            }
        }
        Granularity::Patch32 | Granularity::Patch64 | Granularity::Image => {
            let (pw, ph) = match kind.granularity.patch_size() {
                Some(p) => (p, p),
                None => {
                    let m = 1 << UNET_DEPTH;
                    (pad_to(w, m), pad_to(h, m))
                }
            };
            let (rows, cols) = patch_grid(w, h, pw.min(ph).max(1));
            let (rows, cols) = if kind.granularity == Granularity::Image { (1, 1) } else { (rows, cols) };
            let tiles: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |q| (q * pw, r * ph))).collect();
            let probs: Vec<Vec<f64>> = tiles
                .par_chunks(PART_CHUNK)
                .map(|group| {
                    let mut x = Vec::with_capacity(group.len() * c * pw * ph);
                    for &(x0, y0) in group {
                        let (t, _) = crop(cube, None, x0, y0, pw, ph);
                        cube_to_chw(&t, &mut x);
                    }
                    class_probs(model, Tensor::new(vec![group.len(), c, ph, pw], x)?)
                })
                .collect::<Result<_>>()?;
            let plane = pw * ph;
            for (t, &(x0, y0)) in tiles.iter().enumerate() {
                let g = &probs[t / PART_CHUNK];
                let base = (t % PART_CHUNK) * o * plane;
                for ty in 0..ph.min(h.saturating_sub(y0)) {
                    for tx in 0..pw.min(w.saturating_sub(x0)) {
                        let p = (y0 + ty) * w + x0 + tx;
                        for k in 0..o {
                            scores[p * o + k] = g[base + k * plane + ty * pw + tx] as f32;
                        }
                    }
                }
            }
        }
    }
    SegmentationPrediction::from_scores(w, h, o, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsicube::Modality;
    use crate::models::ModelKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_arithmetic() {
        assert_eq!(patch_grid(640, 480, 64), (8, 10));
        assert_eq!(patch_grid(640, 480, 32), (15, 20));
        assert_eq!(pad_to(480, 64), 512);
    }

    #[test]
    fn ensemble_matches_mean_then_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h, o) = (4, 3, 5);
        let members: Vec<SegmentationPrediction> = (0..5)
            .map(|_| {
                let s = (0..w * h * o).map(|_| rng.gen::<f32>()).collect();
                SegmentationPrediction::from_scores(w, h, o, s).unwrap()
            })
            .collect();
        let e = ensemble(&members).unwrap();
        for p in 0..w * h {
            let means: Vec<f64> = (0..o)
                .map(|k| members.iter().map(|m| m.scores.as_ref().unwrap()[p * o + k] as f64).sum::<f64>() / 5.0)
                .collect();
            let best = (0..o).fold(0, |b, k| if means[k] > means[b] { k } else { b });
            assert_eq!(e.labels.labels()[p] as usize, best);
        }
        assert_eq!(ensemble(&members[..1]).unwrap(), members[0]);
    }

    #[test]
    fn ensemble_tie_goes_to_lowest_class() {
        let a = SegmentationPrediction::from_scores(1, 1, 2, vec![0.7, 0.3]).unwrap();
        let b = SegmentationPrediction::from_scores(1, 1, 2, vec![0.3, 0.7]).unwrap();
        assert_eq!(ensemble(&[a, b]).unwrap().labels.labels(), &[0]);
    }

    #[test]
    fn constant_input_gives_constant_map() {
        let model = Model::new(ModelKind::new(Granularity::Pixel, Modality::Tpi), 4, 4, 0).unwrap();
        let cube = Datacube::new(6, 5, Modality::Tpi, Modality::Tpi.default_wavelengths(), vec![0.3; 120]).unwrap();
        let p = predict_image(&model, &cube, None).unwrap();
        assert_eq!(p.labels.classes_present().len(), 1);
    }

    #[test]
    fn dense_predictions_cover_odd_sizes() {
        for g in [Granularity::Patch32, Granularity::Image] {
            let model = Model::new(ModelKind::new(g, Modality::Rgb), 3, 2, 0).unwrap();
            let cube = Datacube::zeros(37, 21, Modality::Rgb);
            let p = predict_image(&model, &cube, None).unwrap();
            assert_eq!((p.width(), p.height()), (37, 21));
            assert!(p.labels.labels().iter().all(|&l| l < 3));
        }
    }

    #[test]
    fn superpixel_prediction_is_constant_per_segment() {
        let model = Model::new(ModelKind::new(Granularity::Superpixel, Modality::Rgb), 3, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..24 * 20 * 3).map(|_| rng.gen::<f32>()).collect();
        let cube = Datacube::new(24, 20, Modality::Rgb, Modality::Rgb.default_wavelengths(), data).unwrap();
        let p = predict_image(&model, &cube, None).unwrap();
        let dec = slico(&cube, &model.meta.superpixels).unwrap();
        for (i, &s) in dec.segments().iter().enumerate() {
            let first = dec.segments().iter().position(|&t| t == s).unwrap();
            assert_eq!(p.labels.labels()[i], p.labels.labels()[first]);
        }
    }

    #[test]
    fn modality_mismatch_is_rejected() {
        let model = Model::new(ModelKind::new(Granularity::Pixel, Modality::Tpi), 4, 4, 0).unwrap();
        assert!(predict_image(&model, &Datacube::zeros(2, 2, Modality::Rgb), None).is_err());
    }
}
