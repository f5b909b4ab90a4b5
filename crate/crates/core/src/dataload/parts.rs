use rand::seq::SliceRandom;
use rand::Rng;

use crate::hsicube::{Datacube, LabelMap, LoadedImage, IGNORE};
use crate::models::Granularity;
use crate::superpixel::{extract_superpixel_cube, fuzzy_labels, slico, SlicParams};
use crate::{Error, Result};

/// One training instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Pixel { spectrum: Vec<f32>, label: u8 },
    Superpixel { cube: Datacube, fuzzy: Vec<f64> },
    /// Patch or whole image with per-pixel labels.
    Dense { cube: Datacube, labels: LabelMap },
}

/// Settings that decide how many parts an image yields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartsPolicy {
    pub classes: usize,
    /// Pixel kind: cap per image; `None` takes every annotated pixel.
    pub pixels_per_image: Option<usize>,
    pub superpixels: SlicParams,
}

/// Number of non-overlapping `size`-tiles covering a `w×h` image.
pub fn grid_tiles(w: usize, h: usize, size: usize) -> usize {
    w.div_ceil(size) * h.div_ceil(size)
}

/// Zero-padded (IGNORE for labels) crop with top-left `(x0, y0)`.
pub(crate) fn crop(cube: &Datacube, labels: Option<&LabelMap>, x0: usize, y0: usize, pw: usize, ph: usize) -> (Datacube, Option<LabelMap>) {
    let c = cube.channels();
    let mut data = vec![0f32; pw * ph * c];
    let mut lab = vec![IGNORE; pw * ph];
    for y in 0..ph.min(cube.height().saturating_sub(y0)) {
        for x in 0..pw.min(cube.width().saturating_sub(x0)) {
            data[(y * pw + x) * c..][..c].copy_from_slice(cube.pixel(x0 + x, y0 + y));
            if let Some(l) = labels {
                lab[y * pw + x] = l.get(x0 + x, y0 + y);
            }
        }
    }
    (
        cube.with_shape(pw, ph, data),
        labels.map(|_| LabelMap::new(pw, ph, lab).expect("crop size")),
    )
}

/// Parts of one (already augmented) image, in random order. A fully IGNORE
/// image yields nothing.
pub fn extract_parts(
    img: &LoadedImage,
    granularity: Granularity,
    policy: &PartsPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    let labels = &img.labels;
    if labels.labels().iter().all(|&l| l == IGNORE) {
        return Ok(Vec::new());
    }
    let cube = &img.cube;
    let (w, h) = (cube.width(), cube.height());
    let out = match granularity {
        Granularity::Pixel => {
            let mut idx: Vec<usize> = (0..w * h).filter(|&p| labels.labels()[p] != IGNORE).collect();
            idx.shuffle(rng);
            if let Some(cap) = policy.pixels_per_image {
                idx.truncate(cap);
            }
            idx.into_iter()
                .map(|p| Sample::Pixel {
                    spectrum: cube.pixel(p % w, p / w).to_vec(),
                    label: labels.labels()[p],
                })
                .collect()
        }
        Granularity::Superpixel => {
            let rgb = img
                .rgb
                .as_ref()
                .ok_or_else(|| Error::InvalidData(format!("image {} has no RGB companion for superpixels", img.image)))?;
            let dec = slico(rgb, &policy.superpixels)?;
            let fuzzy = fuzzy_labels(&dec, labels, policy.classes)?;
            let mut segs: Vec<u32> = (0..dec.len() as u32).filter(|&s| !fuzzy[s as usize].is_empty()).collect();
            segs.shuffle(rng);
            segs.into_iter()
                .map(|s| {
                    Ok(Sample::Superpixel {
                        cube: extract_superpixel_cube(cube, &dec, s)?,
                        fuzzy: fuzzy[s as usize].frequencies().expect("non-empty"),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Granularity::Patch32 | Granularity::Patch64 => {
            let p = granularity.patch_size().expect("patch kind");
            (0..grid_tiles(w, h, p))
                .map(|_| {
                    let x0 = rng.gen_range(0..=w.saturating_sub(p));
                    let y0 = rng.gen_range(0..=h.saturating_sub(p));
                    let (cube, labels) = crop(cube, Some(labels), x0, y0, p, p);
                    Sample::Dense {
                        cube,
                        labels: labels.expect("labels cropped"),
                    }
                })
                .collect()
        }
        Granularity::Image => vec![Sample::Dense {
            cube: cube.clone(),
            labels: labels.clone(),
        }],
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsicube::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(w: usize, h: usize, labels: Vec<u8>) -> LoadedImage {
        let tpi = Datacube::new(w, h, Modality::Tpi, Modality::Tpi.default_wavelengths(), (0..w * h * 4).map(|v| v as f32).collect()).unwrap();
        LoadedImage {
            subject: "P".into(),
            image: "i".into(),
            cube: tpi,
            rgb: None,
            labels: LabelMap::new(w, h, labels).unwrap(),
        }
    }

    fn policy() -> PartsPolicy {
        PartsPolicy {
            classes: 3,
            pixels_per_image: None,
            superpixels: SlicParams::default(),
        }
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(grid_tiles(640, 480, 32), 300);
        assert_eq!(grid_tiles(640, 480, 64), 80);
        assert_eq!(grid_tiles(10, 10, 32), 1);
    }

    #[test]
    fn pixel_parts_skip_ignore_without_duplicates() {
        let img = image(4, 3, vec![0, 1, IGNORE, 2, 0, 0, 1, IGNORE, 2, 2, 1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let parts = extract_parts(&img, Granularity::Pixel, &policy(), &mut rng).unwrap();
        assert_eq!(parts.len(), 10);
        let mut seen: Vec<Vec<f32>> = parts
            .iter()
            .map(|s| match s {
                Sample::Pixel { spectrum, label } => {
                    assert_ne!(*label, IGNORE);
                    spectrum.clone()
                }
                _ => unreachable!(),
            })
            .collect();
        seen.sort_by(|a, b| a[0].total_cmp(&b[0]));
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn image_and_patch_counts() {
        let img = image(40, 20, vec![1; 800]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(extract_parts(&img, Granularity::Image, &policy(), &mut rng).unwrap().len(), 1);
        let patches = extract_parts(&img, Granularity::Patch32, &policy(), &mut rng).unwrap();
        assert_eq!(patches.len(), 2);
        for p in patches {
            let Sample::Dense { cube, labels } = p else { unreachable!() };
            assert_eq!((cube.width(), cube.height()), (32, 32));
            assert_eq!(labels.get(0, 25), IGNORE);
        }
    }

    #[test]
    fn fully_ignored_image_yields_nothing() {
        let img = image(3, 3, vec![IGNORE; 9]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(extract_parts(&img, Granularity::Pixel, &policy(), &mut rng).unwrap().is_empty());
    }
}
