//! HSI preprocessing: per-pixel ℓ1 normalization followed by a 5×5×3
//! (w × h × c) median filter with reflected borders.
//!
//! RGB and TPI cubes are passed through unchanged unless explicitly forced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::fs;
use std::path::Path;

use crate::hsicube::{read_cube, read_labels, write_cube, write_labels, Datacube, DatasetIndex, Modality};
use crate::imgops::reflect_index;
use crate::{Error, Result};

const WINDOW: (usize, usize, usize) = (5, 5, 3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StepOrder {
    #[default]
    NormalizeThenFilter,
    FilterThenNormalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub order: StepOrder,
    /// Apply the chain to RGB/TPI cubes as well (off by default).
    pub all_modalities: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            order: StepOrder::NormalizeThenFilter,
            all_modalities: false,
        }
    }
}

/// Result of ℓ1 normalization: the cube plus the number of all-zero spectra,
/// which are left as zeros.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub cube: Datacube,
    pub zero_spectra: usize,
}

/// Divides every pixel spectrum by its ℓ1 norm.
pub fn l1_normalize(cube: &Datacube) -> Normalized {
    let c = cube.channels();
    let mut data = cube.data().to_vec();
    let mut zero_spectra = 0;
    for px in data.chunks_exact_mut(c) {
        let norm: f64 = px.iter().map(|&v| v.abs() as f64).sum();
        if norm == 0.0 {
            zero_spectra += 1;
            continue;
        }
        px.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    Normalized {
        cube: cube.with_data(data),
        zero_spectra,
    }
}

/// Median over the centered 5×5×3 neighborhood of every voxel.
pub fn median_filter_5x5x3(cube: &Datacube) -> Datacube {
    cube.with_data(median_filter_volume(
        cube.data(),
        cube.width(),
        cube.height(),
        cube.channels(),
    ))
}

/// [`median_filter_5x5x3`] on a raw channel-innermost volume of any channel count.
pub fn median_filter_volume(src: &[f32], w: usize, h: usize, c: usize) -> Vec<f32> {
    assert_eq!(src.len(), w * h * c, "volume length must be w*h*c");
    let (kw, kh, kc) = WINDOW;
    let offsets = |k: usize, n: usize, i: usize| -> Vec<usize> {
        let r = (k / 2) as isize;
        (-r..=r).map(|d| reflect_index(i as isize + d, n)).collect()
    };
    let xs: Vec<Vec<usize>> = (0..w).map(|x| offsets(kw, w, x)).collect();
    let cs: Vec<Vec<usize>> = (0..c).map(|ch| offsets(kc, c, ch)).collect();
    let mut out = vec![0f32; src.len()];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        let ys = offsets(kh, h, y);
        let mut buf = Vec::with_capacity(kw * kh * kc);
        for x in 0..w {
            for ch in 0..c {
                buf.clear();
                for &yy in &ys {
                    for &xx in &xs[x] {
                        let base = (yy * w + xx) * c;
                        for &cc in &cs[ch] {
                            buf.push(src[base + cc]);
                        }
                    }
                }
                let mid = buf.len() / 2;
                let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                row[x * c + ch] = *m;
            }
        }
    });
    out
}

/// Output of [`preprocess_hsi`].
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub cube: Datacube,
    /// Pixels whose spectrum was all zero at normalization time.
    pub zero_spectra: usize,
}

/// ℓ1 normalization and median filtering in the configured order.
pub fn preprocess_hsi(cube: &Datacube, order: StepOrder) -> Preprocessed {
    match order {
        StepOrder::NormalizeThenFilter => {
            let n = l1_normalize(cube);
            Preprocessed {
                cube: median_filter_5x5x3(&n.cube),
                zero_spectra: n.zero_spectra,
            }
        }
        StepOrder::FilterThenNormalize => {
            let n = l1_normalize(&median_filter_5x5x3(cube));
            Preprocessed {
                cube: n.cube,
                zero_spectra: n.zero_spectra,
            }
        }
    }
}

/// Applies the chain to HSI cubes; other modalities pass through unless
/// `opts.all_modalities` is set.
pub fn preprocess(cube: &Datacube, opts: &PreprocessOptions) -> Preprocessed {
    if cube.modality() == Modality::Hsi || opts.all_modalities {
        preprocess_hsi(cube, opts.order)
    } else {
        Preprocessed {
            cube: cube.clone(),
            zero_spectra: 0,
        }
    }
}

/// Copies a dataset to `out` with every cube passed through [`preprocess`].
/// Only the listed modalities are kept; labels and the class table are copied.
pub fn preprocess_dataset(
    index: &DatasetIndex,
    out: impl AsRef<Path>,
    modalities: &[Modality],
    opts: &PreprocessOptions,
) -> Result<DatasetIndex> {
    let out = out.as_ref();
    let mut copy = index.clone();
    copy.root = out.to_path_buf();
    for s in &mut copy.subjects {
        for rec in &mut s.images {
            rec.cubes.retain(|m, _| modalities.contains(m));
            if rec.cubes.len() != modalities.len() {
                return Err(Error::InvalidData(format!(
                    "image {} lacks one of the requested modalities",
                    rec.id
                )));
            }
        }
    }
    let files: Vec<String> = copy
        .subjects
        .iter()
        .flat_map(|s| s.images.iter())
        .flat_map(|r| r.cubes.values().cloned().chain([r.labels.clone()]))
        .collect();
    files.par_iter().try_for_each(|rel| {
        let dst = out.join(rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let src = index.root.join(rel);
        if rel.ends_with(".cube") {
            write_cube(&preprocess(&read_cube(&src)?, opts).cube, &dst)
        } else {
            write_labels(&read_labels(&src)?, &dst)
        }
    })?;
    let classes = index.root.join("classes.json");
    if classes.exists() {
        let dst = out.join("classes.json");
        fs::copy(&classes, &dst).map_err(|e| Error::io(&dst, e))?;
    }
    copy.save()?;
    Ok(copy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hsi(w: usize, h: usize, data: Vec<f32>) -> Datacube {
        Datacube::new(w, h, Modality::Hsi, Modality::Hsi.default_wavelengths(), data).unwrap()
    }

    fn tpi(data: Vec<f32>) -> Datacube {
        let n = data.len() / 4;
        Datacube::new(n, 1, Modality::Tpi, Modality::Tpi.default_wavelengths(), data).unwrap()
    }

    fn random_hsi(w: usize, h: usize, seed: u64) -> Datacube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        hsi(w, h, (0..w * h * 100).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn toy_spectrum_normalizes() {
        let n = l1_normalize(&tpi(vec![2.0, 2.0, 4.0, 2.0]));
        assert_eq!(n.cube.data(), &[0.2, 0.2, 0.4, 0.2]);
        assert_eq!(n.zero_spectra, 0);
    }

    #[test]
    fn normalized_spectrum_unchanged() {
        let input = tpi(vec![0.25, 0.25, 0.25, 0.25]);
        assert_eq!(l1_normalize(&input).cube, input);
    }

    #[test]
    fn illumination_scale_cancels() {
        let base = vec![0.3f32, 1.7, 0.05, 2.2];
        let scaled: Vec<f32> = base.iter().map(|v| v * 7.3).collect();
        let a = l1_normalize(&tpi(base)).cube;
        let b = l1_normalize(&tpi(scaled)).cube;
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn constant_cube_is_fixed_point_of_filter() {
        let cube = hsi(6, 4, vec![0.7; 6 * 4 * 100]);
        assert_eq!(median_filter_5x5x3(&cube), cube);
    }

    #[test]
    fn single_impulse_is_removed() {
        let (w, h) = (7, 7);
        let mut data = vec![0.0; w * h * 100];
        data[(3 * w + 3) * 100 + 50] = 1.0;
        let out = median_filter_5x5x3(&hsi(w, h, data));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preprocessing_constant_and_zero_cubes() {
        let out = preprocess_hsi(&hsi(5, 5, vec![3.0; 2500]), StepOrder::default());
        for px in out.cube.data().chunks(100) {
            let s: f32 = px.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let zero = preprocess_hsi(&hsi(3, 2, vec![0.0; 600]), StepOrder::default());
        assert!(zero.cube.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero.zero_spectra, 6);
    }

    #[test]
    fn degenerate_sizes_keep_dimensions() {
        let cube = random_hsi(1, 1, 3);
        let out = median_filter_5x5x3(&cube);
        assert_eq!((out.width(), out.height(), out.channels()), (1, 1, 100));
        let rgb = Datacube::new(2, 1, Modality::Rgb, Modality::Rgb.default_wavelengths(), vec![
            1.0, 2.0, 3.0, 4.0, 5.0, 6.0,
        ])
        .unwrap();
        assert_eq!(median_filter_5x5x3(&rgb).width(), 2);
    }

    #[test]
    fn rgb_passes_through_by_default() {
        let rgb = Datacube::new(1, 1, Modality::Rgb, Modality::Rgb.default_wavelengths(), vec![
            1.0, 2.0, 5.0,
        ])
        .unwrap();
        assert_eq!(preprocess(&rgb, &PreprocessOptions::default()).cube, rgb);
        let forced = PreprocessOptions {
            all_modalities: true,
            ..Default::default()
        };
        assert_ne!(preprocess(&rgb, &forced).cube, rgb);
    }

    /// Materializes the reflect-padded volume, then takes sorted medians.
    fn brute_force_median(src: &[f32], w: usize, h: usize, c: usize) -> Vec<f32> {
        let mirror = |i: i64, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i >= n as i64 {
                2 * (n - 1) - i as usize
            } else {
                i as usize
            }
        };
        let (pw, ph, pc) = (w + 4, h + 4, c + 2);
        let mut padded = vec![0f32; pw * ph * pc];
        for y in 0..ph {
            for x in 0..pw {
                for ch in 0..pc {
                    let sx = mirror(x as i64 - 2, w);
                    let sy = mirror(y as i64 - 2, h);
                    let sc = mirror(ch as i64 - 1, c);
                    padded[(y * pw + x) * pc + ch] = src[(sy * w + sx) * c + sc];
                }
            }
        }
        let mut out = Vec::with_capacity(src.len());
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut vals = Vec::with_capacity(75);
                    for yy in y..y + 5 {
                        for xx in x..x + 5 {
                            for cc in ch..ch + 3 {
                                vals.push(padded[(yy * pw + xx) * pc + cc]);
                            }
                        }
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    out.push(vals[37]);
                }
            }
        }
        out
    }

    #[test]
    fn filter_matches_brute_force_on_random_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let src: Vec<f32> = (0..7 * 7 * 5).map(|_| rng.gen()).collect();
            assert_eq!(
                median_filter_volume(&src, 7, 7, 5),
                brute_force_median(&src, 7, 7, 5)
            );
        }
    }

    #[test]
    fn preprocessing_equals_composed_oracles() {
        let cube = random_hsi(6, 5, 99);
        let mut normalized = cube.data().to_vec();
        for px in normalized.chunks_mut(100) {
            let s: f64 = px.iter().map(|&v| v as f64).sum();
            px.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
        }
        let expected = brute_force_median(&normalized, 6, 5, 100);
        let got = preprocess_hsi(&cube, StepOrder::NormalizeThenFilter);
        assert_eq!(got.cube.data(), &expected[..]);
        assert_eq!(got.cube.width(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn filter_output_comes_from_neighborhood(seed in any::<u64>()) {
            let cube = random_hsi(4, 3, seed);
            let out = median_filter_5x5x3(&cube);
            prop_assert_eq!(out.width(), 4);
            for y in 0..3 {
                for x in 0..4 {
                    for c in 0..100 {
                        let v = out.get(x, y, c);
                        let mut found = false;
                        for dy in -2i64..=2 { for dx in -2i64..=2 { for dc in -1i64..=1 {
                            let xx = reflect_index(x as isize + dx as isize, 4);
                            let yy = reflect_index(y as isize + dy as isize, 3);
                            let cc = reflect_index(c as isize + dc as isize, 100);
                            found |= cube.get(xx, yy, cc) == v;
                        }}}
                        prop_assert!(found);
                    }
                }
            }
        }

        #[test]
        fn normalization_is_idempotent_and_scale_invariant(seed in any::<u64>(), scale in 0.01f32..100.0) {
            let cube = random_hsi(2, 2, seed);
            let once = l1_normalize(&cube).cube;
            let twice = l1_normalize(&once).cube;
            let scaled = l1_normalize(&cube.with_data(cube.data().iter().map(|v| v * scale).collect())).cube;
            for ((a, b), c) in once.data().iter().zip(twice.data()).zip(scaled.data()) {
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!((a - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dataset_copy_preprocesses_hsi_only() {
        use crate::hsicube::{generate_synthetic_dataset, SynthConfig};
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            subjects: 1,
            images_per_subject: 1,
            width: 12,
            height: 10,
            ..SynthConfig::default()
        };
        let src = generate_synthetic_dataset(&cfg, dir.path().join("raw")).unwrap();
        let dst = preprocess_dataset(
            &src,
            dir.path().join("pre"),
            &[Modality::Hsi, Modality::Rgb],
            &PreprocessOptions::default(),
        )
        .unwrap();
        let reloaded = DatasetIndex::load(dir.path().join("pre")).unwrap();
        assert_eq!(reloaded.subjects, dst.subjects);
        let (s, r) = (&src.subjects[0], &src.subjects[0].images[0]);
        let raw = src.load_image(s, r, Modality::Hsi, true).unwrap();
        let pre = dst.load_image(s, r, Modality::Hsi, true).unwrap();
        assert_eq!(pre.cube.data(), preprocess(&raw.cube, &PreprocessOptions::default()).cube.data());
        assert_eq!(pre.rgb.unwrap().data(), raw.rgb.unwrap().data());
        assert_eq!(pre.labels, raw.labels);
        assert!(dst.load_image(s, r, Modality::Tpi, false).is_err());
    }
}
