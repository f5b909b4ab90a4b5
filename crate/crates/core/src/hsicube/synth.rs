//! Synthetic labeled scenes standing in for the private surgical data.
//!
//! Each image is a seeded Voronoi partition whose cells are assigned organ
//! classes, smoothed by one 3×3 majority pass. Pixel spectra are the class
//! mean spectrum (a small Gaussian mixture over 500–1000 nm) modified by a
//! per-subject tilt and amplitude scale, plus optional spatially correlated
//! noise, multiplicative illumination and i.i.d. noise. RGB and TPI cubes are
//! fixed linear functionals of the HSI spectrum.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{CLASSES_FILE, INDEX_FILE};
use super::{
    write_cube, write_labels, ClassTable, DatasetIndex, Datacube, ImageRecord, LabelMap, Modality,
    SubjectRecord, HSI_CHANNELS, IGNORE, PAPER_CLASSES,
};
use crate::imgops::gaussian_blur;
use crate::rng::{normal, rng_for};
use crate::{Error, Result};

/// Sum of Gaussian bumps over wavelength plus a flat baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub baseline: f64,
    /// `(center_nm, width_nm, amplitude)` triples.
    pub components: Vec<(f64, f64, f64)>,
}

impl SpectrumModel {
    pub fn eval(&self, wavelength: f64) -> f64 {
        self.baseline
            + self
                .components
                .iter()
                .map(|&(c, w, a)| a * (-(wavelength - c).powi(2) / (2.0 * w * w)).exp())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub images_per_subject: usize,
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    /// Per-class mean spectra. Empty means "derive from the seed".
    #[serde(default)]
    pub class_spectra: Vec<SpectrumModel>,
    /// Std of the per-subject additive tilt and amplitude scale.
    pub subject_shift: f64,
    /// Std of i.i.d. per-voxel noise.
    pub noise_std: f64,
    /// Amplitude of smooth spatial noise fields mixed into the spectra.
    #[serde(default)]
    pub correlated_noise_std: f64,
    #[serde(default = "default_correlation_length")]
    pub correlation_length: f64,
    /// Strength of a multiplicative linear illumination gradient per image.
    #[serde(default)]
    pub illumination: f64,
    /// Inclusive range of Voronoi cells per image.
    pub blobs: (usize, usize),
    /// Probability that a Voronoi cell is labeled "unsure".
    #[serde(default)]
    pub unsure_fraction: f64,
    pub seed: u64,
}

fn default_correlation_length() -> f64 {
    3.0
}

impl Default for SynthConfig {
    /// Desk-scale defaults: 8 subjects × 6 images, 6 classes, 64×64 pixels.
    fn default() -> Self {
        Self {
            subjects: 8,
            images_per_subject: 6,
            classes: 6,
            width: 64,
            height: 64,
            class_spectra: Vec::new(),
            subject_shift: 0.05,
            noise_std: 0.02,
            correlated_noise_std: 0.0,
            correlation_length: default_correlation_length(),
            illumination: 0.0,
            blobs: (6, 12),
            unsure_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("synthetic dataset needs at least one class".into()));
        }
        if self.classes > PAPER_CLASSES {
            return Err(Error::Config(format!(
                "at most {PAPER_CLASSES} classes supported, got {}",
                self.classes
            )));
        }
        if self.subjects == 0 || self.images_per_subject == 0 {
            return Err(Error::Config("synthetic dataset needs at least one image".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if ![
            self.noise_std,
            self.subject_shift,
            self.correlated_noise_std,
            self.correlation_length,
            self.illumination,
        ]
        .into_iter()
        .all(finite_nonneg)
        {
            return Err(Error::Config("noise parameters must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.unsure_fraction) {
            return Err(Error::Config("unsure_fraction must lie in [0, 1)".into()));
        }
        if self.blobs.0 == 0 || self.blobs.0 > self.blobs.1 {
            return Err(Error::Config("blob range must satisfy 1 <= min <= max".into()));
        }
        if !self.class_spectra.is_empty() && self.class_spectra.len() != self.classes {
            return Err(Error::Config(format!(
                "{} class spectra given for {} classes",
                self.class_spectra.len(),
                self.classes
            )));
        }
        Ok(())
    }

    /// Class spectra, derived from the seed when not given explicitly.
    pub fn resolved_spectra(&self) -> Vec<SpectrumModel> {
        if !self.class_spectra.is_empty() {
            return self.class_spectra.clone();
        }
        let mut rng = rng_for(self.seed, &[0x5bec]);
        (0..self.classes)
            .map(|k| {
                let main = 520.0 + (k as f64 + 0.5) * 460.0 / self.classes as f64;
                let mut components = vec![(
                    main + rng.gen_range(-10.0..10.0),
                    rng.gen_range(25.0..50.0),
                    rng.gen_range(0.6..1.0),
                )];
                for _ in 0..rng.gen_range(0..=2) {
                    components.push((
                        rng.gen_range(500.0..1000.0),
                        rng.gen_range(30.0..80.0),
                        rng.gen_range(0.1..0.4),
                    ));
                }
                SpectrumModel {
                    baseline: 0.1,
                    components,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub id: String,
    pub hsi: Datacube,
    pub tpi: Datacube,
    pub rgb: Datacube,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub classes: ClassTable,
    /// `(subject id, images)` in generation order.
    pub subjects: Vec<(String, Vec<SyntheticImage>)>,
}

impl SyntheticDataset {
    pub fn images(&self) -> impl Iterator<Item = (&str, &SyntheticImage)> {
        self.subjects
            .iter()
            .flat_map(|(s, imgs)| imgs.iter().map(move |i| (s.as_str(), i)))
    }
}

struct SubjectShift {
    tilt: f64,
    scale: f64,
}

const RGB_WINDOWS: [(f32, f32); 3] = [(620.0, 700.0), (540.0, 620.0), (500.0, 540.0)];

fn tpi_weights(wavelengths: &[f32]) -> [Vec<f64>; 4] {
    let bump = |center: f64, width: f64| -> Vec<f64> {
        let w: Vec<f64> = wavelengths
            .iter()
            .map(|&l| (-(l as f64 - center).powi(2) / (2.0 * width * width)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    };
    let n = wavelengths.len() as f64;
    [
        bump(560.0, 20.0),
        bump(760.0, 30.0),
        bump(970.0, 20.0),
        vec![1.0 / n; wavelengths.len()],
    ]
}

/// RGB cube from an HSI cube: mean reflectance inside three fixed windows.
pub(crate) fn hsi_to_rgb(hsi: &Datacube) -> Datacube {
    let wl = hsi.wavelengths();
    let windows: Vec<Vec<usize>> = RGB_WINDOWS
        .iter()
        .map(|&(lo, hi)| (0..wl.len()).filter(|&i| wl[i] >= lo && wl[i] < hi).collect())
        .collect();
    let mut data = Vec::with_capacity(hsi.width() * hsi.height() * 3);
    for px in hsi.data().chunks_exact(hsi.channels()) {
        for win in &windows {
            let s: f64 = win.iter().map(|&i| px[i] as f64).sum();
            data.push((s / win.len().max(1) as f64) as f32);
        }
    }
    Datacube::zeros(hsi.width(), hsi.height(), Modality::Rgb).with_data(data)
}

/// TPI cube from an HSI cube: four fixed non-negative linear functionals.
pub(crate) fn hsi_to_tpi(hsi: &Datacube) -> Datacube {
    let weights = tpi_weights(hsi.wavelengths());
    let mut data = Vec::with_capacity(hsi.width() * hsi.height() * 4);
    for px in hsi.data().chunks_exact(hsi.channels()) {
        for w in &weights {
            let s: f64 = w.iter().zip(px).map(|(a, &b)| a * b as f64).sum();
            data.push(s as f32);
        }
    }
    Datacube::zeros(hsi.width(), hsi.height(), Modality::Tpi).with_data(data)
}

fn voronoi_labels(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (w, h) = (cfg.width, cfg.height);
    let n_cells = rng.gen_range(cfg.blobs.0..=cfg.blobs.1);
    let seeds: Vec<(f64, f64, u8)> = (0..n_cells)
        .map(|_| {
            let x = rng.gen_range(0.0..w as f64);
            let y = rng.gen_range(0.0..h as f64);
            let class = rng.gen_range(0..cfg.classes) as u8;
            let unsure = rng.gen::<f64>() < cfg.unsure_fraction;
            (x, y, if unsure { IGNORE } else { class })
        })
        .collect();
    let mut labels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - px).powi(2) + (a.1 - py).powi(2);
                    let db = (b.0 - px).powi(2) + (b.1 - py).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one cell");
            labels[y * w + x] = nearest.2;
        }
    }
    let mut smoothed = majority_filter(&labels, w, h);
    if smoothed.iter().all(|&l| l == IGNORE) {
        // Guarantee at least one annotated pixel.
        let class = seeds.iter().map(|s| s.2).find(|&c| c != IGNORE).unwrap_or(0);
        smoothed.iter_mut().for_each(|l| *l = class);
    }
    smoothed
}

/// One 3×3 majority pass; ties keep the current label when it is among the
/// winners, otherwise the lowest label wins.
fn majority_filter(labels: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = labels.to_vec();
    let mut counts = [0u8; 256];
    for y in 0..h {
        for x in 0..w {
            let mut touched = Vec::with_capacity(9);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let l = labels[ny as usize * w + nx as usize];
                    if counts[l as usize] == 0 {
                        touched.push(l);
                    }
                    counts[l as usize] += 1;
                }
            }
            let current = labels[y * w + x];
            let best = touched.iter().map(|&l| counts[l as usize]).max().unwrap_or(0);
            if counts[current as usize] < best {
                let winner = touched
                    .iter()
                    .copied()
                    .filter(|&l| counts[l as usize] == best)
                    .min()
                    .unwrap_or(current);
                out[y * w + x] = winner;
            }
            for l in touched {
                counts[l as usize] = 0;
            }
        }
    }
    out
}

fn smooth_field(w: usize, h: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let white: Vec<f32> = (0..w * h).map(|_| normal(rng) as f32).collect();
    let mut field = gaussian_blur(&white, w, h, 1, sigma);
    let n = field.len() as f64;
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    field
        .iter_mut()
        .for_each(|v| *v = ((*v as f64 - mean) / sd) as f32);
    field
}

fn generate_image(
    cfg: &SynthConfig,
    spectra: &[Vec<f64>],
    unsure_spectrum: &[f64],
    shift: &SubjectShift,
    subject: usize,
    image: usize,
) -> SyntheticImage {
    let (w, h) = (cfg.width, cfg.height);
    let wl = Modality::Hsi.default_wavelengths();
    let mut rng = rng_for(cfg.seed, &[1, subject as u64, image as u64]);
    let labels = voronoi_labels(cfg, &mut rng);

    let tilt: Vec<f64> = wl
        .iter()
        .map(|&l| shift.tilt * (l as f64 - 750.0) / 250.0)
        .collect();

    // Smooth noise fields, each bound to a random spectral bump.
    let mut fields = Vec::new();
    if cfg.correlated_noise_std > 0.0 {
        for _ in 0..3 {
            let field = smooth_field(w, h, cfg.correlation_length, &mut rng);
            let center = rng.gen_range(500.0..1000.0);
            let basis: Vec<f64> = wl
                .iter()
                .map(|&l| (-(l as f64 - center).powi(2) / (2.0 * 60.0f64.powi(2))).exp())
                .collect();
            fields.push((field, basis));
        }
    }
    let illum = if cfg.illumination > 0.0 {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Some((angle.cos(), angle.sin()))
    } else {
        None
    };

    let mut data = Vec::with_capacity(w * h * HSI_CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let base = if l == IGNORE {
                unsure_spectrum
            } else {
                &spectra[l as usize]
            };
            let gain = illum.map_or(1.0, |(dx, dy)| {
                let u = (x as f64 + 0.5) / w as f64 - 0.5;
                let v = (y as f64 + 0.5) / h as f64 - 0.5;
                (1.0 + cfg.illumination * 2.0 * (u * dx + v * dy)).max(0.05)
            });
            for c in 0..HSI_CHANNELS {
                let mut v = shift.scale * base[c] + tilt[c];
                for (field, basis) in &fields {
                    v += cfg.correlated_noise_std * field[y * w + x] as f64 * basis[c];
                }
                v *= gain;
                if cfg.noise_std > 0.0 {
                    v += cfg.noise_std * normal(&mut rng);
                }
                data.push(v.max(0.0) as f32);
            }
        }
    }
    let hsi = Datacube::new(w, h, Modality::Hsi, wl, data).expect("generator keeps invariants");
    SyntheticImage {
        id: format!("img{image:03}"),
        tpi: hsi_to_tpi(&hsi),
        rgb: hsi_to_rgb(&hsi),
        hsi,
        labels: LabelMap::new(w, h, labels).expect("dimensions match"),
    }
}

/// Generates the dataset in memory. Pure function of `cfg`.
pub fn synthesize(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let wl = Modality::Hsi.default_wavelengths();
    let models = cfg.resolved_spectra();
    let spectra: Vec<Vec<f64>> = models
        .iter()
        .map(|m| wl.iter().map(|&l| m.eval(l as f64)).collect())
        .collect();
    let unsure: Vec<f64> = (0..HSI_CHANNELS)
        .map(|c| spectra.iter().map(|s| s[c]).sum::<f64>() / spectra.len() as f64)
        .collect();

    let subjects = (0..cfg.subjects)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_for(cfg.seed, &[2, s as u64]);
            let shift = SubjectShift {
                tilt: cfg.subject_shift * normal(&mut rng),
                scale: (1.0 + cfg.subject_shift * normal(&mut rng)).max(0.2),
            };
            let images = (0..cfg.images_per_subject)
                .map(|i| generate_image(cfg, &spectra, &unsure, &shift, s, i))
                .collect();
            (format!("P{:02}", s + 1), images)
        })
        .collect();
    Ok(SyntheticDataset {
        classes: ClassTable::first(cfg.classes),
        subjects,
    })
}

/// Writes a synthetic dataset below `out` and returns its index.
pub fn write_dataset(ds: &SyntheticDataset, out: impl AsRef<Path>) -> Result<DatasetIndex> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut subjects = Vec::new();
    for (sid, images) in &ds.subjects {
        let dir = out.join(sid);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::new();
        for img in images {
            let mut cubes = BTreeMap::new();
            for (modality, cube) in [
                (Modality::Hsi, &img.hsi),
                (Modality::Tpi, &img.tpi),
                (Modality::Rgb, &img.rgb),
            ] {
                let rel = format!("{sid}/{}.{}.cube", img.id, modality.as_str().to_lowercase());
                write_cube(cube, out.join(&rel))?;
                cubes.insert(modality, rel);
            }
            let labels = format!("{sid}/{}.labels", img.id);
            write_labels(&img.labels, out.join(&labels))?;
            records.push(ImageRecord {
                id: img.id.clone(),
                labels,
                cubes,
            });
        }
        subjects.push(SubjectRecord {
            id: sid.clone(),
            images: records,
        });
    }
    let index = DatasetIndex::new(out, subjects)?;
    index.save()?;
    let classes = out.join(CLASSES_FILE);
    fs::write(&classes, serde_json::to_string_pretty(&ds.classes)?)
        .map_err(|e| Error::io(&classes, e))?;
    debug_assert!(out.join(INDEX_FILE).exists());
    Ok(index)
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<DatasetIndex> {
    write_dataset(&synthesize(cfg)?, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsicube::class_pixel_counts;
    use crate::hsicube::dataset::accumulate_counts;

    fn small() -> SynthConfig {
        SynthConfig {
            subjects: 2,
            images_per_subject: 2,
            classes: 3,
            width: 16,
            height: 12,
            blobs: (3, 5),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_single_class_matches_mean() {
        let cfg = SynthConfig {
            subjects: 1,
            images_per_subject: 1,
            classes: 1,
            noise_std: 0.0,
            subject_shift: 0.0,
            ..small()
        };
        let ds = synthesize(&cfg).unwrap();
        let model = &cfg.resolved_spectra()[0];
        let expected: Vec<f32> = Modality::Hsi
            .default_wavelengths()
            .iter()
            .map(|&l| model.eval(l as f64) as f32)
            .collect();
        let img = &ds.subjects[0].1[0];
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                assert_eq!(img.hsi.pixel(x, y), &expected[..]);
            }
        }
    }

    #[test]
    fn zero_noise_pixels_of_a_class_are_identical_everywhere() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            subject_shift: 0.0,
            ..small()
        };
        let ds = synthesize(&cfg).unwrap();
        let mut reference: BTreeMap<u8, Vec<f32>> = BTreeMap::new();
        for (_, img) in ds.images() {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let l = img.labels.get(x, y);
                    let px = img.hsi.pixel(x, y).to_vec();
                    assert_eq!(reference.entry(l).or_insert_with(|| px.clone()), &px);
                }
            }
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ia = generate_synthetic_dataset(&small(), a.path()).unwrap();
        generate_synthetic_dataset(&small(), b.path()).unwrap();
        for s in &ia.subjects {
            for img in &s.images {
                let mut paths: Vec<&String> = img.cubes.values().collect();
                paths.push(&img.labels);
                for p in paths {
                    assert_eq!(
                        fs::read(a.path().join(p)).unwrap(),
                        fs::read(b.path().join(p)).unwrap()
                    );
                }
            }
        }
        assert_eq!(
            fs::read(a.path().join(INDEX_FILE)).unwrap().len(),
            fs::read(b.path().join(INDEX_FILE)).unwrap().len()
        );
    }

    #[test]
    fn four_subjects_five_images_gives_twenty_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            subjects: 4,
            images_per_subject: 5,
            width: 8,
            height: 8,
            ..small()
        };
        let index = generate_synthetic_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(index.image_count(), 20);
        let reloaded = DatasetIndex::load(dir.path()).unwrap();
        assert_eq!(reloaded.subjects, index.subjects);
        assert_eq!(reloaded.load_classes().unwrap().len(), 3);
    }

    #[test]
    fn counts_match_independent_rescan() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            unsure_fraction: 0.2,
            ..small()
        };
        let index = generate_synthetic_dataset(&cfg, dir.path()).unwrap();
        let ids: Vec<String> = index.subjects.iter().map(|s| s.id.clone()).collect();
        let counts = class_pixel_counts(&index, &ids, 3).unwrap();
        // Brute-force oracle: scan raw payload bytes after the header line.
        let mut oracle = vec![0u64; 3];
        let mut total_non_ignored = 0u64;
        for s in &index.subjects {
            for img in &s.images {
                let bytes = fs::read(index.labels_path(img)).unwrap();
                let start = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
                for &b in &bytes[start..] {
                    if b != IGNORE {
                        oracle[b as usize] += 1;
                        total_non_ignored += 1;
                    }
                }
            }
        }
        assert_eq!(counts, oracle);
        assert_eq!(counts.iter().sum::<u64>(), total_non_ignored);
    }

    #[test]
    fn every_label_map_has_annotated_pixels() {
        let cfg = SynthConfig {
            unsure_fraction: 0.9,
            subjects: 3,
            images_per_subject: 4,
            ..small()
        };
        let ds = synthesize(&cfg).unwrap();
        for (_, img) in ds.images() {
            let mut counts = vec![0u64; 3];
            accumulate_counts(&img.labels, &mut counts).unwrap();
            assert!(counts.iter().sum::<u64>() > 0);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(synthesize(&SynthConfig {
            classes: 0,
            ..small()
        })
        .is_err());
        assert!(synthesize(&SynthConfig {
            images_per_subject: 0,
            ..small()
        })
        .is_err());
        assert!(synthesize(&SynthConfig {
            noise_std: -1.0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn derived_modalities_are_valid_cubes() {
        let ds = synthesize(&small()).unwrap();
        let img = &ds.subjects[0].1[0];
        assert_eq!(img.rgb.channels(), 3);
        assert_eq!(img.tpi.channels(), 4);
        assert!(img.rgb.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(img.tpi.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
