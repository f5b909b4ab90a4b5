//! Segmentation metrics: DSC, symmetric average surface distance (ASD) and
//! normalized surface distance (NSD) with class-specific tolerances.
//!
//! Pixels marked IGNORE in the reference are removed from both masks before
//! anything is measured. Boundaries use 4-connectivity with the image edge
//! counting as outside, and distances are exact Euclidean pixel distances.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hsicube::{LabelMap, IGNORE};
use crate::{Error, Result};

pub use report::{
    aggregate, confusion, hierarchical_mean_dsc, rater_agreement, AgreementReport, ClassAgreement,
    ImageEntry, MetricReport, MetricTriple, SubjectEntry,
};

/// Target-boundary size from which distances switch to a distance transform.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

fn check_pair(pred: &LabelMap, reference: &LabelMap) -> Result<()> {
    if !pred.same_shape(reference) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs reference {}x{}",
            pred.width(),
            pred.height(),
            reference.width(),
            reference.height()
        )));
    }
    Ok(())
}

/// Class-`o` masks of prediction and reference with reference IGNORE removed.
fn masks(pred: &LabelMap, reference: &LabelMap, o: u8) -> (Vec<bool>, Vec<bool>) {
    pred.labels()
        .iter()
        .zip(reference.labels())
        .map(|(&p, &r)| (r != IGNORE && p == o, r == o))
        .unzip()
}

fn require_class(mask: &[bool], o: u8) -> Result<()> {
    if mask.iter().any(|&m| m) {
        Ok(())
    } else {
        Err(Error::Metric(format!("class {o} is not present in the reference")))
    }
}

/// `2|P∩R| / (|P|+|R|)`; 0 when the class is not predicted.
pub fn dsc(pred: &LabelMap, reference: &LabelMap, o: u8) -> Result<f64> {
    check_pair(pred, reference)?;
    let (p, r) = masks(pred, reference, o);
    require_class(&r, o)?;
    Ok(dsc_masks(&p, &r))
}

fn dsc_masks(p: &[bool], r: &[bool]) -> f64 {
    let (mut inter, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(r) {
        inter += (a && b) as usize;
        np += a as usize;
        nr += b as usize;
    }
    if np + nr == 0 {
        return 0.0;
    }
    2.0 * inter as f64 / (np + nr) as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundarySet {
    pub width: usize,
    pub height: usize,
    /// `(x, y)` in scan order.
    pub points: Vec<(usize, usize)>,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mask pixels with a 4-neighbor outside the mask or on the image edge.
pub fn boundary(mask: &[bool], width: usize, height: usize) -> Result<BoundarySet> {
    if mask.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "mask of {} pixels for {width}x{height}",
            mask.len()
        )));
    }
    let mut points = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let edge = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
            if edge
                || !mask[y * width + x - 1]
                || !mask[y * width + x + 1]
                || !mask[(y - 1) * width + x]
                || !mask[(y + 1) * width + x]
            {
                points.push((x, y));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Empty("boundary of an empty mask".into()));
    }
    Ok(BoundarySet {
        width,
        height,
        points,
    })
}

/// Stand-in for "no site" that keeps the parabola intersections finite.
const FAR: f64 = 1e20;

/// Squared 1-D distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        *o = (q as f64 - v[k] as f64).powi(2) + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest site.
pub fn distance_transform(sites: &BoundarySet) -> Vec<f64> {
    let (w, h) = (sites.width, sites.height);
    let mut grid = vec![FAR; w * h];
    for &(x, y) in &sites.points {
        grid[y * w + x] = 0.0;
    }
    let n = w.max(h);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.iter_mut().for_each(|d| *d = d.sqrt());
    grid
}

fn nearest_brute(from: &BoundarySet, to: &BoundarySet) -> Vec<f64> {
    from.points
        .iter()
        .map(|&(x, y)| {
            to.points
                .iter()
                .map(|&(u, v)| {
                    let dx = x as f64 - u as f64;
                    let dy = y as f64 - v as f64;
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn nearest_edt(from: &BoundarySet, to: &BoundarySet) -> Vec<f64> {
    let dt = distance_transform(to);
    from.points.iter().map(|&(x, y)| dt[y * to.width + x]).collect()
}

/// Distance from every point of `from` to the nearest point of `to`.
pub fn nearest_distances(from: &BoundarySet, to: &BoundarySet) -> Vec<f64> {
    if to.len() < BRUTE_FORCE_LIMIT {
        nearest_brute(from, to)
    } else {
        nearest_edt(from, to)
    }
}

/// `D_ML` (prediction → reference) and `D_REF` (reference → prediction), or
/// `None` when the class is not predicted.
pub fn surface_distances(
    pred: &LabelMap,
    reference: &LabelMap,
    o: u8,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_pair(pred, reference)?;
    let (p, r) = masks(pred, reference, o);
    require_class(&r, o)?;
    if !p.iter().any(|&v| v) {
        return Ok(None);
    }
    let (w, h) = (pred.width(), pred.height());
    let bp = boundary(&p, w, h)?;
    let br = boundary(&r, w, h)?;
    Ok(Some((nearest_distances(&bp, &br), nearest_distances(&br, &bp))))
}

/// Symmetric mean over both distance multisets.
pub fn asd_from_distances(d_ml: &[f64], d_ref: &[f64]) -> f64 {
    (d_ml.iter().sum::<f64>() + d_ref.iter().sum::<f64>()) / (d_ml.len() + d_ref.len()) as f64
}

/// Fraction of both distance multisets within `tau`.
pub fn nsd_from_distances(d_ml: &[f64], d_ref: &[f64], tau: f64) -> f64 {
    let within = d_ml.iter().chain(d_ref).filter(|&&d| d <= tau).count();
    within as f64 / (d_ml.len() + d_ref.len()) as f64
}

/// Symmetric ASD. `None` marks an unpredicted class; the image-level
/// placeholder rule resolves it in [`evaluate_image`].
pub fn asd(pred: &LabelMap, reference: &LabelMap, o: u8) -> Result<Option<f64>> {
    Ok(surface_distances(pred, reference, o)?.map(|(a, b)| asd_from_distances(&a, &b)))
}

/// Fraction of boundary distances within `tau`; 0 for an unpredicted class.
pub fn nsd(pred: &LabelMap, reference: &LabelMap, o: u8, tau: f64) -> Result<f64> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Metric(format!("invalid tolerance {tau} for class {o}")));
    }
    Ok(surface_distances(pred, reference, o)?.map_or(0.0, |(a, b)| nsd_from_distances(&a, &b, tau)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdAggregation {
    #[default]
    Mean,
    Median,
    Q95,
}

/// Class tolerances τ^o with their per-image provenance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub aggregation: ThresholdAggregation,
    pub tau: BTreeMap<u8, f64>,
    /// τ_i^o for every image pair in which class `o` was co-annotated.
    pub per_image: BTreeMap<u8, Vec<f64>>,
}

impl ThresholdTable {
    pub fn get(&self, o: u8) -> Option<f64> {
        self.tau.get(&o).copied()
    }

    /// Same tolerance for every listed class.
    pub fn uniform(classes: impl IntoIterator<Item = u8>, tau: f64) -> Self {
        Self {
            aggregation: ThresholdAggregation::Mean,
            tau: classes.into_iter().map(|c| (c, tau)).collect(),
            per_image: BTreeMap::new(),
        }
    }
}

/// Both maps with IGNORE wherever either one is IGNORE.
pub fn mask_ignore_union(a: &LabelMap, b: &LabelMap) -> Result<(LabelMap, LabelMap)> {
    check_pair(a, b)?;
    let mut a2 = a.clone();
    let mut b2 = b.clone();
    for (x, y) in a2.labels_mut().iter_mut().zip(b2.labels_mut()) {
        if *x == IGNORE || *y == IGNORE {
            *x = IGNORE;
            *y = IGNORE;
        }
    }
    Ok((a2, b2))
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// τ_i^o is the symmetric mean boundary distance between the two annotations
/// of image i (ignore-union removed); τ^o aggregates over images where both
/// annotations contain class o.
pub fn estimate_thresholds(
    pairs: &[(LabelMap, LabelMap)],
    aggregation: ThresholdAggregation,
) -> Result<ThresholdTable> {
    if pairs.is_empty() {
        return Err(Error::Empty("threshold estimation needs at least one pair".into()));
    }
    let mut per_image: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for (a, b) in pairs {
        let (a, b) = mask_ignore_union(a, b)?;
        let ca = a.classes_present();
        let cb = b.classes_present();
        for &o in ca.iter().filter(|o| cb.contains(o)) {
            if let Some(d) = asd(&a, &b, o)? {
                per_image.entry(o).or_default().push(d);
            }
        }
    }
    let tau = per_image
        .iter()
        .map(|(&o, v)| {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let t = match aggregation {
                ThresholdAggregation::Mean => v.iter().sum::<f64>() / v.len() as f64,
                ThresholdAggregation::Median => quantile_sorted(&s, 0.5),
                ThresholdAggregation::Q95 => quantile_sorted(&s, 0.95),
            };
            (o, t)
        })
        .collect();
    Ok(ThresholdTable {
        aggregation,
        tau,
        per_image,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: u8,
    pub dsc: f64,
    pub asd: f64,
    /// `None` when no tolerance is available for the class.
    pub nsd: Option<f64>,
    /// Class present in the reference but never predicted.
    pub missing: bool,
}

/// Metrics for every class of the reference. Returns `Ok(None)` when no
/// reference class was predicted, which leaves the ASD placeholder undefined.
pub fn evaluate_image(
    pred: &LabelMap,
    reference: &LabelMap,
    thresholds: Option<&ThresholdTable>,
) -> Result<Option<Vec<ClassScores>>> {
    check_pair(pred, reference)?;
    let mut out = Vec::new();
    for o in reference.classes_present() {
        let (p, r) = masks(pred, reference, o);
        let dsc = dsc_masks(&p, &r);
        let tau = thresholds.and_then(|t| t.get(o));
        let row = match surface_distances(pred, reference, o)? {
            Some((a, b)) => ClassScores {
                class: o,
                dsc,
                asd: asd_from_distances(&a, &b),
                nsd: tau.map(|t| nsd_from_distances(&a, &b, t)),
                missing: false,
            },
            None => ClassScores {
                class: o,
                dsc: 0.0,
                asd: f64::NAN,
                nsd: tau.map(|_| 0.0),
                missing: true,
            },
        };
        out.push(row);
    }
    let worst = out
        .iter()
        .filter(|c| !c.missing)
        .map(|c| c.asd)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let Some(worst) = worst else {
        return Ok(None);
    };
    for c in out.iter_mut().filter(|c| c.missing) {
        c.asd = worst;
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(w: usize, h: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let r = map(2, 2, &[1, 0, 1, 0]);
        assert_eq!(dsc(&r, &r, 1).unwrap(), 1.0);
        let p = map(2, 2, &[1, 0, 0, 0]);
        assert!((dsc(&p, &r, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&map(2, 2, &[0; 4]), &r, 1).unwrap(), 0.0);
        assert!(dsc(&r, &r, 3).is_err());
    }

    #[test]
    fn boundary_examples() {
        let full = boundary(&[true; 20], 5, 4).unwrap();
        assert_eq!(full.len(), 5 * 4 - 3 * 2);
        let single = boundary(&[false, true, false, false], 2, 2).unwrap();
        assert_eq!(single.points, vec![(1, 0)]);
        let mut sq = vec![false; 25];
        for y in 1..4 {
            for x in 1..4 {
                sq[y * 5 + x] = true;
            }
        }
        assert_eq!(boundary(&sq, 5, 5).unwrap().len(), 8);
        assert!(boundary(&[false; 4], 2, 2).is_err());
    }

    #[test]
    fn asd_examples() {
        let r = map(5, 1, &[1, 0, 0, 0, 0]);
        assert_eq!(asd(&r, &r, 1).unwrap(), Some(0.0));
        let p = map(5, 1, &[0, 0, 0, 1, 0]);
        assert_eq!(asd(&p, &r, 1).unwrap(), Some(3.0));
        assert_eq!(asd(&map(5, 1, &[0; 5]), &r, 1).unwrap(), None);
    }

    #[test]
    fn nsd_examples() {
        assert_eq!(nsd_from_distances(&[0.0, 2.0], &[1.0, 3.0], 1.0), 0.5);
        let r = map(5, 1, &[1, 1, 0, 0, 0]);
        assert_eq!(nsd(&r, &r, 1, 0.0).unwrap(), 1.0);
        let p = map(5, 1, &[0, 0, 0, 1, 1]);
        assert_eq!(nsd(&p, &r, 1, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ignored_reference_pixels_are_excluded() {
        let r = map(3, 1, &[1, IGNORE, 0]);
        let p = map(3, 1, &[1, 1, 0]);
        assert_eq!(dsc(&p, &r, 1).unwrap(), 1.0);
    }

    #[test]
    fn missing_class_takes_worst_asd() {
        // Class 1 predicted 3 px off, class 2 missing.
        let r = map(6, 1, &[1, 0, 0, 0, 2, 0]);
        let p = map(6, 1, &[0, 0, 0, 1, 0, 0]);
        let s = evaluate_image(&p, &r, Some(&ThresholdTable::uniform([0, 1, 2], 1.0)))
            .unwrap()
            .unwrap();
        let c2 = s.iter().find(|c| c.class == 2).unwrap();
        let c1 = s.iter().find(|c| c.class == 1).unwrap();
        assert!(c2.missing && c2.dsc == 0.0 && c2.nsd == Some(0.0));
        assert_eq!(c2.asd, c1.asd.max(s[0].asd));
        let none = map(6, 1, &[3; 6]);
        assert!(evaluate_image(&none, &r, None).unwrap().is_none());
    }

    #[test]
    fn thresholds_from_constant_offset() {
        let a = map(6, 1, &[1, 1, 0, 0, 0, 0]);
        let b = map(6, 1, &[0, 0, 0, 1, 1, 0]);
        // Boundary {0,1} vs {3,4}: distances 3,2 and 2,3; mean 2.5.
        let t = estimate_thresholds(&[(a.clone(), b)], ThresholdAggregation::Mean).unwrap();
        assert_eq!(t.get(1), Some(2.5));
        let same = estimate_thresholds(&[(a.clone(), a.clone())], ThresholdAggregation::Mean).unwrap();
        assert!(same.tau.values().all(|&v| v == 0.0));
        let only_a = map(6, 1, &[0; 6]);
        let t = estimate_thresholds(&[(a, only_a)], ThresholdAggregation::Mean).unwrap();
        assert_eq!(t.get(1), None);
    }

    #[test]
    fn uniform_two_pixel_offset_gives_tau_two() {
        // Two one-pixel lines two rows apart.
        let (w, h) = (8, 12);
        let band = |y0: usize| -> LabelMap {
            let v = (0..w * h).map(|p| u8::from(p / w == y0)).collect();
            LabelMap::new(w, h, v).unwrap()
        };
        let t = estimate_thresholds(&[(band(3), band(5))], ThresholdAggregation::Mean).unwrap();
        assert!((t.get(1).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let (w, h) = (rng.gen_range(1..30), rng.gen_range(1..30));
            let mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.3)).collect();
            let other: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.2)).collect();
            let (Ok(a), Ok(b)) = (boundary(&mask, w, h), boundary(&other, w, h)) else {
                continue;
            };
            let x = nearest_brute(&a, &b);
            let y = nearest_edt(&a, &b);
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    fn two_class(w: usize, h: usize, rng: &mut ChaCha8Rng) -> LabelMap {
        LabelMap::new(w, h, (0..w * h).map(|_| rng.gen_range(0..2)).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn metric_ranges_and_symmetry(seed in 0u64..1000, tau in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = two_class(7, 6, &mut rng);
            let b = two_class(7, 6, &mut rng);
            for o in 0..2 {
                if !a.classes_present().contains(&o) || !b.classes_present().contains(&o) {
                    continue;
                }
                let d = dsc(&a, &b, o).unwrap();
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(d, dsc(&b, &a, o).unwrap());
                let x = asd(&a, &b, o).unwrap().unwrap();
                let y = asd(&b, &a, o).unwrap().unwrap();
                prop_assert!(x >= 0.0 && (x - y).abs() < 1e-12);
                let n1 = nsd(&a, &b, o, tau).unwrap();
                let n2 = nsd(&a, &b, o, tau + 0.5).unwrap();
                prop_assert!((0.0..=1.0).contains(&n1) && n1 <= n2);
                prop_assert_eq!(d == 1.0, a.labels().iter().zip(b.labels()).all(|(p, q)| (*p == o) == (*q == o)));
            }
        }
    }
}
