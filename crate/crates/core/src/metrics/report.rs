use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{asd, dsc, mask_ignore_union, nsd, ClassScores, ThresholdTable};
use crate::hsicube::{LabelMap, IGNORE};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub dsc: f64,
    pub asd: f64,
    pub nsd: Option<f64>,
}

impl MetricTriple {
    fn mean(items: &[MetricTriple]) -> MetricTriple {
        let n = items.len() as f64;
        MetricTriple {
            dsc: items.iter().map(|m| m.dsc).sum::<f64>() / n,
            asd: items.iter().map(|m| m.asd).sum::<f64>() / n,
            nsd: items
                .iter()
                .map(|m| m.nsd)
                .sum::<Option<f64>>()
                .map(|s| s / n),
        }
    }

    /// Sample standard deviation (0 for a single item).
    fn sd(items: &[MetricTriple]) -> MetricTriple {
        let m = Self::mean(items);
        let sd = |f: &dyn Fn(&MetricTriple) -> f64, mu: f64| {
            if items.len() < 2 {
                return 0.0;
            }
            let ss: f64 = items.iter().map(|x| (f(x) - mu).powi(2)).sum();
            (ss / (items.len() - 1) as f64).sqrt()
        };
        MetricTriple {
            dsc: sd(&|x| x.dsc, m.dsc),
            asd: sd(&|x| x.asd, m.asd),
            nsd: m.nsd.map(|mu| sd(&|x| x.nsd.unwrap_or(0.0), mu)),
        }
    }

    fn from_scores(c: &ClassScores) -> MetricTriple {
        MetricTriple {
            dsc: c.dsc,
            asd: c.asd,
            nsd: c.nsd,
        }
    }
}

/// Per-class scores of one image; `classes` is `None` for images on which no
/// reference class was predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub subject: String,
    pub image: String,
    pub classes: Option<Vec<ClassScores>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject: String,
    pub images: usize,
    pub mean: MetricTriple,
    /// Mean over this subject's images containing the class.
    pub per_class: BTreeMap<u8, MetricTriple>,
}

/// Class → image → subject → cohort hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageEntry>,
    /// Class-mean of every scored image, aligned with `images`.
    pub image_means: Vec<Option<MetricTriple>>,
    pub subjects: Vec<SubjectEntry>,
    pub cohort_mean: MetricTriple,
    pub cohort_sd: MetricTriple,
    /// `(subject, image)` pairs left out because every class was missed.
    pub excluded: Vec<(String, String)>,
}

pub fn aggregate(images: Vec<ImageEntry>) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::Empty("no images to aggregate".into()));
    }
    let mut by_subject: BTreeMap<String, Vec<(MetricTriple, &[ClassScores])>> = BTreeMap::new();
    let mut image_means = Vec::with_capacity(images.len());
    let mut excluded = Vec::new();
    for img in &images {
        match img.classes.as_deref() {
            Some(cls) if !cls.is_empty() => {
                let rows: Vec<MetricTriple> = cls.iter().map(MetricTriple::from_scores).collect();
                let m = MetricTriple::mean(&rows);
                image_means.push(Some(m));
                by_subject.entry(img.subject.clone()).or_default().push((m, cls));
            }
            _ => {
                image_means.push(None);
                excluded.push((img.subject.clone(), img.image.clone()));
                by_subject.entry(img.subject.clone()).or_default();
            }
        }
    }
    let mut subjects = Vec::new();
    for (subject, entries) in by_subject {
        if entries.is_empty() {
            log::warn!("subject {subject} has no scorable images and is left out");
            continue;
        }
        let means: Vec<MetricTriple> = entries.iter().map(|e| e.0).collect();
        let mut per_class: BTreeMap<u8, Vec<MetricTriple>> = BTreeMap::new();
        for (_, cls) in &entries {
            for c in cls.iter() {
                per_class.entry(c.class).or_default().push(MetricTriple::from_scores(c));
            }
        }
        subjects.push(SubjectEntry {
            subject,
            images: entries.len(),
            mean: MetricTriple::mean(&means),
            per_class: per_class.into_iter().map(|(k, v)| (k, MetricTriple::mean(&v))).collect(),
        });
    }
    if subjects.is_empty() {
        return Err(Error::Metric("every image had all classes missing".into()));
    }
    let sm: Vec<MetricTriple> = subjects.iter().map(|s| s.mean).collect();
    Ok(MetricReport {
        images,
        image_means,
        cohort_mean: MetricTriple::mean(&sm),
        cohort_sd: MetricTriple::sd(&sm),
        subjects,
        excluded,
    })
}

impl MetricReport {
    /// One row per subject × class × metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,class,metric,value\n");
        for s in &self.subjects {
            for (c, m) in &s.per_class {
                let _ = writeln!(out, "{},{c},dsc,{}", s.subject, m.dsc);
                let _ = writeln!(out, "{},{c},asd,{}", s.subject, m.asd);
                if let Some(n) = m.nsd {
                    let _ = writeln!(out, "{},{c},nsd,{n}", s.subject);
                }
            }
        }
        out
    }

    /// Subject-level values of one metric, in subject order.
    pub fn subject_values(&self, metric: &str) -> Option<Vec<f64>> {
        self.subjects
            .iter()
            .map(|s| match metric {
                "dsc" => Some(s.mean.dsc),
                "asd" => Some(s.mean.asd),
                "nsd" => s.mean.nsd,
                _ => None,
            })
            .collect()
    }
}

/// Hierarchical mean DSC where an image with nothing predicted scores 0
/// instead of being excluded. Used for model selection.
pub fn hierarchical_mean_dsc(items: &[(&str, &LabelMap, &LabelMap)]) -> Result<f64> {
    let mut by_subject: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &(subject, pred, reference) in items {
        let classes = reference.classes_present();
        if classes.is_empty() {
            continue;
        }
        let mut total = 0.0;
        for &o in &classes {
            total += dsc(pred, reference, o)?;
        }
        by_subject
            .entry(subject)
            .or_default()
            .push(total / classes.len() as f64);
    }
    if by_subject.is_empty() {
        return Err(Error::Empty("no annotated images to score".into()));
    }
    let n = by_subject.len() as f64;
    Ok(by_subject
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .sum::<f64>()
        / n)
}

/// Row-normalized confusion per subject, averaged across subjects over the
/// rows each subject actually has. `None` marks rows no subject has.
pub fn confusion(
    items: &[(&str, &LabelMap, &LabelMap)],
    n_classes: usize,
) -> Result<Vec<Vec<Option<f64>>>> {
    let mut per_subject: BTreeMap<&str, Vec<Vec<u64>>> = BTreeMap::new();
    for &(subject, pred, reference) in items {
        if !pred.same_shape(reference) {
            return Err(Error::DimensionMismatch("confusion pair differs in size".into()));
        }
        let m = per_subject
            .entry(subject)
            .or_insert_with(|| vec![vec![0; n_classes]; n_classes]);
        for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
            if r == IGNORE || p == IGNORE {
                continue;
            }
            if r as usize >= n_classes || p as usize >= n_classes {
                return Err(Error::InvalidData(format!("label outside {n_classes} classes")));
            }
            m[r as usize][p as usize] += 1;
        }
    }
    let mut sum = vec![vec![0.0; n_classes]; n_classes];
    let mut rows = vec![0usize; n_classes];
    for m in per_subject.values() {
        for (r, row) in m.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total == 0 {
                continue;
            }
            rows[r] += 1;
            for (c, &v) in row.iter().enumerate() {
                sum[r][c] += v as f64 / total as f64;
            }
        }
    }
    Ok(sum
        .into_iter()
        .zip(rows)
        .map(|(row, n)| {
            row.into_iter()
                .map(|v| (n > 0).then(|| v / n as f64))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAgreement {
    pub class: u8,
    pub dsc: f64,
    pub asd: f64,
    pub nsd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Classes annotated in both maps.
    pub classes: Vec<ClassAgreement>,
    pub only_in_first: Vec<u8>,
    pub only_in_second: Vec<u8>,
}

/// Agreement between two annotations of one image after removing the union
/// of their ignored pixels.
pub fn rater_agreement(
    a: &LabelMap,
    b: &LabelMap,
    thresholds: Option<&ThresholdTable>,
) -> Result<AgreementReport> {
    let (a, b) = mask_ignore_union(a, b)?;
    let ca = a.classes_present();
    let cb = b.classes_present();
    let mut classes = Vec::new();
    for &o in ca.iter().filter(|o| cb.contains(o)) {
        let tau = thresholds.and_then(|t| t.get(o));
        classes.push(ClassAgreement {
            class: o,
            dsc: dsc(&b, &a, o)?,
            asd: asd(&b, &a, o)?.expect("class present in both"),
            nsd: tau.map(|t| nsd(&b, &a, o, t)).transpose()?,
        });
    }
    Ok(AgreementReport {
        classes,
        only_in_first: ca.iter().copied().filter(|o| !cb.contains(o)).collect(),
        only_in_second: cb.iter().copied().filter(|o| !ca.contains(o)).collect(),
    })
}

impl AgreementReport {
    /// As per-image class scores for [`aggregate`].
    pub fn as_scores(&self) -> Vec<ClassScores> {
        self.classes
            .iter()
            .map(|c| ClassScores {
                class: c.class,
                dsc: c.dsc,
                asd: c.asd,
                nsd: c.nsd,
                missing: false,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(vals: &[f64]) -> Option<Vec<ClassScores>> {
        Some(
            vals.iter()
                .enumerate()
                .map(|(i, &v)| ClassScores {
                    class: i as u8,
                    dsc: v,
                    asd: 1.0 - v,
                    nsd: Some(v),
                    missing: false,
                })
                .collect(),
        )
    }

    fn entry(s: &str, i: &str, vals: &[f64]) -> ImageEntry {
        ImageEntry {
            subject: s.into(),
            image: i.into(),
            classes: scores(vals),
        }
    }

    #[test]
    fn single_image_arithmetic() {
        let r = aggregate(vec![entry("P1", "a", &[0.8, 0.6])]).unwrap();
        assert!((r.cohort_mean.dsc - 0.7).abs() < 1e-15);
        assert!((r.subjects[0].mean.dsc - 0.7).abs() < 1e-15);
        assert_eq!(r.cohort_sd.dsc, 0.0);
    }

    #[test]
    fn cohort_is_mean_of_subjects() {
        let r = aggregate(vec![
            entry("A", "1", &[1.0]),
            entry("B", "1", &[0.0]),
            entry("B", "2", &[0.0]),
            entry("B", "3", &[0.0]),
        ])
        .unwrap();
        assert_eq!(r.cohort_mean.dsc, 0.5);
        assert!((r.cohort_sd.dsc - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn randomized_report_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut entries = Vec::new();
        let mut raw: Vec<Vec<Vec<f64>>> = Vec::new();
        for s in 0..4 {
            let mut subj = Vec::new();
            for i in 0..rng.gen_range(1..5) {
                let vals: Vec<f64> = (0..rng.gen_range(1..4)).map(|_| rng.gen()).collect();
                entries.push(entry(&format!("S{s}"), &format!("I{i}"), &vals));
                subj.push(vals);
            }
            raw.push(subj);
        }
        let r = aggregate(entries).unwrap();
        let mut cohort = 0.0;
        for subj in &raw {
            let mut acc = 0.0;
            for img in subj {
                acc += img.iter().sum::<f64>() / img.len() as f64;
            }
            cohort += acc / subj.len() as f64;
        }
        cohort /= raw.len() as f64;
        assert!((r.cohort_mean.dsc - cohort).abs() < 1e-12);
    }

    #[test]
    fn all_missing_image_is_excluded() {
        let r = aggregate(vec![
            entry("A", "1", &[0.5]),
            ImageEntry {
                subject: "A".into(),
                image: "2".into(),
                classes: None,
            },
        ])
        .unwrap();
        assert_eq!(r.excluded, vec![("A".to_string(), "2".to_string())]);
        assert_eq!(r.cohort_mean.dsc, 0.5);
        assert!(r.to_csv().starts_with("subject,class,metric,value\nA,0,dsc,0.5\n"));
    }

    #[test]
    fn confusion_examples() {
        let r = LabelMap::new(4, 1, vec![0, 0, 0, 1]).unwrap();
        let p = LabelMap::new(4, 1, vec![0, 0, 1, 1]).unwrap();
        let m = confusion(&[("A", &r, &r)], 2).unwrap();
        assert_eq!(m, vec![vec![Some(1.0), Some(0.0)], vec![Some(0.0), Some(1.0)]]);
        let m = confusion(&[("A", &p, &r)], 3).unwrap();
        assert!((m[0][0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m[0][1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m[2], vec![None, None, None]);
        // Class 1 absent for A; row 1 comes from B only.
        let ra = LabelMap::new(2, 1, vec![0, 0]).unwrap();
        let rb = LabelMap::new(2, 1, vec![1, 1]).unwrap();
        let pb = LabelMap::new(2, 1, vec![1, 0]).unwrap();
        let m = confusion(&[("A", &ra, &ra), ("B", &pb, &rb)], 2).unwrap();
        assert_eq!(m[1], vec![Some(0.5), Some(0.5)]);
    }

    #[test]
    fn agreement_with_itself_and_ignore_union() {
        let a = LabelMap::new(4, 2, vec![0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        let t = ThresholdTable::uniform([0, 1], 1.0);
        let r = rater_agreement(&a, &a, Some(&t)).unwrap();
        assert!(r.classes.iter().all(|c| c.dsc == 1.0 && c.asd == 0.0 && c.nsd == Some(1.0)));
        let mut b = a.clone();
        b.labels_mut()[2] = IGNORE;
        let mut a2 = a.clone();
        a2.labels_mut()[2] = 0;
        // Pixel 2 is ignored in b, so a2's disagreement there does not count.
        let r = rater_agreement(&a2, &b, Some(&t)).unwrap();
        assert!(r.classes.iter().all(|c| c.dsc == 1.0));
        let swapped = rater_agreement(&b, &a2, Some(&t)).unwrap();
        assert_eq!(r, swapped);
    }

    #[test]
    fn agreement_matches_metric_oracles() {
        let a = LabelMap::new(4, 1, vec![0, 0, 1, 1]).unwrap();
        let b = LabelMap::new(4, 1, vec![0, 1, 1, 2]).unwrap();
        let r = rater_agreement(&a, &b, None).unwrap();
        assert_eq!(r.only_in_second, vec![2]);
        let c0 = &r.classes[0];
        assert!((c0.dsc - 2.0 / 3.0).abs() < 1e-15);
        assert!((c0.asd - 1.0 / 3.0).abs() < 1e-15);
        let e = evaluate_image(&b, &a, None).unwrap().unwrap();
        assert_eq!(e[0].dsc, c0.dsc);
    }
}
