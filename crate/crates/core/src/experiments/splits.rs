//! Subject-level train/test split and cross-validation folds.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hsicube::{read_labels, DatasetIndex};
use crate::rng::rng_for;
use crate::{Error, Result};

/// What the split search needs to know about one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub id: String,
    pub images: Vec<String>,
    /// Number of images containing each class.
    pub class_images: BTreeMap<u8, usize>,
}

impl SubjectSummary {
    pub fn has(&self, class: u8) -> bool {
        self.class_images.contains_key(&class)
    }
}

/// Reads every label map once and records per-subject class occurrence.
pub fn summarize(index: &DatasetIndex) -> Result<Vec<SubjectSummary>> {
    index
        .subjects
        .iter()
        .map(|s| {
            let mut class_images = BTreeMap::new();
            for rec in &s.images {
                for c in read_labels(index.labels_path(rec))?.classes_present() {
                    *class_images.entry(c).or_insert(0) += 1;
                }
            }
            Ok(SubjectSummary {
                id: s.id.clone(),
                images: s.images.iter().map(|r| r.id.clone()).collect(),
                class_images,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub k: usize,
    pub test_subjects: usize,
    /// Random fold assignments tried before picking the most homogeneous.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            k: 5,
            test_subjects: 2,
            candidates: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    /// Subjects unseen during this fold's training (`V_unknown`).
    pub validation: Vec<String>,
    /// One held-out image per training subject (`V_known`): `(subject, image)`.
    pub known: Vec<(String, String)>,
}

impl Fold {
    pub fn is_held_out(&self, subject: &str, image: &str) -> bool {
        self.known.iter().any(|(s, i)| s == subject && i == image)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    /// Structural leakage guard.
    pub fn check(&self) -> Result<()> {
        let train: BTreeSet<&String> = self.train.iter().collect();
        if let Some(s) = self.test.iter().find(|s| train.contains(s)) {
            return Err(Error::InvalidData(format!("subject {s} is in both train and test")));
        }
        for (i, f) in self.folds.iter().enumerate() {
            let ft: BTreeSet<&String> = f.train.iter().collect();
            if let Some(s) = f.validation.iter().find(|s| ft.contains(s) || self.test.contains(s)) {
                return Err(Error::InvalidData(format!("fold {i}: validation subject {s} leaks")));
            }
            if f.known.len() != f.train.len() || f.known.iter().any(|(s, _)| !ft.contains(s)) {
                return Err(Error::InvalidData(format!("fold {i}: V_known must hold one image per training subject")));
            }
        }
        Ok(())
    }
}

/// Per-fold `(subjects, images)` counts for each class, plus the minimum
/// subject count over folds and classes.
fn fold_cost(folds: &[Vec<usize>], subjects: &[SubjectSummary], classes: &BTreeSet<u8>) -> (usize, f64) {
    let mut min_count = usize::MAX;
    let mut cost = 0.0;
    let k = folds.len() as f64;
    let mean_images = subjects.iter().map(|s| s.images.len()).sum::<usize>() as f64 / subjects.len().max(1) as f64;
    for &c in classes {
        let subj: Vec<f64> = folds
            .iter()
            .map(|f| f.iter().filter(|&&i| subjects[i].has(c)).count() as f64)
            .collect();
        let imgs: Vec<f64> = folds
            .iter()
            .map(|f| f.iter().map(|&i| subjects[i].class_images.get(&c).copied().unwrap_or(0)).sum::<usize>() as f64 / mean_images.max(1.0))
            .collect();
        for v in [&subj, &imgs] {
            let m = v.iter().sum::<f64>() / k;
            cost += v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / k;
        }
        min_count = min_count.min(subj.iter().map(|&v| v as usize).min().unwrap_or(0));
    }
    (min_count, cost)
}

fn first_missing(group: &[usize], subjects: &[SubjectSummary], classes: &BTreeSet<u8>) -> Option<u8> {
    classes
        .iter()
        .copied()
        .find(|&c| !group.iter().any(|&i| subjects[i].has(c)))
}

/// Chooses test subjects and `k` validation folds. Every class must occur in
/// train and test (when there is a test set) and in every fold's training and
/// validation subjects. Among feasible random candidates, the one with the
/// largest minimum per-class subject count per fold and then the lowest
/// variance of per-class subject and image counts across folds wins.
pub fn make_splits_from(subjects: &[SubjectSummary], cfg: &SplitConfig) -> Result<SplitPlan> {
    let n = subjects.len();
    if cfg.k < 2 {
        return Err(Error::Config("cross-validation needs k ≥ 2".into()));
    }
    if n < cfg.test_subjects + cfg.k {
        return Err(Error::Config(format!(
            "{n} subjects cannot fill {} test subjects and {} folds",
            cfg.test_subjects, cfg.k
        )));
    }
    let classes: BTreeSet<u8> = subjects.iter().flat_map(|s| s.class_images.keys().copied()).collect();
    // One subject per validation fold, plus one for the test set.
    let need = cfg.k + usize::from(cfg.test_subjects > 0);
    for &c in &classes {
        let have = subjects.iter().filter(|s| s.has(c)).count();
        if have < need {
            return Err(Error::InfeasibleSplit {
                class: c,
                detail: format!("present in {have} subjects, at least {need} needed"),
            });
        }
    }
    let mut best: Option<((usize, f64), Vec<usize>, Vec<Vec<usize>>)> = None;
    let mut violations: BTreeMap<u8, usize> = BTreeMap::new();
    for cand in 0..cfg.candidates.max(1) {
        let mut rng = rng_for(cfg.seed, &[0x5711, cand as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let test: Vec<usize> = order[..cfg.test_subjects].to_vec();
        let train: Vec<usize> = order[cfg.test_subjects..].to_vec();
        if cfg.test_subjects > 0 {
            if let Some(c) = first_missing(&test, subjects, &classes) {
                *violations.entry(c).or_default() += 1;
                continue;
            }
        }
        if let Some(c) = first_missing(&train, subjects, &classes) {
            *violations.entry(c).or_default() += 1;
            continue;
        }
        // Rarest-class-first greedy dealing into size-balanced folds.
        let rarity = |i: usize| {
            subjects[i]
                .class_images
                .keys()
                .map(|&c| train.iter().filter(|&&j| subjects[j].has(c)).count())
                .min()
                .unwrap_or(usize::MAX)
        };
        let mut pending = train.clone();
        pending.sort_by_key(|&i| rarity(i));
        let cap = train.len().div_ceil(cfg.k);
        let mut folds: Vec<Vec<usize>> = vec![Vec::new(); cfg.k];
        for &i in &pending {
            let mut slots: Vec<usize> = (0..cfg.k).filter(|&f| folds[f].len() < cap).collect();
            slots.shuffle(&mut rng);
            let score = |f: usize| {
                let overlap: usize = subjects[i]
                    .class_images
                    .keys()
                    .map(|&c| folds[f].iter().filter(|&&j| subjects[j].has(c)).count())
                    .sum();
                (overlap, folds[f].len())
            };
            let f = *slots.iter().min_by_key(|&&f| score(f)).expect("capacity covers all subjects");
            folds[f].push(i);
        }
        let bad = folds.iter().find_map(|members| {
            let rest: Vec<usize> = train.iter().copied().filter(|i| !members.contains(i)).collect();
            first_missing(members, subjects, &classes).or_else(|| first_missing(&rest, subjects, &classes))
        });
        if let Some(c) = bad {
            *violations.entry(c).or_default() += 1;
            continue;
        }
        let (min_count, cost) = fold_cost(&folds, subjects, &classes);
        let key = (min_count, cost);
        let better = match &best {
            None => true,
            Some(((m, c), _, _)) => min_count > *m || (min_count == *m && cost < *c - 1e-12),
        };
        if better {
            best = Some((key, test, folds));
        }
    }
    let Some((_, test, folds)) = best else {
        let (&class, _) = violations.iter().max_by_key(|(_, &v)| v).expect("some candidate failed");
        return Err(Error::InfeasibleSplit {
            class,
            detail: format!("no feasible assignment among {} candidates", cfg.candidates.max(1)),
        });
    };
    let id = |i: usize| subjects[i].id.clone();
    let in_test: BTreeSet<usize> = test.iter().copied().collect();
    let train_ids: Vec<String> = (0..n).filter(|i| !in_test.contains(i)).map(id).collect();
    let mut known_rng = rng_for(cfg.seed, &[0x4b4e]);
    let mut plan_folds = Vec::with_capacity(cfg.k);
    for members in &folds {
        let mut validation: Vec<String> = members.iter().map(|&i| id(i)).collect();
        validation.sort();
        let train: Vec<String> = train_ids.iter().filter(|s| !validation.contains(s)).cloned().collect();
        let known = train
            .iter()
            .map(|s| {
                let summary = subjects.iter().find(|x| &x.id == s).expect("known subject");
                let img = summary.images[known_rng.gen_range(0..summary.images.len())].clone();
                (s.clone(), img)
            })
            .collect();
        plan_folds.push(Fold {
            train,
            validation,
            known,
        });
    }
    let mut test: Vec<String> = test.into_iter().map(id).collect();
    test.sort();
    let plan = SplitPlan {
        train: train_ids,
        test,
        folds: plan_folds,
    };
    plan.check()?;
    Ok(plan)
}

pub fn make_splits(index: &DatasetIndex, cfg: &SplitConfig) -> Result<SplitPlan> {
    make_splits_from(&summarize(index)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: usize, classes: &[u8], images: usize) -> SubjectSummary {
        SubjectSummary {
            id: format!("S{id:02}"),
            images: (0..images).map(|i| format!("i{i}")).collect(),
            class_images: classes.iter().map(|&c| (c, images)).collect(),
        }
    }

    #[test]
    fn all_classes_everywhere_balances_folds() {
        let subjects: Vec<_> = (0..12).map(|i| subject(i, &[0, 1, 2], 3)).collect();
        let plan = make_splits_from(&subjects, &SplitConfig::default()).unwrap();
        assert_eq!(plan.test.len(), 2);
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.validation.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 10);
        for f in &plan.folds {
            assert_eq!(f.known.len(), f.train.len());
            assert_eq!(f.train.len() + f.validation.len(), 10);
        }
    }

    #[test]
    fn rare_class_spreads_over_folds() {
        let k = 5;
        let subjects: Vec<_> = (0..12).map(|i| subject(i, if i < k { &[0, 1] } else { &[0] }, 2)).collect();
        let cfg = SplitConfig {
            test_subjects: 0,
            ..Default::default()
        };
        let plan = make_splits_from(&subjects, &cfg).unwrap();
        for f in &plan.folds {
            let rare = f.validation.iter().filter(|s| subjects.iter().any(|x| &&x.id == s && x.has(1))).count();
            assert!(rare <= 1);
            assert_eq!(rare, 1);
        }
    }

    #[test]
    fn too_rare_class_is_reported() {
        let subjects: Vec<_> = (0..10).map(|i| subject(i, if i < 3 { &[0, 7] } else { &[0] }, 2)).collect();
        let err = make_splits_from(&subjects, &SplitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSplit { class: 7, .. }));
    }

    #[test]
    fn same_seed_same_plan() {
        let subjects: Vec<_> = (0..9).map(|i| subject(i, &[0, 1], 4)).collect();
        let cfg = SplitConfig::default();
        assert_eq!(make_splits_from(&subjects, &cfg).unwrap(), make_splits_from(&subjects, &cfg).unwrap());
    }
}
