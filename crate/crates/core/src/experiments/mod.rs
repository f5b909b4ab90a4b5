//! Cross-validation runs, generalization tracking (`V_known` against
//! `V_unknown`), the training-set-size study and seed variability.
//!
//! Everything here is a function of the dataset, the configuration and its
//! seeds; no step depends on wall-clock time or thread scheduling.

mod splits;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataload::{DiskSource, ImageSource};
use crate::hsicube::{DatasetIndex, LabelMap, LoadedImage, SubjectRecord, IGNORE};
use crate::metrics::{aggregate, evaluate_image, ImageEntry, MetricReport, MetricTriple, ThresholdTable};
use crate::models::{ensemble, predict_image, train, Granularity, Model, ModelKind, TrainConfig, TrainOutcome, ValidationSet};
use crate::preprocess::{preprocess, PreprocessOptions};
use crate::ranking::BootstrapConfig;
use crate::rng::rng_for;
use crate::{Error, Result};

pub use splits::{make_splits, make_splits_from, summarize, Fold, SplitConfig, SplitPlan, SubjectSummary};

pub const V_UNKNOWN: &str = "V_unknown";
pub const V_KNOWN: &str = "V_known";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSizeConfig {
    /// Training-set sizes; `None` means `1..N_train`.
    pub n_values: Option<Vec<usize>>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for DataSizeConfig {
    fn default() -> Self {
        Self {
            n_values: None,
            repeats: 5,
            seed: 0,
        }
    }
}

/// Experiment description read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub kinds: Vec<ModelKind>,
    pub split: SplitConfig,
    pub train: TrainConfig,
    /// Applied when images are decoded; leave unset for preprocessed datasets.
    pub preprocess: Option<PreprocessOptions>,
    /// Ensemble the averaged (SWA) models instead of the best-epoch ones.
    pub use_swa: bool,
    /// NSD tolerances; `None` skips NSD.
    pub thresholds: Option<ThresholdTable>,
    pub datasize: DataSizeConfig,
    pub bootstrap: BootstrapConfig,
    pub variability_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            kinds: vec!["pixel#HSI".parse().expect("valid kind")],
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            preprocess: None,
            use_swa: false,
            thresholds: None,
            datasize: DataSizeConfig::default(),
            bootstrap: BootstrapConfig::default(),
            variability_seeds: (0..5).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.train.validate()?;
        if cfg.kinds.is_empty() {
            return Err(Error::Config("experiment names no model kinds".into()));
        }
        Ok(cfg)
    }
}

/// Where a run reads images from.
#[derive(Debug, Clone)]
pub struct DataAccess {
    pub index: DatasetIndex,
    pub preprocess: Option<PreprocessOptions>,
}

impl DataAccess {
    pub fn new(index: DatasetIndex, preprocess: Option<PreprocessOptions>) -> Self {
        Self { index, preprocess }
    }

    /// Index restricted to `subjects`, minus the `(subject, image)` pairs in `exclude`.
    pub fn subset(&self, subjects: &[String], exclude: &[(String, String)]) -> Result<DatasetIndex> {
        let restricted = self.index.restrict(subjects)?;
        let subjects = restricted
            .subjects
            .into_iter()
            .map(|s| SubjectRecord {
                images: s
                    .images
                    .into_iter()
                    .filter(|r| !exclude.iter().any(|(sid, iid)| sid == &s.id && iid == &r.id))
                    .collect(),
                id: s.id,
            })
            .collect();
        DatasetIndex::new(restricted.root, subjects)
    }

    pub fn source(&self, index: DatasetIndex, kind: ModelKind) -> Arc<dyn ImageSource> {
        let rgb = kind.granularity == Granularity::Superpixel;
        Arc::new(DiskSource::new(index, kind.modality, rgb, self.preprocess))
    }

    /// Decodes every image of `index`.
    pub fn load_all(&self, index: &DatasetIndex, kind: ModelKind) -> Result<Vec<LoadedImage>> {
        let rgb = kind.granularity == Granularity::Superpixel;
        let mut out = Vec::new();
        for s in &index.subjects {
            for r in &s.images {
                let mut img = index.load_image(s, r, kind.modality, rgb)?;
                if let Some(o) = &self.preprocess {
                    img.cube = preprocess(&img.cube, o).cube;
                }
                out.push(img);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub epoch: usize,
    pub unknown: f64,
    pub known: f64,
    /// `known − unknown`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationTrace {
    pub rows: Vec<GapRow>,
}

impl GeneralizationTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,v_unknown,v_known,gap\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.unknown, r.known, r.gap);
        }
        s
    }

    /// Mean gap over the last `n` epochs.
    pub fn late_gap(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.gap).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Per-epoch DSC on both validation sets, read from a training history.
pub fn track_generalization(history: &[crate::models::EpochRecord]) -> Result<GeneralizationTrace> {
    let rows = history
        .iter()
        .map(|r| {
            let known = *r
                .dsc
                .get(V_KNOWN)
                .ok_or_else(|| Error::Empty(format!("epoch {} has no {V_KNOWN} score", r.epoch)))?;
            let unknown = *r
                .dsc
                .get(V_UNKNOWN)
                .ok_or_else(|| Error::Empty(format!("epoch {} has no {V_UNKNOWN} score", r.epoch)))?;
            Ok(GapRow {
                epoch: r.epoch,
                unknown,
                known,
                gap: known - unknown,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Empty("no epochs to track".into()));
    }
    Ok(GeneralizationTrace { rows })
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub outcome: TrainOutcome,
    pub trace: GeneralizationTrace,
}

/// Trains one fold: fold-training subjects minus their held-out images,
/// scored each epoch on `V_unknown` (model selection) and `V_known`.
pub fn run_fold(data: &DataAccess, plan: &SplitPlan, fold: usize, kind: ModelKind, cfg: &TrainConfig) -> Result<FoldRun> {
    let f = plan
        .folds
        .get(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} out of range")))?;
    if f.known.is_empty() {
        return Err(Error::Empty(format!("fold {fold} has no {V_KNOWN} images")));
    }
    let train_index = data.subset(&f.train, &f.known)?;
    let unknown = data.load_all(&data.subset(&f.validation, &[])?, kind)?;
    let known_index = {
        let all = data.subset(&f.train, &[])?;
        let subjects = all
            .subjects
            .into_iter()
            .map(|s| SubjectRecord {
                images: s.images.into_iter().filter(|r| f.is_held_out(&s.id, &r.id)).collect(),
                id: s.id,
            })
            .collect();
        DatasetIndex::new(all.root, subjects)?
    };
    let known = data.load_all(&known_index, kind)?;
    let sets = [
        ValidationSet {
            name: V_UNKNOWN.into(),
            images: unknown,
        },
        ValidationSet {
            name: V_KNOWN.into(),
            images: known,
        },
    ];
    let outcome = train(kind, cfg, data.source(train_index, kind), &sets)?;
    let trace = track_generalization(&outcome.history)?;
    Ok(FoldRun { fold, outcome, trace })
}

/// Keeps only `classes` in a reference map; everything else becomes IGNORE.
pub fn restrict_classes(labels: &LabelMap, classes: &BTreeSet<u8>) -> LabelMap {
    let mut out = labels.clone();
    for l in out.labels_mut() {
        if !classes.contains(l) {
            *l = IGNORE;
        }
    }
    out
}

/// Scores (ensembled, when several) model predictions on `images`.
pub fn evaluate_models(
    models: &[&Model],
    images: &[LoadedImage],
    thresholds: Option<&ThresholdTable>,
    restrict: Option<&BTreeSet<u8>>,
) -> Result<MetricReport> {
    if models.is_empty() {
        return Err(Error::Empty("no models to evaluate".into()));
    }
    let entries = images
        .iter()
        .map(|img| {
            let preds = models
                .iter()
                .map(|m| predict_image(m, &img.cube, img.rgb.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let pred = if preds.len() == 1 { preds.into_iter().next().expect("one") } else { ensemble(&preds)? };
            let reference = match restrict {
                Some(c) => restrict_classes(&img.labels, c),
                None => img.labels.clone(),
            };
            Ok(ImageEntry {
                subject: img.subject.clone(),
                image: img.image.clone(),
                classes: evaluate_image(&pred.labels, &reference, thresholds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(entries)
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldRun>,
    /// Test-set scores of the fold ensemble.
    pub test: MetricReport,
}

/// All folds of `plan`, then the softmax-averaged fold ensemble on the test set.
pub fn run_cross_validation(
    data: &DataAccess,
    plan: &SplitPlan,
    kind: ModelKind,
    cfg: &TrainConfig,
    use_swa: bool,
    thresholds: Option<&ThresholdTable>,
) -> Result<CrossValidation> {
    let folds = (0..plan.folds.len())
        .map(|f| run_fold(data, plan, f, kind, cfg))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<&Model> = folds
        .iter()
        .map(|f| if use_swa { &f.outcome.swa } else { &f.outcome.best })
        .collect();
    let test_images = data.load_all(&data.subset(&plan.test, &[])?, kind)?;
    let test = evaluate_models(&models, &test_images, thresholds, None)?;
    Ok(CrossValidation { folds, test })
}

/// Classes present in every listed subject.
pub fn common_classes(summaries: &[SubjectSummary], subjects: &[String]) -> BTreeSet<u8> {
    let mut common: Option<BTreeSet<u8>> = None;
    for s in summaries.iter().filter(|s| subjects.contains(&s.id)) {
        let here: BTreeSet<u8> = s.class_images.keys().copied().collect();
        common = Some(match common {
            None => here,
            Some(c) => c.intersection(&here).copied().collect(),
        });
    }
    common.unwrap_or_default()
}

/// `n` distinct subjects for one repeat of the size study.
pub fn sample_subjects(train: &[String], n: usize, repeat: usize, seed: u64) -> Result<Vec<String>> {
    if n == 0 || n >= train.len() {
        return Err(Error::Config(format!(
            "training-set size {n} must lie in 1..{}",
            train.len()
        )));
    }
    let mut pool = train.to_vec();
    pool.shuffle(&mut rng_for(seed, &[0xd5, n as u64, repeat as u64]));
    pool.truncate(n);
    pool.sort();
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSizeRow {
    pub kind: ModelKind,
    pub n: usize,
    pub repeat: usize,
    pub subjects: Vec<String>,
    pub scores: MetricTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSizeResults {
    /// Classes present in every training subject; metrics use only these.
    pub classes: BTreeSet<u8>,
    pub rows: Vec<DataSizeRow>,
}

impl DataSizeResults {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,n,repeat,dsc,asd,nsd,subjects\n");
        for r in &self.rows {
            let nsd = r.scores.nsd.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.kind,
                r.n,
                r.repeat,
                r.scores.dsc,
                r.scores.asd,
                nsd,
                r.subjects.join(";")
            );
        }
        s
    }

    /// Mean DSC per `(kind, n)`.
    pub fn curve(&self, kind: ModelKind) -> Vec<(usize, f64)> {
        let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.kind == kind) {
            by_n.entry(r.n).or_default().push(r.scores.dsc);
        }
        by_n.into_iter()
            .map(|(n, v)| (n, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    }
}

/// Trains on `n` sampled training subjects (all their images, no folds, no
/// ensembling) and scores the test set on the classes every training subject
/// has.
pub fn run_datasize_study(
    data: &DataAccess,
    plan: &SplitPlan,
    kinds: &[ModelKind],
    cfg: &TrainConfig,
    study: &DataSizeConfig,
    thresholds: Option<&ThresholdTable>,
) -> Result<DataSizeResults> {
    let summaries = summarize(&data.index)?;
    let classes = common_classes(&summaries, &plan.train);
    if classes.is_empty() {
        return Err(Error::Empty("no class is present in every training subject".into()));
    }
    let n_values = study
        .n_values
        .clone()
        .unwrap_or_else(|| (1..plan.train.len()).collect());
    let mut rows = Vec::new();
    for &kind in kinds {
        let test_images = data.load_all(&data.subset(&plan.test, &[])?, kind)?;
        for &n in &n_values {
            for repeat in 0..study.repeats {
                let subjects = sample_subjects(&plan.train, n, repeat, study.seed)?;
                let outcome = train(kind, cfg, data.source(data.subset(&subjects, &[])?, kind), &[])?;
                let report = evaluate_models(&[&outcome.best], &test_images, thresholds, Some(&classes))?;
                log::info!("size study {kind} n={n} repeat={repeat}: dsc {:.4}", report.cohort_mean.dsc);
                rows.push(DataSizeRow {
                    kind,
                    n,
                    repeat,
                    subjects,
                    scores: report.cohort_mean,
                });
            }
        }
    }
    Ok(DataSizeResults { classes, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedVariability {
    pub kind: ModelKind,
    pub runs: Vec<(u64, MetricTriple)>,
    /// `(min, max)` per metric name.
    pub ranges: BTreeMap<String, (f64, f64)>,
}

/// Min/max of the test metrics over runs that differ only in their seed.
pub fn seed_variability(
    data: &DataAccess,
    plan: &SplitPlan,
    kind: ModelKind,
    cfg: &TrainConfig,
    seeds: &[u64],
    thresholds: Option<&ThresholdTable>,
) -> Result<SeedVariability> {
    if seeds.is_empty() {
        return Err(Error::Empty("no seeds given".into()));
    }
    let test_images = data.load_all(&data.subset(&plan.test, &[])?, kind)?;
    let train_index = data.subset(&plan.train, &[])?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        let outcome = train(kind, &c, data.source(train_index.clone(), kind), &[])?;
        runs.push((seed, evaluate_models(&[&outcome.best], &test_images, thresholds, None)?.cohort_mean));
    }
    Ok(SeedVariability {
        kind,
        ranges: metric_ranges(&runs),
        runs,
    })
}

fn metric_ranges(runs: &[(u64, MetricTriple)]) -> BTreeMap<String, (f64, f64)> {
    let mut out = BTreeMap::new();
    let mut put = |name: &str, vals: Vec<f64>| {
        if !vals.is_empty() {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.insert(name.to_string(), (lo, hi));
        }
    };
    put("dsc", runs.iter().map(|r| r.1.dsc).collect());
    put("asd", runs.iter().map(|r| r.1.asd).collect());
    put("nsd", runs.iter().filter_map(|r| r.1.nsd).collect());
    out
}
