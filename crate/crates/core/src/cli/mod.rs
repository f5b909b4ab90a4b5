//! The `spectraseg` command line.
//!
//! Every subcommand writes data files below `--out` and prints a one-line JSON
//! summary on stdout. Failures print `{"error": <code>, "message": ...}` on
//! stderr and exit nonzero. `--config` takes the JSON form of the relevant
//! configuration type; explicit flags override it.

pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::experiments::{make_splits, run_datasize_study, DataAccess, ExperimentConfig};
use crate::hsicube::{
    generate_synthetic_dataset, read_cube, read_labels, write_labels, write_scores, write_segments, DatasetIndex,
    SynthConfig,
};
use crate::metrics::{aggregate, estimate_thresholds, evaluate_image, rater_agreement, ImageEntry, MetricReport, ThresholdAggregation, ThresholdTable};
use crate::models::{ensemble, predict_image, train, Granularity, Model, ModelKind, TrainConfig, ValidationSet};
use crate::preprocess::{preprocess, preprocess_dataset, PreprocessOptions, StepOrder};
use crate::ranking::{bootstrap_ranks, mean_then_rank, BootstrapConfig, Direction};
use crate::superpixel::{slico, SlicParams};
use crate::{Error, Modality, Result};

/// Directory for cached intermediate artifacts (preprocessed datasets).
pub const CACHE_ENV: &str = "SPECTRASEG_CACHE";

#[derive(Debug, Parser)]
#[command(name = "spectraseg", version, about = "Organ segmentation benchmark on hyperspectral datacubes")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Thread cap for data-parallel work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Epoch-size factor for desk-scale runs.
    #[arg(long, global = true)]
    pub scale: Option<f64>,
    /// Validate inputs and configuration, write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Copy a dataset with HSI preprocessing applied.
    Preprocess(PreprocessArgs),
    /// SLICO superpixels of an RGB cube as a segment-id map.
    Slic(SlicArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Predict label maps (ensembling several models).
    Predict(PredictArgs),
    /// Score predictions against the dataset references.
    Evaluate(EvaluateArgs),
    /// Inter-rater agreement and class tolerances.
    Agreement(AgreementArgs),
    /// Bootstrap ranking of algorithms on one metric.
    Rank(RankArgs),
    /// Training-set-size study.
    Datasize,
    /// Collate reports into plot-ready tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub subject_shift: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub correlated_noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Source dataset directory.
    pub input: PathBuf,
    /// Modalities to keep (default: all).
    #[arg(long = "modality", value_delimiter = ',')]
    pub modalities: Vec<Modality>,
    /// Median filter before normalizing.
    #[arg(long)]
    pub filter_first: bool,
    /// Also process RGB and TPI cubes.
    #[arg(long)]
    pub all_modalities: bool,
}

#[derive(Debug, Args)]
pub struct SlicArgs {
    /// RGB cube file.
    pub input: PathBuf,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Subjects to use (default: all).
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    /// Preprocess HSI cubes on load (cached below SPECTRASEG_CACHE when set).
    #[arg(long)]
    pub preprocess: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `granularity#MODALITY`, e.g. `pixel#HSI`.
    #[arg(long)]
    pub kind: ModelKind,
    /// Validation subjects for model selection.
    #[arg(long, value_delimiter = ',')]
    pub validate: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint; repeat to ensemble.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Also write softmax score maps.
    #[arg(long)]
    pub scores: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    /// Prediction directory mirroring the dataset's label paths.
    #[arg(long)]
    pub pred: PathBuf,
    /// Class tolerances from `agreement`; enables NSD.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    /// Dataset holding the first annotation.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    /// Directory with the second annotation under the same label paths.
    #[arg(long)]
    pub second: PathBuf,
    #[arg(long, value_enum, default_value = "mean")]
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Aggregation {
    Mean,
    Median,
    Q95,
}

#[derive(Debug, Args)]
pub struct ReportInputs {
    /// `name=path` of a metric report JSON; repeat per algorithm.
    #[arg(long = "report", required = true)]
    pub reports: Vec<String>,
    #[arg(long)]
    pub n_boot: Option<usize>,
    #[arg(long)]
    pub sample_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub inputs: ReportInputs,
    #[arg(long, default_value = "dsc")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub inputs: ReportInputs,
    /// Size-study CSV to summarize.
    #[arg(long)]
    pub datasize: Option<PathBuf>,
    /// Also write gnuplot scripts.
    #[arg(long)]
    pub gnuplot: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return 2;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.code(), "message": e.to_string()}));
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<Value> {
    let threads = cli.global.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<Value> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Preprocess(a) => preprocess_cmd(g, a),
        Command::Slic(a) => slic_cmd(g, a),
        Command::Train(a) => train_cmd(g, a),
        Command::Predict(a) => predict_cmd(g, a),
        Command::Evaluate(a) => evaluate_cmd(g, a),
        Command::Agreement(a) => agreement_cmd(g, a),
        Command::Rank(a) => rank_cmd(g, a),
        Command::Datasize => datasize_cmd(g),
        Command::Report(a) => report_cmd(g, a),
    }
}

fn load_config<T: DeserializeOwned + Default>(g: &Global) -> Result<T> {
    match &g.config {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn out_dir(g: &Global) -> Result<&Path> {
    let out = g.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))?;
    if !g.dry_run {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(v)?)
}

fn dry(what: &str, detail: Value) -> Value {
    json!({"dry_run": true, "command": what, "plan": detail})
}

fn synth(g: &Global, a: &SynthArgs) -> Result<Value> {
    let mut cfg: SynthConfig = load_config(g)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    macro_rules! set {
        ($($f:ident <- $v:expr),*) => { $(if let Some(v) = $v { cfg.$f = v; })* };
    }
    set!(subjects <- a.subjects, images_per_subject <- a.images, classes <- a.classes, width <- a.width,
         height <- a.height, subject_shift <- a.subject_shift, noise_std <- a.noise,
         correlated_noise_std <- a.correlated_noise);
    cfg.validate()?;
    let out = out_dir(g)?;
    if g.dry_run {
        return Ok(dry("synth", serde_json::to_value(&cfg)?));
    }
    let index = generate_synthetic_dataset(&cfg, out)?;
    Ok(json!({"command": "synth", "out": out, "subjects": index.subjects.len(), "images": index.image_count()}))
}

fn preprocess_options(a: &PreprocessArgs) -> PreprocessOptions {
    PreprocessOptions {
        order: if a.filter_first { StepOrder::FilterThenNormalize } else { StepOrder::NormalizeThenFilter },
        all_modalities: a.all_modalities,
    }
}

fn preprocess_cmd(g: &Global, a: &PreprocessArgs) -> Result<Value> {
    let index = DatasetIndex::load(&a.input)?;
    let modalities = if a.modalities.is_empty() { vec![Modality::Hsi, Modality::Tpi, Modality::Rgb] } else { a.modalities.clone() };
    let opts = preprocess_options(a);
    let out = out_dir(g)?;
    if g.dry_run {
        return Ok(dry("preprocess", json!({"images": index.image_count(), "modalities": modalities, "options": opts})));
    }
    let done = preprocess_dataset(&index, out, &modalities, &opts)?;
    Ok(json!({"command": "preprocess", "out": out, "images": done.image_count()}))
}

fn slic_cmd(g: &Global, a: &SlicArgs) -> Result<Value> {
    let mut params: SlicParams = load_config(g)?;
    if let Some(n) = a.segments {
        params.n_segments = n;
    }
    if let Some(s) = a.sigma {
        params.sigma = s;
    }
    let rgb = read_cube(&a.input)?;
    let out = g.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))?;
    if g.dry_run {
        return Ok(dry("slic", serde_json::to_value(params)?));
    }
    let dec = slico(&rgb, &params)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_segments(dec.width(), dec.height(), dec.segments(), out)?;
    Ok(json!({"command": "slic", "out": out, "segments": dec.len()}))
}

fn load_subjects(dir: &Path, subjects: &[String]) -> Result<DatasetIndex> {
    let index = DatasetIndex::load(dir)?;
    if subjects.is_empty() {
        Ok(index)
    } else {
        index.restrict(subjects)
    }
}

/// Dataset access for `data`, materializing preprocessed copies in the cache
/// when one is configured.
fn data_access(data: &DataArgs, modality: &[Modality], dry_run: bool) -> Result<DataAccess> {
    let index = load_subjects(&data.dataset, &data.subjects)?;
    if !data.preprocess {
        return Ok(DataAccess::new(index, None));
    }
    let opts = PreprocessOptions::default();
    match std::env::var_os(CACHE_ENV) {
        Some(cache) if !dry_run => {
            let dir = PathBuf::from(cache).join(cache_key(&index, modality, &opts)?);
            let cached = match DatasetIndex::load(&dir) {
                Ok(i) => i,
                Err(_) => preprocess_dataset(&index, &dir, modality, &opts)?,
            };
            Ok(DataAccess::new(cached, None))
        }
        _ => Ok(DataAccess::new(index, Some(opts))),
    }
}

fn cache_key(index: &DatasetIndex, modality: &[Modality], opts: &PreprocessOptions) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::canonicalize(&index.root).unwrap_or_else(|_| index.root.clone()).to_string_lossy().as_bytes());
    h.update(serde_json::to_vec(index)?);
    h.update(serde_json::to_vec(&(modality, opts))?);
    Ok(format!("pre-{}", &format!("{:x}", h.finalize())[..16]))
}

fn modalities_for(kinds: &[ModelKind]) -> Vec<Modality> {
    let mut m: Vec<Modality> = kinds.iter().map(|k| k.modality).collect();
    if kinds.iter().any(|k| k.granularity == Granularity::Superpixel) {
        m.push(Modality::Rgb);
    }
    m.sort();
    m.dedup();
    m
}

fn class_count(index: &DatasetIndex) -> Result<usize> {
    Ok(index.load_classes()?.len())
}

fn train_cmd(g: &Global, a: &TrainArgs) -> Result<Value> {
    let mut cfg: TrainConfig = load_config(g)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(s) = g.scale {
        cfg.scale = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let modalities = modalities_for(&[a.kind]);
    let data = data_access(&a.data, &modalities, g.dry_run)?;
    cfg.classes = class_count(&data.index)?;
    cfg.validate()?;
    let train_subjects: Vec<String> = data.index.subjects.iter().map(|s| s.id.clone()).filter(|s| !a.validate.contains(s)).collect();
    let train_index = data.subset(&train_subjects, &[])?;
    let out = out_dir(g)?;
    if g.dry_run {
        return Ok(dry("train", json!({"kind": a.kind, "train": train_subjects, "validate": a.validate, "config": cfg})));
    }
    let validation = if a.validate.is_empty() {
        Vec::new()
    } else {
        vec![ValidationSet {
            name: "validation".into(),
            images: data.load_all(&data.subset(&a.validate, &[])?, a.kind)?,
        }]
    };
    let outcome = train(a.kind, &cfg, data.source(train_index, a.kind), &validation)?;
    outcome.save(out)?;
    write_json(&out.join("loader_stats.json"), &outcome.loader_stats)?;
    Ok(json!({
        "command": "train",
        "out": out,
        "kind": a.kind,
        "best_epoch": outcome.best_epoch(),
        "final_loss": outcome.history.last().map(|h| h.train_loss),
    }))
}

fn predict_cmd(g: &Global, a: &PredictArgs) -> Result<Value> {
    let models = a.models.iter().map(Model::load).collect::<Result<Vec<_>>>()?;
    let kinds: Vec<ModelKind> = models.iter().map(|m| m.kind()).collect();
    let data = data_access(&a.data, &modalities_for(&kinds), g.dry_run)?;
    let out = out_dir(g)?;
    if g.dry_run {
        return Ok(dry("predict", json!({"models": kinds, "images": data.index.image_count()})));
    }
    let mut written = 0;
    for s in &data.index.subjects {
        for rec in &s.images {
            let mut preds = Vec::new();
            for (m, k) in models.iter().zip(&kinds) {
                let mut img = data.index.load_image(s, rec, k.modality, k.granularity == Granularity::Superpixel)?;
                if let Some(o) = &data.preprocess {
                    img.cube = preprocess(&img.cube, o).cube;
                }
                preds.push(predict_image(m, &img.cube, img.rgb.as_ref())?);
            }
            let pred = if preds.len() == 1 { preds.pop().expect("one prediction") } else { ensemble(&preds)? };
            let path = out.join(&rec.labels);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_labels(&pred.labels, &path)?;
            if a.scores {
                if let Some(sc) = &pred.scores {
                    let mut p = path.into_os_string();
                    p.push(".scores");
                    write_scores(pred.width(), pred.height(), pred.classes, sc, PathBuf::from(p))?;
                }
            }
            written += 1;
        }
    }
    Ok(json!({"command": "predict", "out": out, "images": written}))
}

fn read_thresholds(p: &Option<PathBuf>) -> Result<Option<ThresholdTable>> {
    p.as_ref()
        .map(|p| -> Result<ThresholdTable> {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .transpose()
}

/// Scores every prediction found under `pred` (same relative paths as the
/// dataset's label files).
pub fn evaluate_directory(index: &DatasetIndex, pred: &Path, thresholds: Option<&ThresholdTable>) -> Result<MetricReport> {
    let mut entries = Vec::new();
    for s in &index.subjects {
        for rec in &s.images {
            let reference = read_labels(index.labels_path(rec))?;
            let p = read_labels(pred.join(&rec.labels))?;
            entries.push(ImageEntry {
                subject: s.id.clone(),
                image: rec.id.clone(),
                classes: evaluate_image(&p, &reference, thresholds)?,
            });
        }
    }
    aggregate(entries)
}

fn evaluate_cmd(g: &Global, a: &EvaluateArgs) -> Result<Value> {
    let index = load_subjects(&a.dataset, &a.subjects)?;
    let thresholds = read_thresholds(&a.thresholds)?;
    let out = out_dir(g)?;
    if g.dry_run {
        return Ok(dry("evaluate", json!({"images": index.image_count(), "nsd": thresholds.is_some()})));
    }
    let report = evaluate_directory(&index, &a.pred, thresholds.as_ref())?;
    write_json(&out.join("report.json"), &report)?;
    write(&out.join("report.csv"), &report.to_csv())?;
    Ok(json!({"command": "evaluate", "out": out, "cohort_mean": report.cohort_mean, "excluded": report.excluded.len()}))
}

fn agreement_cmd(g: &Global, a: &AgreementArgs) -> Result<Value> {
    let index = load_subjects(&a.dataset, &a.subjects)?;
    let out = out_dir(g)?;
    let mut pairs = Vec::new();
    let mut ids = Vec::new();
    for s in &index.subjects {
        for rec in &s.images {
            pairs.push((read_labels(index.labels_path(rec))?, read_labels(a.second.join(&rec.labels))?));
            ids.push((s.id.clone(), rec.id.clone()));
        }
    }
    if g.dry_run {
        return Ok(dry("agreement", json!({"pairs": pairs.len()})));
    }
    let aggregation = match a.aggregation {
        Aggregation::Mean => ThresholdAggregation::Mean,
        Aggregation::Median => ThresholdAggregation::Median,
        Aggregation::Q95 => ThresholdAggregation::Q95,
    };
    let table = estimate_thresholds(&pairs, aggregation)?;
    let entries = pairs
        .iter()
        .zip(ids)
        .map(|((x, y), (subject, image))| {
            let r = rater_agreement(x, y, Some(&table))?;
            Ok(ImageEntry {
                subject,
                image,
                classes: Some(r.as_scores()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(entries)?;
    write_json(&out.join("thresholds.json"), &table)?;
    write_json(&out.join("agreement.json"), &report)?;
    write(&out.join("agreement.csv"), &report.to_csv())?;
    Ok(json!({"command": "agreement", "out": out, "tau": table.tau, "cohort_mean": report.cohort_mean}))
}

fn read_reports(inputs: &ReportInputs) -> Result<Vec<(String, MetricReport)>> {
    inputs
        .reports
        .iter()
        .map(|spec| {
            let (name, path) = spec
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--report expects name=path, got {spec}")))?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok((name.to_string(), serde_json::from_str(&text)?))
        })
        .collect()
}

fn bootstrap_config(g: &Global, inputs: &ReportInputs) -> Result<BootstrapConfig> {
    let mut cfg: BootstrapConfig = load_config(g)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(n) = inputs.n_boot {
        cfg.n_boot = n;
    }
    if let Some(n) = inputs.sample_size {
        cfg.sample_size = n;
    }
    Ok(cfg)
}

fn rank_cmd(g: &Global, a: &RankArgs) -> Result<Value> {
    let direction = Direction::for_metric(&a.metric).ok_or_else(|| Error::Config(format!("unknown metric {}", a.metric)))?;
    let reports = read_reports(&a.inputs)?;
    let cfg = bootstrap_config(g, &a.inputs)?;
    let scores = report::algorithm_scores(&reports, &a.metric)?
        .ok_or_else(|| Error::Metric(format!("some report has no {} values", a.metric)))?;
    let out = out_dir(g)?;
    if g.dry_run {
        return Ok(dry("rank", json!({"algorithms": scores.len(), "bootstrap": cfg})));
    }
    let table = bootstrap_ranks(&scores, &cfg, direction)?;
    let mtr = mean_then_rank(&a.metric, &scores, direction)?;
    write_json(&out.join(format!("ranking_{}.json", a.metric)), &table)?;
    write(&out.join(format!("ranking_{}.csv", a.metric)), &table.blob_csv())?;
    let medians: Vec<(String, f64)> = table.algorithms.iter().map(|r| (r.algorithm.clone(), r.median)).collect();
    Ok(json!({"command": "rank", "out": out, "median_ranks": medians, "mean_then_rank": mtr.entries}))
}

fn datasize_cmd(g: &Global) -> Result<Value> {
    let path = g.config.as_ref().ok_or_else(|| Error::Config("datasize needs --config".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = g.seed {
        cfg.split.seed = s;
        cfg.train.seed = s;
        cfg.datasize.seed = s;
    }
    if let Some(s) = g.scale {
        cfg.train.scale = s;
    }
    let index = DatasetIndex::load(&cfg.dataset)?;
    cfg.train.classes = class_count(&index)?;
    let plan = make_splits(&index, &cfg.split)?;
    let out = out_dir(g)?;
    if g.dry_run {
        return Ok(dry("datasize", json!({"train": plan.train, "test": plan.test, "kinds": cfg.kinds})));
    }
    let data = DataAccess::new(index, cfg.preprocess);
    let results = run_datasize_study(&data, &plan, &cfg.kinds, &cfg.train, &cfg.datasize, cfg.thresholds.as_ref())?;
    write_json(&out.join("splits.json"), &plan)?;
    write_json(&out.join("datasize.json"), &results)?;
    write(&out.join("datasize.csv"), &results.to_csv())?;
    let curves: Vec<Value> = cfg.kinds.iter().map(|&k| json!({"kind": k, "curve": results.curve(k)})).collect();
    Ok(json!({"command": "datasize", "out": out, "classes": results.classes, "curves": curves}))
}

fn report_cmd(g: &Global, a: &ReportArgs) -> Result<Value> {
    let reports = read_reports(&a.inputs)?;
    let cfg = bootstrap_config(g, &a.inputs)?;
    let out = out_dir(g)?;
    if g.dry_run {
        return Ok(dry("report", json!({"algorithms": reports.len(), "bootstrap": cfg})));
    }
    let mut files = vec!["box.csv".to_string()];
    write(&out.join("box.csv"), &report::box_table(&reports))?;
    for (metric, table) in report::bootstrap_tables(&reports, &cfg)? {
        let name = format!("ranking_{metric}.csv");
        write(&out.join(&name), &table.blob_csv())?;
        files.push(name);
        if a.gnuplot {
            write(&out.join(format!("ranking_{metric}.gp")), &report::gnuplot_blob(&metric))?;
        }
    }
    write(&out.join("ranking_metrics.csv"), &report::ranking_lines(&reports)?)?;
    files.push("ranking_metrics.csv".into());
    write(&out.join("examples.csv"), &report::image_examples(&reports, &report::EXAMPLE_QUANTILES)?)?;
    files.push("examples.csv".into());
    if let Some(p) = &a.datasize {
        let csv = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        write(&out.join("datasize_summary.csv"), &report::datasize_summary(&csv)?)?;
        files.push("datasize_summary.csv".into());
    }
    if a.gnuplot {
        for (i, m) in report::METRICS.iter().enumerate() {
            write(&out.join(format!("box_{m}.gp")), &report::gnuplot_box(m, i + 3))?;
        }
        write(&out.join("ranking_metrics.gp"), &report::gnuplot_lines())?;
    }
    Ok(json!({"command": "report", "out": out, "files": files}))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("spectraseg").chain(args.iter().copied()))
    }

    #[test]
    fn flags_parse() {
        let c = parse(&["train", "--dataset", "d", "--kind", "patch_32#TPI", "--subjects", "a,b", "--scale", "0.1", "--out", "o"]).unwrap();
        match c.command {
            Command::Train(t) => {
                assert_eq!(t.kind.to_string(), "patch_32#TPI");
                assert_eq!(t.data.subjects, ["a", "b"]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.global.scale, Some(0.1));
        assert!(parse(&["train", "--bogus"]).is_err());
        assert!(parse(&["preprocess", "in", "--modality", "hsi,rgb"]).is_ok());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(["spectraseg", "nosuch"]), 2);
        assert_eq!(main_with_args(["spectraseg", "evaluate", "--dataset", "/nonexistent", "--pred", "p", "--out", "/tmp/x"]), 1);
    }

    #[test]
    fn dry_run_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let c = parse(&["synth", "--seed", "3", "--subjects", "2", "--dry-run", "--out", out.to_str().unwrap()]).unwrap();
        let v = run(&c).unwrap();
        assert_eq!(v["plan"]["seed"], 3);
        assert_eq!(v["plan"]["subjects"], 2);
        assert!(!out.exists());
    }
}
