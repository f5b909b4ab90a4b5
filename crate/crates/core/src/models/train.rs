//! Training loop: loader-fed Adam steps, per-epoch validation, best-epoch
//! selection and stochastic weight averaging over the final quarter.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensors::{assemble, Target};
use super::{class_weights, predict_image, ClassWeightMode, Granularity, LossKind, Model, ModelKind, UNET_DEPTH};
use crate::dataload::{stream_batches, ImageSource, LoaderConfig, LoaderStats, PartsPolicy};
use crate::hsicube::{LoadedImage, PAPER_CLASSES};
use crate::metrics::hierarchical_mean_dsc;
use crate::nnet::{cross_entropy, dice_ce, kl_divergence, AdamConfig, AdamState, LossOutput, Mode, SwaState, Tensor};
use crate::rng::{derive_seed, rng_for};
use crate::superpixel::SlicParams;
use crate::{Error, Result};

/// Images per epoch for the image model at scale 1.
pub const IMAGES_PER_EPOCH: f64 = 500.0;

const INIT_STREAM: u64 = 0x494e_4954;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` picks [`default_batch_size`].
    pub batch_size: Option<usize>,
    /// Samples per epoch; `None` derives it with [`resolve_epoch_size`].
    pub epoch_size: Option<usize>,
    /// Shrinks derived epoch sizes for desk-scale runs.
    pub scale: f64,
    pub seed: u64,
    pub augment: bool,
    /// `None` uses the granularity's default loss.
    pub loss: Option<LossKind>,
    pub class_weights: ClassWeightMode,
    pub classes: usize,
    pub base_channels: usize,
    pub workers: usize,
    pub buffer_capacity: usize,
    pub pixels_per_image: Option<usize>,
    pub superpixels: SlicParams,
    pub adam: AdamConfig,
    /// Fraction of epochs after which weights enter the running average.
    pub swa_start: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: None,
            epoch_size: None,
            scale: 1.0,
            seed: 0,
            augment: true,
            loss: None,
            class_weights: ClassWeightMode::None,
            classes: PAPER_CLASSES,
            base_channels: super::DEFAULT_BASE_CHANNELS,
            workers: 3,
            buffer_capacity: 4,
            pixels_per_image: None,
            superpixels: SlicParams::default(),
            adam: AdamConfig::default(),
            swa_start: 0.75,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.swa_start) {
            return Err(Error::Config(format!("swa_start {} outside [0, 1]", self.swa_start)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        if self.classes == 0 || self.classes > 255 {
            return Err(Error::Config(format!("{} classes out of range", self.classes)));
        }
        Ok(())
    }

    pub fn batch_size_for(&self, g: Granularity) -> usize {
        self.batch_size.unwrap_or_else(|| default_batch_size(g, self.workers))
    }

    /// Loader settings for `kind` on images of `image_pixels` pixels.
    pub fn loader(&self, g: Granularity, image_pixels: usize) -> LoaderConfig {
        let batch_size = self.batch_size_for(g);
        LoaderConfig {
            workers: self.workers,
            buffer_capacity: self.buffer_capacity,
            batch_size,
            epoch_size: self.epoch_size.unwrap_or_else(|| {
                resolve_epoch_size(g, image_pixels, self.scale, batch_size, self.superpixels.n_segments)
            }),
            seed: self.seed,
            augment: self.augment,
            pixels_per_image: self.pixels_per_image,
        }
    }

    /// First epoch (0-based) whose weights enter the running average.
    pub fn swa_first_epoch(&self) -> usize {
        ((self.epochs as f64 * self.swa_start).floor() as usize).min(self.epochs - 1)
    }
}

/// Desk-scale batch sizes, rounded up to a multiple of `workers`.
pub fn default_batch_size(g: Granularity, workers: usize) -> usize {
    let base: usize = match g {
        Granularity::Pixel => 240,
        Granularity::Superpixel => 30,
        Granularity::Patch32 => 24,
        Granularity::Patch64 => 12,
        Granularity::Image => 6,
    };
    let w = workers.max(1);
    base.div_ceil(w) * w
}

/// Epoch size whose total pixel count matches `500·scale` whole images,
/// floored to a multiple of the batch size (at least one batch).
pub fn resolve_epoch_size(g: Granularity, image_pixels: usize, scale: f64, batch: usize, n_segments: usize) -> usize {
    let images = (IMAGES_PER_EPOCH * scale).round().max(1.0);
    let pixels = images * image_pixels as f64;
    let per_sample = match g {
        Granularity::Pixel => 1.0,
        Granularity::Superpixel => (image_pixels as f64 / n_segments.max(1) as f64).max(1.0),
        Granularity::Patch32 | Granularity::Patch64 => {
            let p = g.patch_size().expect("patch") as f64;
            p * p
        }
        Granularity::Image => image_pixels as f64,
    };
    let n = (pixels / per_sample).floor() as usize;
    (n / batch).max(1) * batch
}

/// Images scored after every epoch under a name such as `V_unknown`.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub name: String,
    pub images: Vec<LoadedImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    /// Hierarchical mean DSC per validation set.
    pub dsc: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the best score on the first validation set
    /// (the last epoch when there is none).
    pub best: Model,
    pub swa: Model,
    pub history: Vec<EpochRecord>,
    pub loader_stats: LoaderStats,
}

impl TrainOutcome {
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.meta.epoch
    }

    /// Writes `best.ckpt`, `swa.ckpt` and `history.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
        self.best.save(dir.join("best.ckpt"))?;
        self.swa.save(dir.join("swa.ckpt"))?;
        let p = dir.join("history.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.history)?).map_err(|e| Error::io(p.clone(), e))
    }
}

fn compute_loss(loss: LossKind, logits: &Tensor, target: &Target, weights: Option<&[f64]>) -> Result<LossOutput> {
    match (loss, target) {
        (LossKind::CrossEntropy, Target::Labels(t)) => cross_entropy(logits, t, weights),
        (LossKind::DiceCe, Target::Labels(t)) => dice_ce(logits, t, weights),
        (LossKind::KlDivergence, Target::Fuzzy(f)) => kl_divergence(logits, f),
        (l, _) => Err(Error::Config(format!("loss {l:?} does not fit this model's targets"))),
    }
}

fn score(model: &Model, sets: &[ValidationSet]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for set in sets {
        let preds = set
            .images
            .iter()
            .map(|img| predict_image(model, &img.cube, img.rgb.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<(&str, &crate::LabelMap, &crate::LabelMap)> = set
            .images
            .iter()
            .zip(&preds)
            .map(|(img, p)| (img.subject.as_str(), &p.labels, &img.labels))
            .collect();
        out.insert(set.name.clone(), hierarchical_mean_dsc(&items)?);
    }
    Ok(out)
}

fn source_class_counts(source: &dyn ImageSource, classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes];
    for i in 0..source.len() {
        crate::hsicube::accumulate_counts(&source.load(i)?.labels, &mut counts)?;
    }
    Ok(counts)
}

/// Trains one model. Validation sets are scored after every epoch; the
/// first one drives best-epoch selection.
pub fn train(
    kind: ModelKind,
    cfg: &TrainConfig,
    source: Arc<dyn ImageSource>,
    validation: &[ValidationSet],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("training loader has no images".into()));
    }
    let g = kind.granularity;
    let probe = source.load(0)?;
    let loader = cfg.loader(g, probe.cube.width() * probe.cube.height());
    drop(probe);
    loader.validate()?;
    let loss_kind = cfg.loss.unwrap_or(g.default_loss());
    let weights = match cfg.class_weights {
        ClassWeightMode::None => None,
        ClassWeightMode::InverseProportional => Some(class_weights(&source_class_counts(source.as_ref(), cfg.classes)?)?),
    };
    let policy = PartsPolicy {
        classes: cfg.classes,
        pixels_per_image: cfg.pixels_per_image,
        superpixels: cfg.superpixels,
    };
    let mut model = Model::new(kind, cfg.classes, cfg.base_channels, derive_seed(cfg.seed, &[INIT_STREAM]))?;
    model.meta.superpixels = cfg.superpixels;
    let mut adam = AdamState::new(cfg.adam);
    let mut swa = SwaState::new();
    let mut best: Option<Model> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut loader_stats = LoaderStats::default();
    let multiple = 1 << UNET_DEPTH;
    log::info!(
        "training {kind}: {} epochs × {} samples, batch {}",
        cfg.epochs,
        loader.epoch_size,
        loader.batch_size
    );
    for epoch in 0..cfg.epochs {
        let lr = adam.lr();
        let mut stream = stream_batches(&loader, Arc::clone(&source), g, policy, epoch as u64)?;
        let (mut total, mut steps) = (0.0, 0usize);
        for (step, batch) in stream.by_ref().enumerate() {
            let (x, target) = assemble(&batch?.into_samples(), multiple)?;
            let mut rng = rng_for(cfg.seed, &[DROPOUT_STREAM, epoch as u64, step as u64]);
            let logits = model.net.forward(x, Mode::Train, Some(&mut rng))?;
            let out = compute_loss(loss_kind, &logits, &target, weights.as_deref())?;
            // Clamped log-probabilities can hide non-finite logits.
            let value = if logits.data().iter().all(|v| v.is_finite()) { out.value } else { f64::NAN };
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value });
            }
            model.net.zero_grad();
            model.net.backward(out.grad)?;
            adam.step(&mut model.net)?;
            total += out.value;
            steps += 1;
        }
        loader_stats = stream.stats();
        adam.epoch_decay();
        if epoch >= cfg.swa_first_epoch() {
            swa.update(&model.net.flat_params())?;
        }
        let dsc = score(&model, validation)?;
        let train_loss = total / steps.max(1) as f64;
        log::info!("{kind} epoch {epoch}: loss {train_loss:.5} dsc {dsc:?}");
        let current = validation.first().map(|s| dsc[&s.name]);
        let improved = match (&best, current) {
            (None, _) => true,
            (Some(b), Some(c)) => c > b.meta.validation_dsc.unwrap_or(f64::NEG_INFINITY),
            (Some(_), None) => true,
        };
        if improved {
            let mut m = model.clone();
            m.meta.epoch = Some(epoch);
            m.meta.validation_dsc = current;
            best = Some(m);
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            lr,
            dsc,
        });
    }
    let mut swa_model = model.clone();
    swa_model.meta.epoch = None;
    let recal = stream_batches(&loader, Arc::clone(&source), g, policy, cfg.epochs as u64)?
        .map(|b| assemble(&b?.into_samples(), multiple).map(|(x, _)| x))
        .collect::<Result<Vec<_>>>()?;
    swa.finalize(&mut swa_model.net, recal)?;
    swa_model.meta.validation_dsc = validation
        .first()
        .map(|s| score(&swa_model, std::slice::from_ref(s)).map(|d| d[&s.name]))
        .transpose()?;
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        swa: swa_model,
        history,
        loader_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataload::MemorySource;
    use crate::hsicube::{Datacube, LabelMap, Modality};

    /// Two-class TPI images whose classes differ strongly in channel 0.
    fn separable(n: usize) -> Vec<LoadedImage> {
        (0..n)
            .map(|k| {
                let (w, h) = (8, 8);
                let labels: Vec<u8> = (0..w * h).map(|p| ((p % w) >= w / 2) as u8).collect();
                let data = labels
                    .iter()
                    .flat_map(|&l| {
                        let v = if l == 1 { 0.9 } else { 0.1 };
                        [v, 0.2, 1.0 - v, 0.3]
                    })
                    .collect();
                LoadedImage {
                    subject: format!("S{}", k % 2),
                    image: format!("i{k}"),
                    cube: Datacube::new(w, h, Modality::Tpi, Modality::Tpi.default_wavelengths(), data).unwrap(),
                    rgb: None,
                    labels: LabelMap::new(w, h, labels).unwrap(),
                }
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: Some(32),
            epoch_size: Some(256),
            augment: false,
            classes: 2,
            workers: 2,
            adam: AdamConfig {
                lr0: 0.01,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn epoch_size_matching() {
        assert_eq!(resolve_epoch_size(Granularity::Image, 307_200, 1.0, 6, 1000), 498);
        assert_eq!(resolve_epoch_size(Granularity::Patch32, 307_200, 1.0, 24, 1000), 150_000);
        assert_eq!(resolve_epoch_size(Granularity::Pixel, 100, 0.01, 30, 1000), 480);
        assert_eq!(default_batch_size(Granularity::Pixel, 7), 245);
    }

    #[test]
    fn pixel_model_learns_separable_data() {
        let images = separable(4);
        let val = vec![ValidationSet {
            name: "val".into(),
            images: images.clone(),
        }];
        let source = Arc::new(MemorySource::new(images));
        let out = train(ModelKind::new(Granularity::Pixel, Modality::Tpi), &cfg(), source, &val).unwrap();
        assert_eq!(out.history.len(), 4);
        let last = out.history.last().unwrap();
        assert!(last.train_loss < out.history[0].train_loss);
        assert!(out.best.meta.validation_dsc.unwrap() > 0.99);
        assert!(out.swa.meta.validation_dsc.unwrap() > 0.99);
        assert_eq!(out.loader_stats.samples, 256);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let source = Arc::new(MemorySource::new(separable(3)));
            let mut c = cfg();
            c.epochs = 2;
            c.augment = true;
            train(ModelKind::new(Granularity::Pixel, Modality::Tpi), &c, source, &[])
                .unwrap()
                .history
                .iter()
                .map(|r| r.train_loss)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn uniform_class_weights_change_nothing() {
        let run = |mode| {
            let source = Arc::new(MemorySource::new(separable(2)));
            let mut c = cfg();
            c.epochs = 1;
            c.class_weights = mode;
            train(ModelKind::new(Granularity::Pixel, Modality::Tpi), &c, source, &[])
                .unwrap()
                .best
                .net
                .flat_params()
        };
        assert_eq!(run(ClassWeightMode::None), run(ClassWeightMode::InverseProportional));
    }

    #[test]
    fn diverging_training_aborts() {
        let mut images = separable(2);
        for img in &mut images {
            img.cube = img.cube.with_data(vec![f32::NAN; img.cube.data().len()]);
        }
        let source = Arc::new(MemorySource::new(images));
        let err = train(ModelKind::new(Granularity::Pixel, Modality::Tpi), &cfg(), source, &[]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, step: 0, .. }));
    }

    #[test]
    fn image_model_trains_and_saves() {
        let source = Arc::new(MemorySource::new(separable(2)));
        let c = TrainConfig {
            epochs: 2,
            batch_size: Some(2),
            epoch_size: Some(4),
            base_channels: 2,
            ..cfg()
        };
        let out = train(ModelKind::new(Granularity::Image, Modality::Tpi), &c, source, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.save(dir.path()).unwrap();
        let back = Model::load(dir.path().join("swa.ckpt")).unwrap();
        assert_eq!(back.meta, out.swa.meta);
        assert_eq!(back.net.flat_params(), out.swa.net.flat_params());
    }
}
