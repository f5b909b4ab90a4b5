//! Model families at five spatial granularities, their training loop and
//! full-image inference.
//!
//! Pixel models classify single spectra, superpixel models classify 32×32
//! resampled superpixel cubes against fuzzy labels, patch and image models are
//! small U-Nets producing per-pixel logits.

mod infer;
mod tensors;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::hsicube::{Modality, PAPER_CLASSES};
use crate::nnet::{LayerSpec, Network};
use crate::superpixel::SlicParams;
use crate::{Error, Result};

pub use infer::{ensemble, patch_grid, predict_image, SegmentationPrediction};
pub use train::{
    default_batch_size, resolve_epoch_size, train, EpochRecord, TrainConfig, TrainOutcome,
    ValidationSet,
};

/// U-Net downsampling steps; inputs are padded to a multiple of `2^UNET_DEPTH`.
pub const UNET_DEPTH: u32 = 3;
pub const DEFAULT_BASE_CHANNELS: usize = 8;
const DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Pixel,
    Superpixel,
    #[serde(rename = "patch_32")]
    Patch32,
    #[serde(rename = "patch_64")]
    Patch64,
    Image,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Pixel,
        Granularity::Superpixel,
        Granularity::Patch32,
        Granularity::Patch64,
        Granularity::Image,
    ];

    pub fn patch_size(self) -> Option<usize> {
        match self {
            Granularity::Patch32 => Some(32),
            Granularity::Patch64 => Some(64),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Pixel => "pixel",
            Granularity::Superpixel => "superpixel",
            Granularity::Patch32 => "patch_32",
            Granularity::Patch64 => "patch_64",
            Granularity::Image => "image",
        }
    }

    /// Per-pixel outputs (U-Net) rather than one class vector per sample.
    pub fn is_dense(self) -> bool {
        matches!(self, Granularity::Patch32 | Granularity::Patch64 | Granularity::Image)
    }

    pub fn default_loss(self) -> LossKind {
        match self {
            Granularity::Pixel => LossKind::CrossEntropy,
            Granularity::Superpixel => LossKind::KlDivergence,
            _ => LossKind::DiceCe,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown granularity {s:?}")))
    }
}

/// Granularity × modality, written `pixel#HSI`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelKind {
    pub granularity: Granularity,
    pub modality: Modality,
}

impl ModelKind {
    pub fn new(granularity: Granularity, modality: Modality) -> Self {
        Self {
            granularity,
            modality,
        }
    }

    pub fn all() -> impl Iterator<Item = ModelKind> {
        Granularity::ALL
            .into_iter()
            .flat_map(|g| Modality::ALL.into_iter().map(move |m| ModelKind::new(g, m)))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.granularity, self.modality)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (g, m) = s
            .split_once('#')
            .ok_or_else(|| Error::Config(format!("model kind {s:?} is not of the form granularity#MODALITY")))?;
        Ok(ModelKind::new(g.parse()?, m.parse()?))
    }
}

impl TryFrom<String> for ModelKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelKind> for String {
    fn from(k: ModelKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    KlDivergence,
    DiceCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    #[default]
    None,
    InverseProportional,
}

/// Inverse-proportional class weights `1 / max(count, 1)`, scaled to mean 1.
pub fn class_weights(counts: &[u64]) -> Result<Vec<f64>> {
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Empty("class weights need at least one nonzero count".into()));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Pixel network layers. HSI: three valid 1-D convolutions (64, 32, 16
/// filters, kernel 5) each followed by average pooling, then dense 100 and
/// 50. RGB/TPI: dense 200, 100, 50. Batch norm and ELU throughout, dropout
/// on the dense layers.
pub fn pixel_net_layers(modality: Modality, classes: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    let mut l = Vec::new();
    let dense = |l: &mut Vec<LayerSpec>, inputs: usize, widths: &[usize]| {
        let mut n = inputs;
        for &w in widths {
            l.extend([
                Dense {
                    inputs: n,
                    outputs: w,
                },
                BatchNorm { features: w },
                Elu,
                Dropout { p: DROPOUT },
            ]);
            n = w;
        }
        n
    };
    let last = match modality {
        Modality::Hsi => {
            l.push(Unsqueeze);
            let (mut ch, mut len) = (1, modality.channels());
            for out in [64, 32, 16] {
                l.extend([
                    Conv1d {
                        in_ch: ch,
                        out_ch: out,
                        kernel: 5,
                        padding: 0,
                    },
                    BatchNorm { features: out },
                    Elu,
                    AvgPool1d { kernel: 2 },
                ]);
                ch = out;
                len = (len - 4) / 2;
            }
            l.push(Flatten);
            dense(&mut l, ch * len, &[100, 50])
        }
        Modality::Tpi | Modality::Rgb => dense(&mut l, modality.channels(), &[200, 100, 50]),
    };
    l.push(Dense {
        inputs: last,
        outputs: classes,
    });
    l
}

pub fn build_pixel_net(modality: Modality, classes: usize, seed: u64) -> Result<Network> {
    Network::new(pixel_net_layers(modality, classes), seed)
}

fn conv_block(l: &mut Vec<LayerSpec>, in_ch: usize, out_ch: usize) {
    for (i, o) in [(in_ch, out_ch), (out_ch, out_ch)] {
        l.extend([
            LayerSpec::Conv2d {
                in_ch: i,
                out_ch: o,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::BatchNorm { features: o },
            LayerSpec::Elu,
        ]);
    }
}

/// Encoder with widths `b, 2b, 4b` and a `4b` bottleneck. With `skips`, the
/// activation before each pooling step is saved for the decoder.
fn encoder(l: &mut Vec<LayerSpec>, in_ch: usize, b: usize, skips: bool) {
    let mut ch = in_ch;
    for (slot, w) in [b, 2 * b, 4 * b].into_iter().enumerate() {
        conv_block(l, ch, w);
        if skips {
            l.push(LayerSpec::SaveSkip { slot });
        }
        l.push(LayerSpec::MaxPool2d { kernel: 2 });
        ch = w;
    }
    conv_block(l, ch, 4 * b);
}

/// Depth-3 U-Net with skip concatenations; per-pixel logits at input size.
pub fn unet_layers(in_ch: usize, base: usize, classes: usize) -> Vec<LayerSpec> {
    let b = base;
    let mut l = Vec::new();
    encoder(&mut l, in_ch, b, true);
    for (slot, (cat, out)) in [(2, (8 * b, 2 * b)), (1, (4 * b, b)), (0, (2 * b, b))] {
        l.push(LayerSpec::Upsample2d);
        l.push(LayerSpec::ConcatSkip { slot });
        conv_block(&mut l, cat, out);
    }
    l.push(LayerSpec::Conv2d {
        in_ch: b,
        out_ch: classes,
        kernel: 1,
        padding: 0,
    });
    l
}

pub fn build_unet(modality: Modality, base: usize, classes: usize, seed: u64) -> Result<Network> {
    Network::new(unet_layers(modality.channels(), base, classes), seed)
}

/// U-Net encoder, global average pooling, dropout and a linear head.
pub fn superpixel_classifier_layers(in_ch: usize, base: usize, classes: usize) -> Vec<LayerSpec> {
    let mut l = Vec::new();
    encoder(&mut l, in_ch, base, false);
    l.extend([
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dropout { p: DROPOUT },
        LayerSpec::Dense {
            inputs: 4 * base,
            outputs: classes,
        },
    ]);
    l
}

pub fn build_network(kind: ModelKind, classes: usize, base: usize, seed: u64) -> Result<Network> {
    let c = kind.modality.channels();
    let layers = match kind.granularity {
        Granularity::Pixel => pixel_net_layers(kind.modality, classes),
        Granularity::Superpixel => superpixel_classifier_layers(c, base, classes),
        _ => unet_layers(c, base, classes),
    };
    Network::new(layers, seed)
}

/// Stored alongside the weights in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub classes: usize,
    pub base_channels: usize,
    pub superpixels: SlicParams,
    /// Epoch the weights come from, or `None` for the averaged model.
    pub epoch: Option<usize>,
    pub validation_dsc: Option<f64>,
}

/// A trained network plus what inference needs to know about it.
#[derive(Debug, Clone)]
pub struct Model {
    pub meta: ModelMeta,
    pub net: Network,
}

impl Model {
    pub fn new(kind: ModelKind, classes: usize, base_channels: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            meta: ModelMeta {
                kind,
                classes,
                base_channels,
                superpixels: SlicParams::default(),
                epoch: None,
                validation_dsc: None,
            },
            net: build_network(kind, classes, base_channels, seed)?,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.meta.kind
    }

    pub fn classes(&self) -> usize {
        self.meta.classes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(&self.meta)?;
        self.net.save(path, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Network::load(path)?;
        let meta: ModelMeta = serde_json::from_value(ck.meta)?;
        Ok(Self { meta, net: ck.network })
    }
}

impl Default for ModelMeta {
    fn default() -> Self {
        Self {
            kind: ModelKind::new(Granularity::Pixel, Modality::Hsi),
            classes: PAPER_CLASSES,
            base_channels: DEFAULT_BASE_CHANNELS,
            superpixels: SlicParams::default(),
            epoch: None,
            validation_dsc: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{gradcheck, Tensor};

    #[test]
    fn pixel_net_parameter_counts() {
        let count = |m| build_pixel_net(m, PAPER_CLASSES, 0).unwrap().count_parameters();
        assert_eq!(count(Modality::Hsi), 34_275);
        assert_eq!(count(Modality::Rgb), 27_619);
        assert_eq!(count(Modality::Tpi), 27_819);
    }

    #[test]
    fn hsi_pixel_net_shapes() {
        let net = build_pixel_net(Modality::Hsi, 19, 1).unwrap();
        assert!(net.specs().contains(&LayerSpec::Dense {
            inputs: 144,
            outputs: 100
        }));
        let out = net.predict(Tensor::zeros(vec![4, 100])).unwrap();
        assert_eq!(out.shape(), &[4, 19]);
    }

    #[test]
    fn unet_keeps_resolution() {
        let net = build_unet(Modality::Rgb, 4, 19, 0).unwrap();
        let out = net.predict(Tensor::zeros(vec![1, 3, 32, 32])).unwrap();
        assert_eq!(out.shape(), &[1, 19, 32, 32]);
    }

    #[test]
    fn superpixel_classifier_shape() {
        let net = build_network(ModelKind::new(Granularity::Superpixel, Modality::Tpi), 5, 4, 0).unwrap();
        let out = net.predict(Tensor::zeros(vec![2, 4, 32, 32])).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
    }

    #[test]
    fn toy_unet_gradient_check() {
        let mut net = Network::new(unet_layers(2, 2, 3), 5).unwrap();
        let mut rng = crate::rng::rng_for(9, &[]);
        let x: Vec<f64> = (0..2 * 2 * 8 * 8).map(|_| crate::rng::normal(&mut rng)).collect();
        let x = Tensor::new(vec![2, 2, 8, 8], x).unwrap();
        let report = gradcheck::check_network(&mut net, &x, 3).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn weights() {
        assert_eq!(class_weights(&[10, 10]).unwrap(), vec![1.0, 1.0]);
        let w = class_weights(&[10, 30]).unwrap();
        assert!((w[0] - 1.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        assert!(class_weights(&[0, 5]).unwrap().iter().all(|w| w.is_finite()));
        assert!(class_weights(&[0, 0]).is_err());
    }

    #[test]
    fn kind_round_trip() {
        for k in ModelKind::all() {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
        assert_eq!(
            ModelKind::new(Granularity::Patch32, Modality::Hsi).to_string(),
            "patch_32#HSI"
        );
    }
}
