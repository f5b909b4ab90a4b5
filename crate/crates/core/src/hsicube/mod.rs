//! Datacubes, label maps, class tables and the dataset index.
//!
//! A [`Datacube`] stores reflectance values in height-major, width-minor,
//! channel-innermost order, i.e. the value of channel `c` at pixel `(x, y)`
//! lives at `(y * width + x) * channels + c`.

mod dataset;
mod io;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use dataset::{class_pixel_counts, DatasetIndex, ImageRecord, LoadedImage, SubjectRecord};
pub(crate) use dataset::accumulate_counts;
pub use io::{
    read_cube, read_labels, read_scores, read_segments, write_cube, write_labels, write_scores,
    write_segments, CubeHeader,
    LabelHeader,
};
pub use synth::{
    generate_synthetic_dataset, synthesize, write_dataset, SpectrumModel, SynthConfig,
    SyntheticDataset, SyntheticImage,
};

/// Label value for pixels excluded from training and evaluation ("unsure").
pub const IGNORE: u8 = 255;

/// Number of annotated classes in the original porcine data set.
pub const PAPER_CLASSES: usize = 19;

/// Number of HSI channels: 500 nm to 995 nm in 5 nm steps.
pub const HSI_CHANNELS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "HSI")]
    Hsi,
    #[serde(rename = "TPI")]
    Tpi,
    #[serde(rename = "RGB")]
    Rgb,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Hsi, Modality::Tpi, Modality::Rgb];

    pub fn channels(self) -> usize {
        match self {
            Modality::Hsi => HSI_CHANNELS,
            Modality::Tpi => 4,
            Modality::Rgb => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Hsi => "HSI",
            Modality::Tpi => "TPI",
            Modality::Rgb => "RGB",
        }
    }

    /// Nominal wavelength axis for the modality.
    ///
    /// TPI and RGB channels are derived quantities; their "wavelengths" are the
    /// centers of the spectral windows they are computed from.
    pub fn default_wavelengths(self) -> Vec<f32> {
        match self {
            Modality::Hsi => (0..HSI_CHANNELS).map(|i| 500.0 + 5.0 * i as f32).collect(),
            Modality::Tpi => vec![560.0, 760.0, 970.0, 750.0],
            Modality::Rgb => vec![660.0, 580.0, 520.0],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HSI" => Ok(Modality::Hsi),
            "TPI" => Ok(Modality::Tpi),
            "RGB" => Ok(Modality::Rgb),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datacube {
    width: usize,
    height: usize,
    channels: usize,
    wavelengths: Vec<f32>,
    data: Vec<f32>,
    modality: Modality,
}

impl Datacube {
    pub fn new(
        width: usize,
        height: usize,
        modality: Modality,
        wavelengths: Vec<f32>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let channels = wavelengths.len();
        if channels != modality.channels() {
            return Err(Error::DimensionMismatch(format!(
                "{modality} cube needs {} channels, got {channels}",
                modality.channels()
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if modality == Modality::Hsi {
            let increasing = wavelengths.windows(2).all(|w| w[0] < w[1]);
            let in_range = wavelengths.iter().all(|&l| (500.0..=1000.0).contains(&l));
            if !increasing || !in_range {
                return Err(Error::InvalidData(
                    "HSI wavelengths must be strictly increasing within [500, 1000] nm".into(),
                ));
            }
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidData(format!(
                "cube values must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            wavelengths,
            data,
            modality,
        })
    }

    pub fn zeros(width: usize, height: usize, modality: Modality) -> Self {
        let channels = modality.channels();
        Self {
            width,
            height,
            channels,
            wavelengths: modality.default_wavelengths(),
            data: vec![0.0; width * height * channels],
            modality,
        }
    }

    /// Builds a cube with the same shape and metadata as `self` but new values.
    /// Values are not re-validated; callers guarantee finiteness.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            data,
            ..self.clone_meta()
        }
    }

    pub(crate) fn with_shape(&self, width: usize, height: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height * self.channels);
        Self {
            width,
            height,
            data,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            wavelengths: self.wavelengths.clone(),
            data: Vec::new(),
            modality: self.modality,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn wavelengths(&self) -> &[f32] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Per-pixel class ids with [`IGNORE`] marking excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "label length {} != {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            labels: vec![value; width * height],
        }
    }

    /// Checks every non-sentinel value is a valid class id.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= n_classes)
        {
            Some(l) => Err(Error::InvalidData(format!(
                "label {l} out of range for {n_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Sorted list of non-ignored classes present in the map.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..255u8).filter(|&c| seen[c as usize]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<ClassEntry>,
}

const ORGAN_CLASSES: [(&str, [u8; 3]); PAPER_CLASSES] = [
    ("background", [0, 0, 0]),
    ("heart", [206, 30, 30]),
    ("lung", [255, 160, 122]),
    ("stomach", [255, 127, 14]),
    ("jejunum", [247, 182, 210]),
    ("colon", [140, 86, 75]),
    ("liver", [150, 40, 60]),
    ("gallbladder", [44, 160, 44]),
    ("pancreas", [255, 221, 120]),
    ("kidney", [148, 103, 189]),
    ("spleen", [100, 30, 110]),
    ("bladder", [255, 240, 70]),
    ("kidney_with_Gerotas_fascia", [197, 176, 213]),
    ("subcutaneous_fat", [255, 255, 204]),
    ("skin", [219, 180, 150]),
    ("muscle", [180, 60, 60]),
    ("omentum", [240, 230, 180]),
    ("peritoneum", [31, 119, 180]),
    ("major_vein", [0, 0, 180]),
];

impl ClassTable {
    pub fn new(classes: Vec<ClassEntry>) -> Result<Self> {
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::InvalidData(format!(
                    "class ids must be contiguous from 0, entry {i} has id {}",
                    c.id
                )));
            }
            if classes[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidData(format!("duplicate class name {}", c.name)));
            }
        }
        if classes.len() >= IGNORE as usize {
            return Err(Error::InvalidData("too many classes".into()));
        }
        Ok(Self { classes })
    }

    /// The 19 organ classes of the porcine open-surgery data set.
    pub fn organs() -> Self {
        Self::first(PAPER_CLASSES)
    }

    /// The first `n` organ classes (background first). `n` is clamped to 19.
    pub fn first(n: usize) -> Self {
        let classes = ORGAN_CLASSES
            .iter()
            .take(n.min(PAPER_CLASSES))
            .enumerate()
            .map(|(i, (name, color))| ClassEntry {
                id: i as u8,
                name: (*name).to_string(),
                color: *color,
            })
            .collect();
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.classes.get(id as usize).map(|c| c.name.as_str())
    }
}
