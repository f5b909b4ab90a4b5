//! Superpixels: SLICO decomposition on RGB, fuzzy label vectors, fixed-size
//! superpixel cubes for classification, and the modal-label performance limit.

mod color;
mod slico;

use serde::{Deserialize, Serialize};

use crate::hsicube::{Datacube, LabelMap, IGNORE};
use crate::imgops::resize_bilinear;
use crate::{Error, Result};

pub use color::rgb_to_lab;
pub use slico::{slico, SlicParams};

/// Side length of the resized superpixel cubes fed to the classifier.
pub const SUPERPIXEL_SIDE: usize = 32;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub pixels: usize,
    pub bbox: BoundingBox,
    pub centroid: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelDecomposition {
    width: usize,
    height: usize,
    segments: Vec<u32>,
    info: Vec<SegmentInfo>,
}

impl SuperpixelDecomposition {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of segments.
    pub fn len(&self) -> usize {
        self.info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_empty()
    }

    pub fn segments(&self) -> &[u32] {
        &self.segments
    }

    pub fn segment_at(&self, x: usize, y: usize) -> u32 {
        self.segments[y * self.width + x]
    }

    pub fn segments_info(&self) -> &[SegmentInfo] {
        &self.info
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.info.get(id as usize)
    }

    fn check_labels(&self, labels: &LabelMap) -> Result<()> {
        if labels.width() != self.width || labels.height() != self.height {
            return Err(Error::DimensionMismatch(format!(
                "decomposition is {}x{}, labels are {}x{}",
                self.width,
                self.height,
                labels.width(),
                labels.height()
            )));
        }
        Ok(())
    }
}

/// Class histogram of one segment; relative frequencies over annotated pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzyLabel {
    counts: Vec<u32>,
    annotated: u32,
}

impl FuzzyLabel {
    /// True when every pixel of the segment is IGNORE.
    pub fn is_empty(&self) -> bool {
        self.annotated == 0
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Relative class frequencies, `None` for all-IGNORE segments.
    pub fn frequencies(&self) -> Option<Vec<f64>> {
        if self.is_empty() {
            return None;
        }
        let n = self.annotated as f64;
        Some(self.counts.iter().map(|&c| c as f64 / n).collect())
    }

    /// Most frequent class, lowest id on ties.
    pub fn modal_class(&self) -> Option<u8> {
        if self.is_empty() {
            return None;
        }
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        Some(best as u8)
    }
}

pub fn fuzzy_labels(
    dec: &SuperpixelDecomposition,
    labels: &LabelMap,
    n_classes: usize,
) -> Result<Vec<FuzzyLabel>> {
    dec.check_labels(labels)?;
    let mut out = vec![
        FuzzyLabel {
            counts: vec![0; n_classes],
            annotated: 0,
        };
        dec.len()
    ];
    for (&s, &l) in dec.segments.iter().zip(labels.labels()) {
        if l == IGNORE {
            continue;
        }
        let f = &mut out[s as usize];
        let slot = f.counts.get_mut(l as usize).ok_or_else(|| {
            Error::InvalidData(format!("label {l} out of range for {n_classes} classes"))
        })?;
        *slot += 1;
        f.annotated += 1;
    }
    Ok(out)
}

/// Masked bounding-box crop of one segment, bilinearly resized to 32×32×c.
pub fn extract_superpixel_cube(
    cube: &Datacube,
    dec: &SuperpixelDecomposition,
    segment: u32,
) -> Result<Datacube> {
    if cube.width() != dec.width || cube.height() != dec.height {
        return Err(Error::DimensionMismatch(
            "cube and decomposition differ in size".into(),
        ));
    }
    let info = dec
        .segment(segment)
        .ok_or_else(|| Error::InvalidData(format!("segment {segment} does not exist")))?;
    let b = info.bbox;
    let c = cube.channels();
    let mut crop = vec![0f32; b.width() * b.height() * c];
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            if dec.segment_at(x, y) != segment {
                continue;
            }
            let dst = ((y - b.y0) * b.width() + (x - b.x0)) * c;
            crop[dst..dst + c].copy_from_slice(cube.pixel(x, y));
        }
    }
    let resized = resize_bilinear(
        &crop,
        b.width(),
        b.height(),
        c,
        SUPERPIXEL_SIDE,
        SUPERPIXEL_SIDE,
    );
    Ok(cube.with_shape(SUPERPIXEL_SIDE, SUPERPIXEL_SIDE, resized))
}

/// Assigns every segment its modal reference label. Reference IGNORE pixels
/// stay IGNORE; all-IGNORE segments become IGNORE.
pub fn superpixel_performance_limit(
    dec: &SuperpixelDecomposition,
    labels: &LabelMap,
) -> Result<LabelMap> {
    let fuzzy = fuzzy_labels(dec, labels, IGNORE as usize)?;
    let modal: Vec<u8> = fuzzy
        .iter()
        .map(|f| f.modal_class().unwrap_or(IGNORE))
        .collect();
    let out = dec
        .segments
        .iter()
        .zip(labels.labels())
        .map(|(&s, &l)| if l == IGNORE { IGNORE } else { modal[s as usize] })
        .collect();
    LabelMap::new(dec.width, dec.height, out)
}
