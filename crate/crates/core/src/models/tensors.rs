//! Sample lists to network tensors.

use crate::dataload::{crop, Sample};
use crate::hsicube::Datacube;
use crate::nnet::Tensor;
use crate::{Error, Result};

pub(crate) enum Target {
    /// One label per sample or per pixel (`N×H×W` order).
    Labels(Vec<u8>),
    /// Row-major `N×O` class frequencies.
    Fuzzy(Vec<f64>),
}

/// Appends the cube in channel-major (`C×H×W`) order.
pub(crate) fn cube_to_chw(cube: &Datacube, out: &mut Vec<f64>) {
    let (w, h, c) = (cube.width(), cube.height(), cube.channels());
    let data = cube.data();
    let start = out.len();
    out.resize(start + w * h * c, 0.0);
    let dst = &mut out[start..];
    for p in 0..w * h {
        for ch in 0..c {
            dst[ch * w * h + p] = data[p * c + ch] as f64;
        }
    }
}

/// Rounds `n` up to a multiple of `m`.
pub(crate) fn pad_to(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Stacks samples of one kind. Dense samples are zero-padded (IGNORE labels)
/// to a multiple of `multiple` on both axes.
pub(crate) fn assemble(samples: &[Sample], multiple: usize) -> Result<(Tensor, Target)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("cannot assemble an empty batch".into()))?;
    let n = samples.len();
    let mismatch = || Error::InvalidData("batch mixes sample kinds or sizes".into());
    match first {
        Sample::Pixel { spectrum, .. } => {
            let c = spectrum.len();
            let mut x = Vec::with_capacity(n * c);
            let mut t = Vec::with_capacity(n);
            for s in samples {
                let Sample::Pixel { spectrum, label } = s else {
                    return Err(mismatch());
                };
                if spectrum.len() != c {
                    return Err(mismatch());
                }
                x.extend(spectrum.iter().map(|&v| v as f64));
                t.push(*label);
            }
            Ok((Tensor::new(vec![n, c], x)?, Target::Labels(t)))
        }
        Sample::Superpixel { cube, fuzzy } => {
            let (w, h, c, o) = (cube.width(), cube.height(), cube.channels(), fuzzy.len());
            let mut x = Vec::with_capacity(n * c * w * h);
            let mut t = Vec::with_capacity(n * o);
            for s in samples {
                let Sample::Superpixel { cube, fuzzy } = s else {
                    return Err(mismatch());
                };
                if (cube.width(), cube.height(), cube.channels(), fuzzy.len()) != (w, h, c, o) {
                    return Err(mismatch());
                }
                cube_to_chw(cube, &mut x);
                t.extend_from_slice(fuzzy);
            }
            Ok((Tensor::new(vec![n, c, h, w], x)?, Target::Fuzzy(t)))
        }
        Sample::Dense { cube, .. } => {
            let (w, h, c) = (cube.width(), cube.height(), cube.channels());
            let (pw, ph) = (pad_to(w, multiple), pad_to(h, multiple));
            let mut x = Vec::with_capacity(n * c * pw * ph);
            let mut t = Vec::with_capacity(n * pw * ph);
            for s in samples {
                let Sample::Dense { cube, labels } = s else {
                    return Err(mismatch());
                };
                if (cube.width(), cube.height(), cube.channels()) != (w, h, c) {
                    return Err(mismatch());
                }
                if (pw, ph) == (w, h) {
                    cube_to_chw(cube, &mut x);
                    t.extend_from_slice(labels.labels());
                } else {
                    let (cube, labels) = crop(cube, Some(labels), 0, 0, pw, ph);
                    cube_to_chw(&cube, &mut x);
                    t.extend_from_slice(labels.expect("labels cropped").labels());
                }
            }
            Ok((Tensor::new(vec![n, c, ph, pw], x)?, Target::Labels(t)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsicube::{LabelMap, Modality, IGNORE};

    #[test]
    fn channel_major_layout() {
        let cube = Datacube::new(2, 1, Modality::Rgb, Modality::Rgb.default_wavelengths(), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut out = Vec::new();
        cube_to_chw(&cube, &mut out);
        assert_eq!(out, vec![1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn dense_samples_are_padded() {
        let cube = Datacube::zeros(5, 3, Modality::Tpi);
        let labels = LabelMap::filled(5, 3, 1);
        let s = vec![Sample::Dense { cube, labels }];
        let (x, t) = assemble(&s, 8).unwrap();
        assert_eq!(x.shape(), &[1, 4, 8, 8]);
        let Target::Labels(t) = t else { panic!() };
        assert_eq!(t.iter().filter(|&&l| l == 1).count(), 15);
        assert_eq!(t[7], IGNORE);
    }
}
