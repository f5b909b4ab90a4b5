//! Cube and label-map files.
//!
//! Every file starts with a single line of JSON followed by `\n` and a raw
//! little-endian payload:
//!
//! * cubes: `{"width","height","channels","modality","wavelengths"}` then
//!   `width * height * channels` `f32` values, channel-innermost;
//! * label maps: `{"width","height","channels":1,"modality":"labels","dtype":"u8"}`
//!   then one byte per pixel;
//! * segment maps: same as label maps with `"modality":"segments","dtype":"u32"`
//!   and four bytes per pixel;
//! * score maps: `"modality":"scores","dtype":"f32"` with `channels` equal to
//!   the class count, channel-innermost.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Datacube, LabelMap, Modality};
use crate::{Error, Result};

const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub modality: Modality,
    pub wavelengths: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub modality: String,
    pub dtype: String,
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let limit = bytes.len().min(MAX_HEADER_BYTES);
    let nl = bytes[..limit]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line terminator".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

fn parse_header<T: for<'de> Deserialize<'de>>(line: &[u8]) -> Result<T> {
    serde_json::from_slice(line).map_err(|e| Error::MalformedHeader(e.to_string()))
}

fn check_payload(payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    Ok(())
}

pub fn encode_cube(cube: &Datacube) -> Result<Vec<u8>> {
    let header = CubeHeader {
        width: cube.width(),
        height: cube.height(),
        channels: cube.channels(),
        modality: cube.modality(),
        wavelengths: cube.wavelengths().to_vec(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(cube.data().len() * 4);
    for v in cube.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<Datacube> {
    let (line, payload) = split_header(bytes)?;
    let header: CubeHeader = parse_header(line)?;
    if header.wavelengths.len() != header.channels {
        return Err(Error::DimensionMismatch(format!(
            "header declares {} channels but {} wavelengths",
            header.channels,
            header.wavelengths.len()
        )));
    }
    let n = header
        .width
        .checked_mul(header.height)
        .and_then(|v| v.checked_mul(header.channels))
        .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    check_payload(payload, n * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Datacube::new(
        header.width,
        header.height,
        header.modality,
        header.wavelengths,
        data,
    )
}

pub fn write_cube(cube: &Datacube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cube(cube)?).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<Datacube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}

fn label_header(width: usize, height: usize, modality: &str, dtype: &str) -> Result<Vec<u8>> {
    map_header(width, height, 1, modality, dtype)
}

fn map_header(width: usize, height: usize, channels: usize, modality: &str, dtype: &str) -> Result<Vec<u8>> {
    let header = LabelHeader {
        width,
        height,
        channels,
        modality: modality.into(),
        dtype: dtype.into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    Ok(out)
}

fn decode_label_header<'a>(bytes: &'a [u8], dtype: &str) -> Result<(LabelHeader, &'a [u8])> {
    let (line, payload) = split_header(bytes)?;
    let header: LabelHeader = parse_header(line)?;
    if header.channels != 1 {
        return Err(Error::DimensionMismatch(format!(
            "label files have one channel, header declares {}",
            header.channels
        )));
    }
    if header.dtype != dtype {
        return Err(Error::MalformedHeader(format!(
            "expected dtype {dtype}, found {}",
            header.dtype
        )));
    }
    Ok((header, payload))
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = label_header(labels.width(), labels.height(), "labels", "u8")?;
    out.extend_from_slice(labels.labels());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let (header, payload) = decode_label_header(bytes, "u8")?;
    check_payload(payload, header.width * header.height)?;
    LabelMap::new(header.width, header.height, payload.to_vec())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes)
}

/// Writes per-pixel class scores (`width * height * classes` values).
pub fn write_scores(width: usize, height: usize, classes: usize, scores: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if scores.len() != width * height * classes {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {width}x{height}x{classes}",
            scores.len()
        )));
    }
    let mut out = map_header(width, height, classes, "scores", "f32")?;
    for v in scores {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, classes, scores)`.
pub fn read_scores(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (line, payload) = split_header(&bytes)?;
    let h: LabelHeader = parse_header(line)?;
    if h.dtype != "f32" || h.modality != "scores" {
        return Err(Error::MalformedHeader(format!("not a score map: {} / {}", h.modality, h.dtype)));
    }
    check_payload(payload, h.width * h.height * h.channels * 4)?;
    let v = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((h.width, h.height, h.channels, v))
}

/// Writes a superpixel segment-id map (one `u32` per pixel).
pub fn write_segments(
    width: usize,
    height: usize,
    segments: &[u32],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if segments.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "segment map length {} != {width}x{height}",
            segments.len()
        )));
    }
    let mut out = label_header(width, height, "segments", "u32")?;
    for s in segments {
        out.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_segments(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = decode_label_header(&bytes, "u32")?;
    check_payload(payload, header.width * header.height * 4)?;
    let ids = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header.width, header.height, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::IGNORE;
    use proptest::prelude::*;

    fn header_len(bytes: &[u8]) -> usize {
        bytes.iter().position(|&b| b == b'\n').unwrap() + 1
    }

    #[test]
    fn zero_cube_round_trip() {
        let cube = Datacube::zeros(2, 2, Modality::Rgb);
        let back = decode_cube(&encode_cube(&cube).unwrap()).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.scores");
        let v: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 / 7.0).collect();
        write_scores(2, 3, 4, &v, &p).unwrap();
        assert_eq!(read_scores(&p).unwrap(), (2, 3, 4, v));
        assert!(read_labels(&p).is_err());
    }

    #[test]
    fn full_size_hsi_payload_length() {
        let cube = Datacube::zeros(640, 480, Modality::Hsi);
        let bytes = encode_cube(&cube).unwrap();
        assert_eq!(bytes.len() - header_len(&bytes), 640 * 480 * 100 * 4);
    }

    #[test]
    fn truncated_payload_is_distinct_error() {
        let cube = Datacube::zeros(1, 1, Modality::Hsi);
        let mut bytes = encode_cube(&cube).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode_cube(&bytes),
            Err(Error::TruncatedPayload {
                expected: 400,
                found: 396
            })
        ));
    }

    #[test]
    fn header_errors_are_distinct() {
        assert!(matches!(
            decode_cube(b"not json\n"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(decode_cube(b"{}"), Err(Error::MalformedHeader(_))));
        let bad = br#"{"width":1,"height":1,"channels":3,"modality":"RGB","wavelengths":[1,2]}"#;
        let mut bytes = bad.to_vec();
        bytes.push(b'\n');
        bytes.extend_from_slice(&[0; 12]);
        assert!(matches!(
            decode_cube(&bytes),
            Err(Error::DimensionMismatch(_))
        ));
        let mut long = encode_cube(&Datacube::zeros(1, 1, Modality::Rgb)).unwrap();
        long.push(0);
        assert!(matches!(
            decode_cube(&long),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn label_and_segment_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(3, 1, vec![0, IGNORE, 7]).unwrap();
        let p = dir.path().join("l.labels");
        write_labels(&labels, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        let sp = dir.path().join("s.segments");
        write_segments(2, 1, &[0, 70000], &sp).unwrap();
        assert_eq!(read_segments(&sp).unwrap(), (2, 1, vec![0, 70000]));
        assert!(read_labels(&sp).is_err());
    }

    proptest! {
        #[test]
        fn cube_round_trip_is_bit_exact(
            w in 1usize..5, h in 1usize..5, m in 0usize..3, seed in any::<u64>()
        ) {
            let modality = Modality::ALL[m];
            let n = w * h * modality.channels();
            let mut state = seed | 1;
            let data: Vec<f32> = (0..n).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                f32::from_bits((state as u32) & 0x7f7f_ffff)
            }).collect();
            let cube = Datacube::new(w, h, modality, modality.default_wavelengths(), data).unwrap();
            let back = decode_cube(&encode_cube(&cube).unwrap()).unwrap();
            prop_assert!(back.data().iter().zip(cube.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back, cube);
        }
    }
}
