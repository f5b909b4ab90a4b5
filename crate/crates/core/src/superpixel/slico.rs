//! SLIC with per-cluster adaptive compactness (SLICO).
//!
//! Pipeline: Gaussian smoothing → CIELAB → grid-seeded k-means in
//! (L, a, b, x, y) → connectivity enforcement.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::color::rgb_to_lab;
use super::{BoundingBox, SegmentInfo, SuperpixelDecomposition};
use crate::hsicube::{Datacube, Modality};
use crate::imgops::gaussian_blur;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub n_segments: usize,
    pub iterations: usize,
    /// Std of the Gaussian pre-smoothing, per channel.
    pub sigma: f64,
    /// Cluster in CIELAB (true) or in the scaled RGB space.
    pub lab: bool,
    /// Fragments smaller than `factor * area / n_seeds` are merged away.
    pub min_size_factor: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_segments: 1000,
            iterations: 10,
            sigma: 3.0,
            lab: true,
            min_size_factor: 0.25,
        }
    }
}

fn grid(n: usize, w: usize, h: usize) -> (usize, usize) {
    let nx = ((n as f64 * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let ny = ((n as f64 / nx as f64).round() as usize).clamp(1, h);
    (nx, ny)
}

/// Runs SLICO on an RGB cube.
pub fn slico(rgb: &Datacube, params: &SlicParams) -> Result<SuperpixelDecomposition> {
    if rgb.modality() != Modality::Rgb {
        return Err(Error::InvalidData(format!(
            "superpixels are computed on RGB data, got {}",
            rgb.modality()
        )));
    }
    if params.n_segments == 0 {
        return Err(Error::Config("n_segments must be positive".into()));
    }
    let (w, h) = (rgb.width(), rgb.height());
    let n_pixels = w * h;
    let mut requested = params.n_segments;
    if requested > n_pixels {
        log::warn!("image {w}x{h} too small for {requested} superpixels, using {n_pixels}");
        requested = n_pixels;
    }

    let max = rgb.data().iter().fold(0f32, |m, &v| m.max(v));
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let scaled: Vec<f32> = rgb.data().iter().map(|&v| v * scale).collect();
    let smooth = gaussian_blur(&scaled, w, h, 3, params.sigma);
    let features: Vec<[f64; 3]> = smooth
        .chunks_exact(3)
        .map(|p| {
            let px = [p[0] as f64, p[1] as f64, p[2] as f64];
            if params.lab {
                rgb_to_lab(px)
            } else {
                px
            }
        })
        .collect();

    let (nx, ny) = grid(requested, w, h);
    let n_seeds = nx * ny;
    if n_seeds < requested / 2 {
        log::warn!("seed grid {nx}x{ny} yields {n_seeds} of {requested} requested superpixels");
    }
    let step = (n_pixels as f64 / n_seeds as f64).sqrt();

    // Cluster centers: color (3) + position (x, y).
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(n_seeds);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (i as f64 + 0.5) * w as f64 / nx as f64;
            let cy = (j as f64 + 0.5) * h as f64 / ny as f64;
            let f = features[(cy as usize).min(h - 1) * w + (cx as usize).min(w - 1)];
            centers.push([f[0], f[1], f[2], cx - 0.5, cy - 0.5]);
        }
    }
    // Initial assignment: the grid cell containing the pixel.
    let mut labels: Vec<usize> = (0..n_pixels)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            let i = (x * nx / w).min(nx - 1);
            let j = (y * ny / h).min(ny - 1);
            j * nx + i
        })
        .collect();
    let mut max_color = vec![1.0f64; n_seeds];
    let spatial_weight = 1.0 / (step * step);
    let mut dist = vec![f64::INFINITY; n_pixels];
    let radius = step.ceil() as isize;

    for _ in 0..params.iterations {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cx, cy) = (c[3].round() as isize, c[4].round() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius + 1).max(0) as usize).min(h);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius + 1).max(0) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let f = features[p];
                    let dc = (f[0] - c[0]).powi(2) + (f[1] - c[1]).powi(2) + (f[2] - c[2]).powi(2);
                    let ds = (x as f64 - c[3]).powi(2) + (y as f64 - c[4]).powi(2);
                    let d = dc / max_color[k] + ds * spatial_weight;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k;
                    }
                }
            }
        }
        let mut sums = vec![[0f64; 5]; n_seeds];
        let mut counts = vec![0usize; n_seeds];
        for (p, &k) in labels.iter().enumerate() {
            let f = features[p];
            let s = &mut sums[k];
            s[0] += f[0];
            s[1] += f[1];
            s[2] += f[2];
            s[3] += (p % w) as f64;
            s[4] += (p / w) as f64;
            counts[k] += 1;
        }
        for k in 0..n_seeds {
            if counts[k] > 0 {
                let n = counts[k] as f64;
                centers[k] = sums[k].map(|v| v / n);
            }
        }
        // SLICO: each cluster's color normalizer is its largest color distance.
        let mut new_max = vec![0f64; n_seeds];
        for (p, &k) in labels.iter().enumerate() {
            let f = features[p];
            let c = centers[k];
            let dc = (f[0] - c[0]).powi(2) + (f[1] - c[1]).powi(2) + (f[2] - c[2]).powi(2);
            new_max[k] = new_max[k].max(dc);
        }
        for k in 0..n_seeds {
            max_color[k] = new_max[k].max(1e-4);
        }
    }

    let min_size = ((n_pixels as f64 / n_seeds as f64) * params.min_size_factor).floor() as usize;
    let segments = enforce_connectivity(&labels, w, h, min_size);
    Ok(SuperpixelDecomposition::from_segments(w, h, segments))
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Splits clusters into 4-connected components and merges components smaller
/// than `min_size` into the neighbor sharing the longest border. Returns
/// contiguous segment ids numbered in scan order.
pub(crate) fn enforce_connectivity(labels: &[usize], w: usize, h: usize, min_size: usize) -> Vec<u32> {
    let n = w * h;
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == labels[p] {
                    comp[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }

    let n_comp = sizes.len();
    // Shared border lengths between adjacent components.
    let mut borders: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n_comp];
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x];
            let mut touch = |b: usize| {
                if a != b {
                    *borders[a].entry(b).or_insert(0) += 1;
                    *borders[b].entry(a).or_insert(0) += 1;
                }
            };
            if x + 1 < w {
                touch(comp[y * w + x + 1]);
            }
            if y + 1 < h {
                touch(comp[(y + 1) * w + x]);
            }
        }
    }

    let mut uf = UnionFind {
        parent: (0..n_comp).collect(),
    };
    let mut merged_size = sizes.clone();
    for c in 0..n_comp {
        let root = uf.find(c);
        if merged_size[root] >= min_size {
            continue;
        }
        // Border lengths from the whole merged group to other groups.
        let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
        for m in 0..n_comp {
            if uf.find(m) != root {
                continue;
            }
            for (&nb, &len) in &borders[m] {
                let r = uf.find(nb);
                if r != root {
                    *totals.entry(r).or_insert(0) += len;
                }
            }
        }
        if let Some((&target, _)) = totals
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        {
            uf.parent[root] = target;
            merged_size[target] += merged_size[root];
        }
    }

    let mut remap: BTreeMap<usize, u32> = BTreeMap::new();
    let mut out = vec![0u32; n];
    for p in 0..n {
        let r = uf.find(comp[p]);
        let next = remap.len() as u32;
        out[p] = *remap.entry(r).or_insert(next);
    }
    out
}

impl SuperpixelDecomposition {
    /// Builds a decomposition (with per-segment statistics) from contiguous ids.
    pub fn from_segments(width: usize, height: usize, segments: Vec<u32>) -> Self {
        let n_seg = segments.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
        let mut info: Vec<SegmentInfo> = (0..n_seg)
            .map(|_| SegmentInfo {
                pixels: 0,
                bbox: BoundingBox {
                    x0: usize::MAX,
                    y0: usize::MAX,
                    x1: 0,
                    y1: 0,
                },
                centroid: (0.0, 0.0),
            })
            .collect();
        for (p, &s) in segments.iter().enumerate() {
            let (x, y) = (p % width, p / width);
            let seg = &mut info[s as usize];
            seg.pixels += 1;
            seg.bbox.x0 = seg.bbox.x0.min(x);
            seg.bbox.y0 = seg.bbox.y0.min(y);
            seg.bbox.x1 = seg.bbox.x1.max(x + 1);
            seg.bbox.y1 = seg.bbox.y1.max(y + 1);
            seg.centroid.0 += x as f64;
            seg.centroid.1 += y as f64;
        }
        for seg in &mut info {
            if seg.pixels > 0 {
                seg.centroid.0 /= seg.pixels as f64;
                seg.centroid.1 /= seg.pixels as f64;
            }
        }
        Self {
            width,
            height,
            segments,
            info,
        }
    }
}
