//! Small image helpers shared by preprocessing, superpixels, synthesis and
//! augmentation. Images are interleaved (channel-innermost) `f32` buffers.

/// Mirror index without repeating the border sample (`abc|cb`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).round().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur of every channel with reflect borders.
pub(crate) fn gaussian_blur(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    sigma: f64,
) -> Vec<f32> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0f64;
                for (j, kv) in kernel.iter().enumerate() {
                    let xs = reflect_index(x as isize + j as isize - r, width);
                    acc += kv * data[(y * width + xs) * channels + c] as f64;
                }
                tmp[(y * width + x) * channels + c] = acc as f32;
            }
        }
    }
    let mut out = vec![0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0f64;
                for (j, kv) in kernel.iter().enumerate() {
                    let ys = reflect_index(y as isize + j as isize - r, height);
                    acc += kv * tmp[(ys * width + x) * channels + c] as f64;
                }
                out[(y * width + x) * channels + c] = acc as f32;
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub(crate) fn resize_bilinear(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    let mut out = vec![0f32; out_w * out_h * channels];
    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    let axis = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, height);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, sx, width);
            for c in 0..channels {
                let v = |x: usize, y: usize| data[(y * width + x) * channels + c] as f64;
                let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
                let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
                out[(oy * out_w + ox) * channels + c] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_repeating_border() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
        assert_eq!(reflect_index(-2, 2), 0);
        assert_eq!(reflect_index(2, 2), 0);
    }

    #[test]
    fn blur_preserves_constants() {
        let data = vec![2.5f32; 5 * 4 * 2];
        let out = gaussian_blur(&data, 5, 4, 2, 3.0);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-5));
    }

    #[test]
    fn resize_identity_and_replication() {
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&data, 3, 2, 2, 3, 2), data);
        let out = resize_bilinear(&[4.0, 5.0], 1, 1, 2, 3, 3);
        assert!(out.chunks(2).all(|p| p == [4.0, 5.0]));
    }
}
