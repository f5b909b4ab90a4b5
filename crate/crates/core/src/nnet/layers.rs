use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{Tensor, BN_EPS};
use crate::{Error, Result};

/// Soft cap on the im2col buffer (values) built per group of samples.
const IM2COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `N×C×L → N×O×(L+2p−k+1)`.
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
    },
    /// Non-overlapping average pooling, trailing remainder dropped.
    AvgPool1d { kernel: usize },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
    },
    MaxPool2d { kernel: usize },
    /// Bilinear ×2 upsampling with half-pixel centers.
    Upsample2d,
    Dense { inputs: usize, outputs: usize },
    /// Normalizes axis 1 over the batch and all trailing axes.
    BatchNorm { features: usize },
    Elu,
    Dropout { p: f64 },
    /// `N×L → N×1×L`.
    Unsqueeze,
    Flatten,
    /// `N×C×H×W → N×C`.
    GlobalAvgPool,
    /// Remembers the current activation in a skip slot.
    SaveSkip { slot: usize },
    /// Appends the channels stored in a skip slot.
    ConcatSkip { slot: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::AvgPool1d { .. } => "avgpool1d",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Upsample2d => "upsample2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Elu => "elu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Unsqueeze => "unsqueeze",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::SaveSkip { .. } => "save_skip",
            LayerSpec::ConcatSkip { .. } => "concat_skip",
        }
    }

    /// Trainable scalars, in closed form.
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => out_ch * in_ch * kernel + out_ch,
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => out_ch * in_ch * kernel * kernel + out_ch,
            LayerSpec::Dense { inputs, outputs } => outputs * inputs + outputs,
            LayerSpec::BatchNorm { features } => 2 * features,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }
}

/// Forward-pass behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout on, activations cached for backward.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Batch statistics folded into a cumulative running average, dropout off.
    Recalibrate,
}

pub(crate) struct Layer {
    pub spec: LayerSpec,
    /// Conv/dense: `[weight, bias]`; batchnorm: `[scale, shift]`.
    pub params: Vec<Param>,
    /// Batchnorm running mean and (unbiased) variance.
    pub running: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) enum Cache {
    Input(Tensor),
    Shape(Vec<usize>),
    MaxPool { shape: Vec<usize>, argmax: Vec<usize> },
    Bn { xhat: Vec<f64>, inv_std: Vec<f64> },
    Elu(Tensor),
    Dropout(Vec<f64>),
    Concat { own: usize, skip: usize },
    Skip,
}

pub(crate) struct Ctx<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub skips: Vec<Option<Tensor>>,
}

pub(crate) struct Forward {
    pub out: Tensor,
    pub cache: Option<Cache>,
    /// Batchnorm batch mean and biased variance.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>, usize)>,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    o: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn group(&self, n: usize) -> usize {
        (IM2COL_BUDGET / (self.k() * self.p()).max(1)).clamp(1, n.max(1))
    }
}

fn im2col(g: &ConvGeom, x: &[f64], s0: usize, gs: usize, cols: &mut [f64]) {
    let (p, gp) = (g.p(), gs * g.p());
    let item = g.c * g.h * g.w;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * gp..][..gp];
                for s in 0..gs {
                    let src = &x[(s0 + s) * item + c * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let dst = &mut row[s * p + oy * g.wo..][..g.wo];
                        let iy = (oy + i) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let line = &src[iy as usize * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox + j) as isize - g.pw as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], s0: usize, gs: usize, dx: &mut [f64]) {
    let (p, gp) = (g.p(), gs * g.p());
    let item = g.c * g.h * g.w;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * gp..][..gp];
                for s in 0..gs {
                    let dst = &mut dx[(s0 + s) * item + c * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy + i) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &row[s * p + oy * g.wo..][..g.wo];
                        let line = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox + j) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], n: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let group = g.group(n);
    let mut y = vec![0.0; n * g.o * p];
    let mut cols = vec![0.0; k * group * p];
    let mut out = vec![0.0; g.o * group * p];
    for s0 in (0..n).step_by(group) {
        let gs = group.min(n - s0);
        let gp = gs * p;
        im2col(g, x, s0, gs, &mut cols);
        gemm(g.o, k, gp, w, false, &cols[..k * gp], false, 0.0, &mut out[..g.o * gp]);
        for s in 0..gs {
            for oc in 0..g.o {
                let dst = &mut y[((s0 + s) * g.o + oc) * p..][..p];
                let src = &out[oc * gp + s * p..][..p];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + b[oc];
                }
            }
        }
    }
    y
}

/// Returns `dx` and accumulates into `dw`, `db`.
fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    dy: &[f64],
    n: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let group = g.group(n);
    let mut dx = vec![0.0; x.len()];
    let mut cols = vec![0.0; k * group * p];
    let mut dcols = vec![0.0; k * group * p];
    let mut dyg = vec![0.0; g.o * group * p];
    for s0 in (0..n).step_by(group) {
        let gs = group.min(n - s0);
        let gp = gs * p;
        im2col(g, x, s0, gs, &mut cols);
        for s in 0..gs {
            for oc in 0..g.o {
                let src = &dy[((s0 + s) * g.o + oc) * p..][..p];
                dyg[oc * gp + s * p..][..p].copy_from_slice(src);
                db[oc] += src.iter().sum::<f64>();
            }
        }
        gemm(g.o, gp, k, &dyg[..g.o * gp], false, &cols[..k * gp], true, 1.0, dw);
        gemm(k, g.o, gp, w, true, &dyg[..g.o * gp], false, 0.0, &mut dcols[..k * gp]);
        col2im(g, &dcols[..k * gp], s0, gs, &mut dx);
    }
    dx
}

/// Source taps for half-pixel ×2 upsampling along one axis.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(n - 1), s - i0 as f64)
        })
        .collect()
}

impl Layer {
    pub fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let he = |fan_in: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| crate::rng::normal(rng) * std).collect()
        };
        let (params, running) = match spec {
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => (
                vec![
                    Param::new(he(in_ch * kernel, out_ch * in_ch * kernel, rng)),
                    Param::new(vec![0.0; out_ch]),
                ],
                None,
            ),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let fan = in_ch * kernel * kernel;
                (
                    vec![
                        Param::new(he(fan, out_ch * fan, rng)),
                        Param::new(vec![0.0; out_ch]),
                    ],
                    None,
                )
            }
            LayerSpec::Dense { inputs, outputs } => (
                vec![
                    Param::new(he(inputs, outputs * inputs, rng)),
                    Param::new(vec![0.0; outputs]),
                ],
                None,
            ),
            LayerSpec::BatchNorm { features } => (
                vec![
                    Param::new(vec![1.0; features]),
                    Param::new(vec![0.0; features]),
                ],
                Some((vec![0.0; features], vec![1.0; features])),
            ),
            _ => (Vec::new(), None),
        };
        Self {
            spec,
            params,
            running,
        }
    }

    fn err(&self, idx: usize, detail: String) -> Error {
        Error::Shape {
            layer: format!("#{idx} {}", self.spec.name()),
            detail,
        }
    }

    fn conv_geom(&self, idx: usize, shape: &[usize]) -> Result<ConvGeom> {
        let (in_ch, out_ch, kernel, padding, two_d) = match self.spec {
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                padding,
            } => (in_ch, out_ch, kernel, padding, false),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                padding,
            } => (in_ch, out_ch, kernel, padding, true),
            _ => unreachable!(),
        };
        let rank = if two_d { 4 } else { 3 };
        if shape.len() != rank || shape[1] != in_ch {
            return Err(self.err(
                idx,
                format!("expected rank {rank} with {in_ch} channels, got {shape:?}"),
            ));
        }
        let (h, w, kh, ph) = if two_d {
            (shape[2], shape[3], kernel, padding)
        } else {
            (1, shape[2], 1, 0)
        };
        if h + 2 * ph < kh || w + 2 * padding < kernel {
            return Err(self.err(idx, format!("input {shape:?} smaller than kernel {kernel}")));
        }
        Ok(ConvGeom {
            c: in_ch,
            h,
            w,
            kh,
            kw: kernel,
            ph,
            pw: padding,
            o: out_ch,
            ho: h + 2 * ph - kh + 1,
            wo: w + 2 * padding - kernel + 1,
        })
    }

    pub fn forward(&self, idx: usize, x: Tensor, ctx: &mut Ctx<'_>) -> Result<Forward> {
        let train = ctx.mode == Mode::Train;
        let shape = x.shape().to_vec();
        let n = x.batch();
        let plain = |out: Tensor, cache: Option<Cache>| Forward {
            out,
            cache: if train { cache } else { None },
            batch_stats: None,
        };
        match self.spec {
            LayerSpec::Conv1d { .. } | LayerSpec::Conv2d { .. } => {
                let g = self.conv_geom(idx, &shape)?;
                let y = conv_forward(&g, x.data(), n, &self.params[0].value, &self.params[1].value);
                let out_shape = if shape.len() == 4 {
                    vec![n, g.o, g.ho, g.wo]
                } else {
                    vec![n, g.o, g.wo]
                };
                Ok(plain(Tensor::new(out_shape, y)?, Some(Cache::Input(x))))
            }
            LayerSpec::AvgPool1d { kernel } => {
                if shape.len() != 3 || shape[2] < kernel {
                    return Err(self.err(idx, format!("expected N×C×L with L ≥ {kernel}, got {shape:?}")));
                }
                let (c, l) = (shape[1], shape[2]);
                let lo = l / kernel;
                let mut y = vec![0.0; n * c * lo];
                for (row, src) in y.chunks_mut(lo).zip(x.data().chunks(l)) {
                    for (i, v) in row.iter_mut().enumerate() {
                        *v = src[i * kernel..(i + 1) * kernel].iter().sum::<f64>() / kernel as f64;
                    }
                }
                Ok(plain(Tensor::new(vec![n, c, lo], y)?, Some(Cache::Shape(shape))))
            }
            LayerSpec::MaxPool2d { kernel } => {
                if shape.len() != 4 || shape[2] < kernel || shape[3] < kernel {
                    return Err(self.err(idx, format!("expected N×C×H×W with H,W ≥ {kernel}, got {shape:?}")));
                }
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let (ho, wo) = (h / kernel, w / kernel);
                let mut y = vec![0.0; n * c * ho * wo];
                let mut argmax = vec![0usize; y.len()];
                for plane in 0..n * c {
                    let src = &x.data()[plane * h * w..][..h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = (oy * kernel) * w + ox * kernel;
                            for i in 0..kernel {
                                for j in 0..kernel {
                                    let p = (oy * kernel + i) * w + ox * kernel + j;
                                    if src[p] > src[best] {
                                        best = p;
                                    }
                                }
                            }
                            let o = plane * ho * wo + oy * wo + ox;
                            y[o] = src[best];
                            argmax[o] = plane * h * w + best;
                        }
                    }
                }
                Ok(plain(
                    Tensor::new(vec![n, c, ho, wo], y)?,
                    Some(Cache::MaxPool { shape, argmax }),
                ))
            }
            LayerSpec::Upsample2d => {
                if shape.len() != 4 {
                    return Err(self.err(idx, format!("expected N×C×H×W, got {shape:?}")));
                }
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let (ty, tx) = (upsample_taps(h), upsample_taps(w));
                let mut y = vec![0.0; n * c * 4 * h * w];
                for plane in 0..n * c {
                    let src = &x.data()[plane * h * w..][..h * w];
                    let dst = &mut y[plane * 4 * h * w..][..4 * h * w];
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                            dst[oy * 2 * w + ox] = top * (1.0 - wy) + bot * wy;
                        }
                    }
                }
                Ok(plain(
                    Tensor::new(vec![n, c, 2 * h, 2 * w], y)?,
                    Some(Cache::Shape(shape)),
                ))
            }
            LayerSpec::Dense { inputs, outputs } => {
                if shape.len() != 2 || shape[1] != inputs {
                    return Err(self.err(idx, format!("expected N×{inputs}, got {shape:?}")));
                }
                let mut y = Vec::with_capacity(n * outputs);
                for _ in 0..n {
                    y.extend_from_slice(&self.params[1].value);
                }
                gemm(n, inputs, outputs, x.data(), false, &self.params[0].value, true, 1.0, &mut y);
                Ok(plain(Tensor::new(vec![n, outputs], y)?, Some(Cache::Input(x))))
            }
            LayerSpec::BatchNorm { features } => {
                if shape.len() < 2 || shape[1] != features {
                    return Err(self.err(idx, format!("expected N×{features}×…, got {shape:?}")));
                }
                let s: usize = shape[2..].iter().product();
                let m = n * s;
                if m == 0 {
                    return Err(self.err(idx, "empty batch".into()));
                }
                let (gamma, beta) = (&self.params[0].value, &self.params[1].value);
                let use_batch = ctx.mode != Mode::Eval;
                let (mean, var) = if use_batch {
                    let mut mean = vec![0.0; features];
                    let mut var = vec![0.0; features];
                    for (i, v) in x.data().iter().enumerate() {
                        mean[(i / s) % features] += v;
                    }
                    mean.iter_mut().for_each(|v| *v /= m as f64);
                    for (i, v) in x.data().iter().enumerate() {
                        let c = (i / s) % features;
                        var[c] += (v - mean[c]).powi(2);
                    }
                    var.iter_mut().for_each(|v| *v /= m as f64);
                    (mean, var)
                } else {
                    let (rm, rv) = self.running.as_ref().expect("batchnorm has running stats");
                    (rm.clone(), rv.clone())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut x = x;
                let mut xhat = if train { vec![0.0; x.len()] } else { Vec::new() };
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    let c = (i / s) % features;
                    let h = (*v - mean[c]) * inv_std[c];
                    if train {
                        xhat[i] = h;
                    }
                    *v = gamma[c] * h + beta[c];
                }
                Ok(Forward {
                    out: x,
                    cache: train.then_some(Cache::Bn { xhat, inv_std }),
                    batch_stats: use_batch.then_some((mean, var, m)),
                })
            }
            LayerSpec::Elu => {
                let mut x = x;
                for v in x.data_mut() {
                    if *v <= 0.0 {
                        *v = v.exp_m1();
                    }
                }
                let cache = train.then(|| Cache::Elu(x.clone()));
                Ok(Forward {
                    out: x,
                    cache,
                    batch_stats: None,
                })
            }
            LayerSpec::Dropout { p } => {
                if !train || p == 0.0 {
                    return Ok(plain(x, Some(Cache::Dropout(Vec::new()))));
                }
                let rng = ctx
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| self.err(idx, "training-mode dropout needs an RNG".into()))?;
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let mut x = x;
                for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Ok(plain(x, Some(Cache::Dropout(mask))))
            }
            LayerSpec::Unsqueeze => {
                if shape.len() != 2 {
                    return Err(self.err(idx, format!("expected N×L, got {shape:?}")));
                }
                let out = x.reshape(vec![n, 1, shape[1]])?;
                Ok(plain(out, Some(Cache::Shape(shape))))
            }
            LayerSpec::Flatten => {
                let item = x.item_len();
                let out = x.reshape(vec![n, item])?;
                Ok(plain(out, Some(Cache::Shape(shape))))
            }
            LayerSpec::GlobalAvgPool => {
                if shape.len() != 4 {
                    return Err(self.err(idx, format!("expected N×C×H×W, got {shape:?}")));
                }
                let hw = shape[2] * shape[3];
                let y: Vec<f64> = x
                    .data()
                    .chunks(hw)
                    .map(|p| p.iter().sum::<f64>() / hw as f64)
                    .collect();
                Ok(plain(Tensor::new(vec![n, shape[1]], y)?, Some(Cache::Shape(shape))))
            }
            LayerSpec::SaveSkip { slot } => {
                if ctx.skips.len() <= slot {
                    ctx.skips.resize(slot + 1, None);
                }
                ctx.skips[slot] = Some(x.clone());
                Ok(plain(x, Some(Cache::Skip)))
            }
            LayerSpec::ConcatSkip { slot } => {
                let skip = ctx
                    .skips
                    .get_mut(slot)
                    .and_then(Option::take)
                    .ok_or_else(|| self.err(idx, format!("skip slot {slot} is empty")))?;
                let ss = skip.shape();
                if shape.len() < 2 || ss.len() != shape.len() || ss[0] != n || ss[2..] != shape[2..] {
                    return Err(self.err(idx, format!("cannot concatenate {shape:?} with {ss:?}")));
                }
                let (own, other) = (x.item_len(), skip.item_len());
                let mut y = Vec::with_capacity(x.len() + skip.len());
                for i in 0..n {
                    y.extend_from_slice(&x.data()[i * own..][..own]);
                    y.extend_from_slice(&skip.data()[i * other..][..other]);
                }
                let mut out_shape = shape.clone();
                out_shape[1] += ss[1];
                Ok(plain(
                    Tensor::new(out_shape, y)?,
                    Some(Cache::Concat { own, skip: other }),
                ))
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &mut self,
        idx: usize,
        cache: Cache,
        dy: Tensor,
        skip_grads: &mut Vec<Option<Tensor>>,
    ) -> Result<Tensor> {
        match (&self.spec, cache) {
            (LayerSpec::Conv1d { .. } | LayerSpec::Conv2d { .. }, Cache::Input(x)) => {
                let g = self.conv_geom(idx, x.shape())?;
                let (w, b) = self.params.split_at_mut(1);
                let dx = conv_backward(
                    &g,
                    x.data(),
                    dy.data(),
                    x.batch(),
                    &w[0].value,
                    &mut w[0].grad,
                    &mut b[0].grad,
                );
                Tensor::new(x.shape().to_vec(), dx)
            }
            (&LayerSpec::AvgPool1d { kernel }, Cache::Shape(shape)) => {
                let l = shape[2];
                let lo = l / kernel;
                let mut dx = vec![0.0; shape.iter().product()];
                for (row, g) in dx.chunks_mut(l).zip(dy.data().chunks(lo)) {
                    for (i, v) in g.iter().enumerate() {
                        row[i * kernel..(i + 1) * kernel].fill(v / kernel as f64);
                    }
                }
                Tensor::new(shape, dx)
            }
            (LayerSpec::MaxPool2d { .. }, Cache::MaxPool { shape, argmax }) => {
                let mut dx = vec![0.0; shape.iter().product()];
                for (&a, g) in argmax.iter().zip(dy.data()) {
                    dx[a] += g;
                }
                Tensor::new(shape, dx)
            }
            (LayerSpec::Upsample2d, Cache::Shape(shape)) => {
                let (h, w) = (shape[2], shape[3]);
                let (ty, tx) = (upsample_taps(h), upsample_taps(w));
                let mut dx = vec![0.0; shape.iter().product()];
                for (plane, g) in dy.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[plane * h * w..][..h * w];
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let v = g[oy * 2 * w + ox];
                            dst[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += v * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += v * wy * (1.0 - wx);
                            dst[y1 * w + x1] += v * wy * wx;
                        }
                    }
                }
                Tensor::new(shape, dx)
            }
            (&LayerSpec::Dense { inputs, outputs }, Cache::Input(x)) => {
                let n = x.batch();
                let (w, b) = self.params.split_at_mut(1);
                gemm(outputs, n, inputs, dy.data(), true, x.data(), false, 1.0, &mut w[0].grad);
                for row in dy.data().chunks(outputs) {
                    for (g, v) in b[0].grad.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                let mut dx = vec![0.0; n * inputs];
                gemm(n, outputs, inputs, dy.data(), false, &w[0].value, false, 0.0, &mut dx);
                Tensor::new(vec![n, inputs], dx)
            }
            (&LayerSpec::BatchNorm { features }, Cache::Bn { xhat, inv_std }) => {
                let shape = dy.shape().to_vec();
                let s: usize = shape[2..].iter().product();
                let m = (shape[0] * s) as f64;
                let mut sum_dy = vec![0.0; features];
                let mut sum_dy_xhat = vec![0.0; features];
                for (i, g) in dy.data().iter().enumerate() {
                    let c = (i / s) % features;
                    sum_dy[c] += g;
                    sum_dy_xhat[c] += g * xhat[i];
                }
                let (gamma, beta) = self.params.split_at_mut(1);
                for c in 0..features {
                    gamma[0].grad[c] += sum_dy_xhat[c];
                    beta[0].grad[c] += sum_dy[c];
                }
                let gv = &gamma[0].value;
                let mut dx = dy;
                for (i, g) in dx.data_mut().iter_mut().enumerate() {
                    let c = (i / s) % features;
                    *g = gv[c] * inv_std[c] / m
                        * (m * *g - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
                }
                Ok(dx)
            }
            (LayerSpec::Elu, Cache::Elu(out)) => {
                let mut dx = dy;
                for (g, y) in dx.data_mut().iter_mut().zip(out.data()) {
                    if *y <= 0.0 {
                        *g *= y + 1.0;
                    }
                }
                Ok(dx)
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout(mask)) => {
                let mut dx = dy;
                if !mask.is_empty() {
                    for (g, m) in dx.data_mut().iter_mut().zip(&mask) {
                        *g *= m;
                    }
                }
                Ok(dx)
            }
            (LayerSpec::Unsqueeze | LayerSpec::Flatten, Cache::Shape(shape)) => dy.reshape(shape),
            (LayerSpec::GlobalAvgPool, Cache::Shape(shape)) => {
                let hw = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(shape.iter().product());
                for g in dy.data() {
                    dx.extend(std::iter::repeat(g / hw as f64).take(hw));
                }
                Tensor::new(shape, dx)
            }
            (&LayerSpec::SaveSkip { slot }, Cache::Skip) => {
                let mut dx = dy;
                if let Some(g) = skip_grads.get_mut(slot).and_then(Option::take) {
                    for (a, b) in dx.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Ok(dx)
            }
            (&LayerSpec::ConcatSkip { slot }, Cache::Concat { own, skip }) => {
                let shape = dy.shape().to_vec();
                let n = shape[0];
                let mut dx = Vec::with_capacity(n * own);
                let mut ds = Vec::with_capacity(n * skip);
                for chunk in dy.data().chunks(own + skip) {
                    dx.extend_from_slice(&chunk[..own]);
                    ds.extend_from_slice(&chunk[own..]);
                }
                let spatial: usize = shape[2..].iter().product::<usize>().max(1);
                let mut own_shape = shape.clone();
                own_shape[1] = own / spatial;
                let mut skip_shape = shape;
                skip_shape[1] = skip / spatial;
                if skip_grads.len() <= slot {
                    skip_grads.resize(slot + 1, None);
                }
                skip_grads[slot] = Some(Tensor::new(skip_shape, ds)?);
                Tensor::new(own_shape, dx)
            }
            _ => Err(self.err(idx, "cache does not match layer".into())),
        }
    }
}
