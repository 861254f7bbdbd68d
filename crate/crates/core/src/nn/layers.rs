//! The six layer kinds and their analytic forward/backward passes.
//!
//! All layers act on a batch: the leading tensor dimension is the sample
//! index. Spatial layers use `[N, C, H, W]`, dense layers `[N, F]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use super::tensor::Tensor;
use super::{Mode, ParamSource};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    BatchNorm,
    LeakyRelu,
    Dropout,
    AvgPoolGlobal,
    Linear,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Conv2d,
        LayerKind::BatchNorm,
        LayerKind::LeakyRelu,
        LayerKind::Dropout,
        LayerKind::AvgPoolGlobal,
        LayerKind::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::LeakyRelu => "leaky_relu",
            LayerKind::Dropout => "dropout",
            LayerKind::AvgPoolGlobal => "avgpool_global",
            LayerKind::Linear => "linear",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Dropout {
        p: f64,
    },
    AvgPoolGlobal,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    /// 3×3 convolution with padding 1.
    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerSpec::LeakyRelu { .. } => LayerKind::LeakyRelu,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::AvgPoolGlobal => LayerKind::AvgPoolGlobal,
            LayerSpec::Linear { .. } => LayerKind::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0,
            LayerSpec::BatchNorm { channels } => channels > 0,
            LayerSpec::LeakyRelu { slope } => slope.is_finite(),
            LayerSpec::Dropout { p } => (0.0..1.0).contains(&p),
            LayerSpec::AvgPoolGlobal => true,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => in_features > 0 && out_features > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid layer hyperparameters: {self}")))
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::Shape(format!("{self} cannot take input {input:?}"));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => match *input {
                [c, h, w] if c == in_channels && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                    Ok(vec![
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ])
                }
                _ => Err(mismatch()),
            },
            LayerSpec::BatchNorm { channels } => match input.first() {
                Some(&c) if c == channels && matches!(input.len(), 1 | 3) => Ok(input.to_vec()),
                _ => Err(mismatch()),
            },
            LayerSpec::LeakyRelu { .. } | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::AvgPoolGlobal => match *input {
                [c, _, _] => Ok(vec![c]),
                _ => Err(mismatch()),
            },
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match *input {
                [f] if f == in_features => Ok(vec![out_features]),
                _ => Err(mismatch()),
            },
        }
    }

    /// Trainable tensors as `(suffix, shape)`.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::BatchNorm { channels } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::BatchNorm { channels } => vec![
                ("running_mean", vec![channels]),
                ("running_var", vec![channels]),
            ],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv2d {in_channels} {out_channels} {kernel} {stride} {padding}"),
            LayerSpec::BatchNorm { channels } => write!(f, "batchnorm {channels}"),
            LayerSpec::LeakyRelu { slope } => write!(f, "leaky_relu {slope:e}"),
            LayerSpec::Dropout { p } => write!(f, "dropout {p:e}"),
            LayerSpec::AvgPoolGlobal => write!(f, "avgpool_global"),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => write!(f, "linear {in_features} {out_features}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::ModelFormat(format!("bad layer line `{s}`"));
        let mut it = s.split_whitespace();
        let kind: LayerKind = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let args: Vec<&str> = it.collect();
        let int = |i: usize| -> Result<usize> { args.get(i).and_then(|a| a.parse().ok()).ok_or_else(bad) };
        let float = |i: usize| -> Result<f64> { args.get(i).and_then(|a| a.parse().ok()).ok_or_else(bad) };
        let (spec, arity) = match kind {
            LayerKind::Conv2d => (
                LayerSpec::Conv2d {
                    in_channels: int(0)?,
                    out_channels: int(1)?,
                    kernel: int(2)?,
                    stride: int(3)?,
                    padding: int(4)?,
                },
                5,
            ),
            LayerKind::BatchNorm => (LayerSpec::BatchNorm { channels: int(0)? }, 1),
            LayerKind::LeakyRelu => (LayerSpec::LeakyRelu { slope: float(0)? }, 1),
            LayerKind::Dropout => (LayerSpec::Dropout { p: float(0)? }, 1),
            LayerKind::AvgPoolGlobal => (LayerSpec::AvgPoolGlobal, 0),
            LayerKind::Linear => (
                LayerSpec::Linear {
                    in_features: int(0)?,
                    out_features: int(1)?,
                },
                2,
            ),
        };
        if args.len() != arity {
            return Err(bad());
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) enum LayerCache {
    Conv { cols: Vec<Vec<f64>>, input_shape: Vec<usize> },
    BatchNorm(BnCache),
    LeakyRelu { positive: Vec<bool> },
    Dropout { mask: Option<Vec<f64>> },
    AvgPool { input_shape: Vec<usize> },
    Linear { input: Tensor },
}

pub(crate) struct BnCache {
    xhat: Vec<f64>,
    /// `1 / sqrt(var + eps)` per channel, from batch or running statistics.
    inv_std: Vec<f64>,
    train: bool,
    shape: Vec<usize>,
    /// Batch mean and unbiased variance (train mode only).
    pub(crate) batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn fetch<'a>(params: &'a dyn ParamSource, prefix: &str, name: &str) -> Result<&'a Tensor> {
    let key = format!("{prefix}.{name}");
    params
        .param(&key)
        .ok_or_else(|| Error::Shape(format!("missing parameter `{key}`")))
}

fn fetch_buffer<'a>(params: &'a dyn ParamSource, prefix: &str, name: &str) -> Result<&'a Tensor> {
    let key = format!("{prefix}.{name}");
    params
        .buffer(&key)
        .ok_or_else(|| Error::Shape(format!("missing buffer `{key}`")))
}

/// `C[m×n] = A[m×k] · B[k×n] + beta·C` with arbitrary strides on A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches; C is
    // dense row-major with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.patch_len() * self.out_len()];
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * self.out_len()..(row + 1) * self.out_len()];
                    for oy in 0..self.ho {
                        let iy = (oy * self.s + ky) as isize - self.p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.s + kx) as isize - self.p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * self.out_len()..(row + 1) * self.out_len()];
                    for oy in 0..self.ho {
                        let iy = (oy * self.s + ky) as isize - self.p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.s + kx) as isize - self.p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Runs `f` on every sample in parallel and returns results in sample order.
fn per_sample<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

pub(crate) fn forward<R: Rng + ?Sized>(
    spec: &LayerSpec,
    params: &dyn ParamSource,
    prefix: &str,
    x: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, LayerCache)> {
    let sample_shape = &x.shape()[1..];
    let out_sample = spec
        .output_shape(sample_shape)
        .map_err(|e| Error::Shape(format!("layer `{prefix}`: {e}")))?;
    let n = x.batch();
    let mut out_shape = vec![n];
    out_shape.extend_from_slice(&out_sample);
    match *spec {
        LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            out_channels,
            ..
        } => {
            let weight = fetch(params, prefix, "weight")?;
            let bias = fetch(params, prefix, "bias")?;
            let g = ConvGeom {
                c: sample_shape[0],
                h: sample_shape[1],
                w: sample_shape[2],
                k: kernel,
                s: stride,
                p: padding,
                ho: out_sample[1],
                wo: out_sample[2],
            };
            let results = per_sample(n, |i| {
                let cols = g.im2col(x.sample(i));
                let mut out = vec![0.0; out_channels * g.out_len()];
                for (o, row) in out.chunks_exact_mut(g.out_len()).enumerate() {
                    row.fill(bias.data()[o]);
                }
                gemm(
                    out_channels,
                    g.patch_len(),
                    g.out_len(),
                    weight.data(),
                    (g.patch_len(), 1),
                    &cols,
                    (g.out_len(), 1),
                    1.0,
                    &mut out,
                );
                (out, cols)
            });
            let mut data = Vec::with_capacity(out_shape.iter().product());
            let mut cols = Vec::with_capacity(n);
            for (o, c) in results {
                data.extend_from_slice(&o);
                cols.push(c);
            }
            Ok((
                Tensor::new(out_shape, data)?,
                LayerCache::Conv {
                    cols,
                    input_shape: x.shape().to_vec(),
                },
            ))
        }
        LayerSpec::BatchNorm { channels } => {
            let gamma = fetch(params, prefix, "gamma")?;
            let beta = fetch(params, prefix, "beta")?;
            let spatial: usize = sample_shape[1..].iter().product();
            let count = (n * spatial) as f64;
            let idx = |b: usize, c: usize| (b * channels + c) * spatial;
            let (mean, var_biased, batch_stats) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; channels];
                    let mut var = vec![0.0; channels];
                    for c in 0..channels {
                        let mut s = 0.0;
                        for b in 0..n {
                            s += x.data()[idx(b, c)..idx(b, c) + spatial].iter().sum::<f64>();
                        }
                        let m = s / count;
                        let mut v = 0.0;
                        for b in 0..n {
                            v += x.data()[idx(b, c)..idx(b, c) + spatial]
                                .iter()
                                .map(|t| (t - m) * (t - m))
                                .sum::<f64>();
                        }
                        mean[c] = m;
                        var[c] = v / count;
                    }
                    let unbiased = if count > 1.0 {
                        var.iter().map(|v| v * count / (count - 1.0)).collect()
                    } else {
                        var.clone()
                    };
                    (mean.clone(), var, Some((mean, unbiased)))
                }
                Mode::Eval => (
                    fetch_buffer(params, prefix, "running_mean")?.data().to_vec(),
                    fetch_buffer(params, prefix, "running_var")?.data().to_vec(),
                    None,
                ),
            };
            let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            for b in 0..n {
                for c in 0..channels {
                    let r = idx(b, c)..idx(b, c) + spatial;
                    for ((o, h), v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&x.data()[r]) {
                        *h = (v - mean[c]) * inv_std[c];
                        *o = gamma.data()[c] * *h + beta.data()[c];
                    }
                }
            }
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::BatchNorm(BnCache {
                    xhat,
                    inv_std,
                    train: mode == Mode::Train,
                    shape: x.shape().to_vec(),
                    batch_stats,
                }),
            ))
        }
        LayerSpec::LeakyRelu { slope } => {
            let positive: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
            let out = x
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect();
            Ok((Tensor::new(out_shape, out)?, LayerCache::LeakyRelu { positive }))
        }
        LayerSpec::Dropout { p } => {
            if mode == Mode::Eval || p == 0.0 {
                return Ok((x.clone(), LayerCache::Dropout { mask: None }));
            }
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..x.len())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            Ok((Tensor::new(out_shape, out)?, LayerCache::Dropout { mask: Some(mask) }))
        }
        LayerSpec::AvgPoolGlobal => {
            let spatial = sample_shape[1] * sample_shape[2];
            let out = x
                .data()
                .chunks_exact(spatial)
                .map(|plane| plane.iter().sum::<f64>() / spatial as f64)
                .collect();
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::AvgPool {
                    input_shape: x.shape().to_vec(),
                },
            ))
        }
        LayerSpec::Linear {
            in_features,
            out_features,
        } => {
            let weight = fetch(params, prefix, "weight")?;
            let bias = fetch(params, prefix, "bias")?;
            let mut out: Vec<f64> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
            gemm(
                n,
                in_features,
                out_features,
                x.data(),
                (in_features, 1),
                weight.data(),
                (1, in_features),
                1.0,
                &mut out,
            );
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::Linear { input: x.clone() },
            ))
        }
    }
}

/// Returns the input gradient and pushes `(suffix, gradient)` pairs for the
/// layer's trainable tensors.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: &dyn ParamSource,
    prefix: &str,
    cache: &LayerCache,
    grad_out: &Tensor,
    param_grads: &mut Vec<(&'static str, Tensor)>,
) -> Result<Tensor> {
    match (spec, cache) {
        (
            &LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                out_channels,
                ..
            },
            LayerCache::Conv { cols, input_shape },
        ) => {
            let weight = fetch(params, prefix, "weight")?;
            let n = input_shape[0];
            let g = ConvGeom {
                c: input_shape[1],
                h: input_shape[2],
                w: input_shape[3],
                k: kernel,
                s: stride,
                p: padding,
                ho: grad_out.shape()[2],
                wo: grad_out.shape()[3],
            };
            let (pl, ol) = (g.patch_len(), g.out_len());
            let results = per_sample(n, |i| {
                let dy = grad_out.sample(i);
                let mut dw = vec![0.0; out_channels * pl];
                gemm(out_channels, ol, pl, dy, (ol, 1), &cols[i], (1, ol), 0.0, &mut dw);
                let db: Vec<f64> = dy.chunks_exact(ol).map(|r| r.iter().sum()).collect();
                let mut dcols = vec![0.0; pl * ol];
                gemm(pl, out_channels, ol, weight.data(), (1, pl), dy, (ol, 1), 0.0, &mut dcols);
                (dw, db, g.col2im(&dcols))
            });
            let mut dw = vec![0.0; out_channels * pl];
            let mut db = vec![0.0; out_channels];
            let mut dx = Vec::with_capacity(input_shape.iter().product());
            for (w_i, b_i, x_i) in results {
                for (a, b) in dw.iter_mut().zip(&w_i) {
                    *a += b;
                }
                for (a, b) in db.iter_mut().zip(&b_i) {
                    *a += b;
                }
                dx.extend_from_slice(&x_i);
            }
            param_grads.push(("weight", Tensor::new(weight.shape().to_vec(), dw)?));
            param_grads.push(("bias", Tensor::new(vec![out_channels], db)?));
            Tensor::new(input_shape.clone(), dx)
        }
        (&LayerSpec::BatchNorm { channels }, LayerCache::BatchNorm(bn)) => {
            let gamma = fetch(params, prefix, "gamma")?;
            let n = bn.shape[0];
            let spatial: usize = bn.shape[2..].iter().product();
            let count = (n * spatial) as f64;
            let idx = |b: usize, c: usize| (b * channels + c) * spatial;
            let dy = grad_out.data();
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for b in 0..n {
                for c in 0..channels {
                    let r = idx(b, c)..idx(b, c) + spatial;
                    for (g, h) in dy[r.clone()].iter().zip(&bn.xhat[r]) {
                        dbeta[c] += g;
                        dgamma[c] += g * h;
                    }
                }
            }
            let mut dx = vec![0.0; dy.len()];
            for b in 0..n {
                for c in 0..channels {
                    let r = idx(b, c)..idx(b, c) + spatial;
                    let scale = gamma.data()[c] * bn.inv_std[c];
                    for ((d, g), h) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&bn.xhat[r]) {
                        *d = if bn.train {
                            scale * (g - dbeta[c] / count - h * dgamma[c] / count)
                        } else {
                            scale * g
                        };
                    }
                }
            }
            param_grads.push(("gamma", Tensor::new(vec![channels], dgamma)?));
            param_grads.push(("beta", Tensor::new(vec![channels], dbeta)?));
            Tensor::new(bn.shape.clone(), dx)
        }
        (&LayerSpec::LeakyRelu { slope }, LayerCache::LeakyRelu { positive }) => {
            let dx = grad_out
                .data()
                .iter()
                .zip(positive)
                .map(|(g, &pos)| if pos { *g } else { slope * g })
                .collect();
            Tensor::new(grad_out.shape().to_vec(), dx)
        }
        (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => match mask {
            None => Ok(grad_out.clone()),
            Some(m) => Tensor::new(
                grad_out.shape().to_vec(),
                grad_out.data().iter().zip(m).map(|(g, k)| g * k).collect(),
            ),
        },
        (LayerSpec::AvgPoolGlobal, LayerCache::AvgPool { input_shape }) => {
            let spatial = input_shape[2] * input_shape[3];
            let dx = grad_out
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat(g / spatial as f64).take(spatial))
                .collect();
            Tensor::new(input_shape.clone(), dx)
        }
        (
            &LayerSpec::Linear {
                in_features,
                out_features,
            },
            LayerCache::Linear { input },
        ) => {
            let weight = fetch(params, prefix, "weight")?;
            let n = input.batch();
            let dy = grad_out.data();
            let mut dw = vec![0.0; out_features * in_features];
            gemm(
                out_features,
                n,
                in_features,
                dy,
                (1, out_features),
                input.data(),
                (in_features, 1),
                0.0,
                &mut dw,
            );
            let mut db = vec![0.0; out_features];
            for row in dy.chunks_exact(out_features) {
                for (a, b) in db.iter_mut().zip(row) {
                    *a += b;
                }
            }
            let mut dx = vec![0.0; n * in_features];
            gemm(
                n,
                out_features,
                in_features,
                dy,
                (out_features, 1),
                weight.data(),
                (in_features, 1),
                0.0,
                &mut dx,
            );
            param_grads.push(("weight", Tensor::new(vec![out_features, in_features], dw)?));
            param_grads.push(("bias", Tensor::new(vec![out_features], db)?));
            Tensor::new(input.shape().to_vec(), dx)
        }
        _ => Err(Error::InvalidArgument(format!(
            "layer `{prefix}`: cache does not belong to {spec}"
        ))),
    }
}
