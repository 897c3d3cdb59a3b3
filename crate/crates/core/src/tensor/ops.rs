//! Forward and backward kernels.
//!
//! Batched kernels fan out over samples with rayon. Cross-sample reductions
//! (weight and bias gradients, batch statistics) are summed in sample order
//! after the parallel section, so results do not depend on the thread count.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// `c = alpha·a·b + beta·c` over strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched is bounded by the asserts above and the
    // output does not alias either input (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output side `⌈size/stride⌉`; any odd padding goes after (bottom/right).
    #[default]
    Same,
    Valid,
}

impl Padding {
    /// `(output size, padding before)` along one spatial axis.
    pub fn resolve(self, size: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = size.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(size);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if size < kernel {
                    return Err(Error::shape(
                        "conv2d",
                        format!("valid padding needs input {size} >= kernel {kernel}"),
                    ));
                }
                Ok(((size - kernel) / stride + 1, 0))
            }
        }
    }
}

/// Kernels, bias and geometry of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `out_channels × in_channels × k × k`
    pub kernels: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(kernels: Tensor, bias: Vec<f64>, stride: usize, padding: Padding) -> Result<Self> {
        let (o, _, kh, kw) = kernels.dims4()?;
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} is not square"),
            ));
        }
        if bias.len() != o {
            return Err(Error::shape(
                "conv2d",
                format!("{} biases for {o} output channels", bias.len()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(ConvParams {
            kernels,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    batch: usize,
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    pub(crate) fn new(
        input: &Tensor,
        kernels: &Tensor,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (batch, in_c, h, w) = input.dims4()?;
        let (out_c, kc, k, kw) = kernels.dims4()?;
        if kc != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_c} channels, kernels expect {kc}"),
            ));
        }
        if k != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k}x{kw} is not square"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let (out_h, pad_top) = padding.resolve(h, k, stride)?;
        let (out_w, pad_left) = padding.resolve(w, k, stride)?;
        Ok(ConvGeometry {
            batch,
            in_c,
            out_c,
            h,
            w,
            k,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by output position `o` at kernel offset `kk`, if in bounds.
    #[inline]
    fn source(&self, o: usize, kk: usize, pad: usize, size: usize) -> Option<usize> {
        (o * self.stride + kk)
            .checked_sub(pad)
            .filter(|&i| i < size)
    }

    /// Output rows per im2col chunk, sized so a chunk stays cache resident.
    fn chunk_rows(&self) -> usize {
        (CHUNK_VALUES / (self.patch_len() * self.out_w)).clamp(1, self.out_h)
    }

    /// Unfold output rows `rows` of one sample `(in_c, h, w)` into
    /// `(in_c·k·k) × (rows.len()·out_w)`.
    fn im2col(&self, x: &[f64], rows: Range<usize>, cols: &mut [f64]) {
        let width = rows.len() * self.out_w;
        let mut row = 0;
        for c in 0..self.in_c {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for (r, oy) in rows.clone().enumerate() {
                        let line = &mut dst[r * self.out_w..(r + 1) * self.out_w];
                        match self.source(oy, ky, self.pad_top, self.h) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let src = &xc[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx, self.pad_left, self.w) {
                                        Some(ix) => src[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add the columns of output rows
    /// `rows` back into `(in_c, h, w)`.
    fn col2im(&self, cols: &[f64], rows: Range<usize>, x: &mut [f64]) {
        let width = rows.len() * self.out_w;
        let mut row = 0;
        for c in 0..self.in_c {
            let xc = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = &cols[row * width..(row + 1) * width];
                    for (r, oy) in rows.clone().enumerate() {
                        if let Some(iy) = self.source(oy, ky, self.pad_top, self.h) {
                            let line = &src[r * self.out_w..(r + 1) * self.out_w];
                            let dst = &mut xc[iy * self.w..(iy + 1) * self.w];
                            for (ox, v) in line.iter().enumerate() {
                                if let Some(ix) = self.source(ox, kx, self.pad_left, self.w) {
                                    dst[ix] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn chunks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let step = self.chunk_rows();
        (0..self.out_h)
            .step_by(step)
            .map(move |r| r..(r + step).min(self.out_h))
    }
}

/// Target size, in values, of one im2col chunk (512 KiB).
const CHUNK_VALUES: usize = 1 << 16;

pub(crate) fn conv2d_forward_raw(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernels, stride, padding)?;
    if bias.len() != g.out_c {
        return Err(Error::shape(
            "conv2d",
            format!("{} biases for {} output channels", bias.len(), g.out_c),
        ));
    }
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let in_per = g.in_c * g.h * g.w;
    let out_per = g.out_c * plane;
    let mut out = vec![0.0; g.batch * out_per];
    let x = input.data();
    let w = kernels.data();
    out.par_chunks_mut(out_per).enumerate().for_each_init(
        || vec![0.0; patch * g.chunk_rows() * g.out_w],
        |cols, (s, y)| {
            for (o, b) in bias.iter().enumerate() {
                y[o * plane..(o + 1) * plane].fill(*b);
            }
            for rows in g.chunks() {
                let width = rows.len() * g.out_w;
                g.im2col(&x[s * in_per..(s + 1) * in_per], rows.clone(), cols);
                gemm(
                    g.out_c,
                    patch,
                    width,
                    1.0,
                    w,
                    (patch, 1),
                    cols,
                    (width, 1),
                    1.0,
                    &mut y[rows.start * g.out_w..],
                    (plane, 1),
                );
            }
        },
    );
    Tensor::new(vec![g.batch, g.out_c, g.out_h, g.out_w], out)
}

pub(crate) struct ConvGradsRaw {
    pub input: Vec<f64>,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward_raw(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    upstream: &[f64],
) -> Result<ConvGradsRaw> {
    let g = ConvGeometry::new(input, kernels, stride, padding)?;
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let in_per = g.in_c * g.h * g.w;
    let out_per = g.out_c * plane;
    if upstream.len() != g.batch * out_per {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream has {} values, output has {}",
                upstream.len(),
                g.batch * out_per
            ),
        ));
    }
    let x = input.data();
    let w = kernels.data();
    let mut dx = vec![0.0; g.batch * in_per];
    let chunk = patch * g.chunk_rows() * g.out_w;
    let partials: Vec<Vec<f64>> = dx
        .par_chunks_mut(in_per)
        .enumerate()
        .map_init(
            || (vec![0.0; chunk], vec![0.0; chunk]),
            |(cols, dcols), (s, dx_s)| {
                let dy = &upstream[s * out_per..(s + 1) * out_per];
                let mut dw = vec![0.0; g.out_c * patch];
                for rows in g.chunks() {
                    let width = rows.len() * g.out_w;
                    let dy_c = &dy[rows.start * g.out_w..];
                    g.im2col(&x[s * in_per..(s + 1) * in_per], rows.clone(), cols);
                    // dW_s += dY_s · colsᵀ
                    gemm(
                        g.out_c,
                        width,
                        patch,
                        1.0,
                        dy_c,
                        (plane, 1),
                        cols,
                        (1, width),
                        1.0,
                        &mut dw,
                        (patch, 1),
                    );
                    // dcols = Wᵀ · dY_s
                    gemm(
                        patch,
                        g.out_c,
                        width,
                        1.0,
                        w,
                        (1, patch),
                        dy_c,
                        (plane, 1),
                        0.0,
                        dcols,
                        (width, 1),
                    );
                    g.col2im(dcols, rows, dx_s);
                }
                dw
            },
        )
        .collect();
    let mut dw = vec![0.0; g.out_c * patch];
    for p in &partials {
        dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let mut db = vec![0.0; g.out_c];
    for s in 0..g.batch {
        for (o, acc) in db.iter_mut().enumerate() {
            let base = s * out_per + o * plane;
            *acc += upstream[base..base + plane].iter().sum::<f64>();
        }
    }
    Ok(ConvGradsRaw {
        input: dx,
        kernels: dw,
        bias: db,
    })
}

/// Cross-correlation of a 4-D input with `params`.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_forward_raw(
        input,
        &params.kernels,
        &params.bias,
        params.stride,
        params.padding,
    )
}

/// Gradients of a convolution with respect to its input, kernels and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    let raw = conv2d_backward_raw(
        input,
        &params.kernels,
        params.stride,
        params.padding,
        upstream.data(),
    )?;
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), raw.input)?,
        kernels: Tensor::new(params.kernels.shape().to_vec(), raw.kernels)?,
        bias: raw.bias,
    })
}

/// Per-channel affine parameters and running statistics.
///
/// `momentum` is the retention factor of the running averages:
/// `running = momentum·running + (1 − momentum)·batch`. The batch variance
/// is the biased (divide-by-count) estimate, in training and in the
/// running average alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running(&mut self, stats: &ChannelStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Per-channel batch mean and biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Saved by the normalization forward passes for their backward passes.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub training: bool,
    pub batch_stats: Option<ChannelStats>,
}

fn channel_stats(x: &[f64], b: usize, c: usize, plane: usize, ch: usize) -> (f64, f64) {
    let count = (b * plane) as f64;
    let mut sum = 0.0;
    for s in 0..b {
        let base = (s * c + ch) * plane;
        sum += x[base..base + plane].iter().sum::<f64>();
    }
    let mean = sum / count;
    let mut sq = 0.0;
    for s in 0..b {
        let base = (s * c + ch) * plane;
        sq += x[base..base + plane]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>();
    }
    (mean, sq / count)
}

/// Normalizes with batch statistics (`training`) or the running averages in
/// `state`. Running averages are not touched; training-mode statistics are
/// returned in the cache for [`BatchNormState::update_running`].
pub(crate) fn batchnorm_forward_raw(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    training: bool,
) -> Result<(Tensor, NormCache)> {
    let (b, c, h, w) = input.dims4()?;
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("{c} input channels, parameters sized {}", gamma.len()),
        ));
    }
    let plane = h * w;
    let x = input.data();
    let (mean, var) = if training {
        (0..c).map(|ch| channel_stats(x, b, c, plane, ch)).unzip()
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let mut x_hat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let istd = 1.0 / (var[ch] + state.epsilon).sqrt();
        inv_std[ch] = istd;
        for s in 0..b {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean[ch]) * istd;
                x_hat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        NormCache {
            x_hat,
            inv_std,
            training,
            batch_stats: training.then_some(ChannelStats { mean, var }),
        },
    ))
}

/// Returns `(input grad, gamma grad, beta grad)`.
pub(crate) fn batchnorm_backward_raw(
    shape: &[usize],
    cache: &NormCache,
    gamma: &[f64],
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (b * plane) as f64;
    let mut dx = vec![0.0; upstream.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for s in 0..b {
            let base = (s * c + ch) * plane;
            let rows = base..base + plane;
            for (dy, xh) in upstream[rows.clone()].iter().zip(&cache.x_hat[rows]) {
                sum_dy += dy;
                sum_dy_xh += dy * xh;
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch];
        for s in 0..b {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                dx[i] = if cache.training {
                    scale * (upstream[i] - (sum_dy + cache.x_hat[i] * sum_dy_xh) / count)
                } else {
                    scale * upstream[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization over `(batch, height, width)` per channel.
///
/// Training mode normalizes with batch statistics and updates the running
/// averages in `state`; inference mode normalizes with the running averages.
pub fn batchnorm(input: &Tensor, state: &mut BatchNormState, training: bool) -> Result<Tensor> {
    let (out, cache) = batchnorm_forward_raw(input, &state.gamma, &state.beta, state, training)?;
    if let Some(stats) = &cache.batch_stats {
        state.update_running(stats);
    }
    Ok(out)
}

pub const LAYERNORM_EPSILON: f64 = 1e-5;

/// Normalizes every `(sample, channel)` plane to zero mean and unit
/// variance over its `height × width` entries. No learned affine.
pub(crate) fn layernorm_forward_raw(input: &Tensor) -> Result<(Tensor, NormCache)> {
    let (b, c, h, w) = input.dims4()?;
    let plane = h * w;
    let x = input.data();
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; b * c];
    for (p, (src, dst)) in x.chunks(plane).zip(x_hat.chunks_mut(plane)).enumerate() {
        let mean = src.iter().sum::<f64>() / plane as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let istd = 1.0 / (var + LAYERNORM_EPSILON).sqrt();
        inv_std[p] = istd;
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * istd;
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), x_hat.clone())?,
        NormCache {
            x_hat,
            inv_std,
            training: true,
            batch_stats: None,
        },
    ))
}

pub(crate) fn layernorm_backward_raw(
    plane: usize,
    cache: &NormCache,
    upstream: &[f64],
) -> Vec<f64> {
    let n = plane as f64;
    let mut dx = vec![0.0; upstream.len()];
    for (p, ((dy, xh), out)) in upstream
        .chunks(plane)
        .zip(cache.x_hat.chunks(plane))
        .zip(dx.chunks_mut(plane))
        .enumerate()
    {
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        let istd = cache.inv_std[p];
        for ((o, d), x) in out.iter_mut().zip(dy).zip(xh) {
            *o = istd * (d - (sum_dy + x * sum_dy_xh) / n);
        }
    }
    dx
}

pub fn layernorm(input: &Tensor) -> Result<Tensor> {
    layernorm_forward_raw(input).map(|(t, _)| t)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().map(|&v| v.max(0.0)).collect(),
    )
    .expect("shape preserved")
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &[f64]) -> Vec<f64> {
    input
        .data()
        .iter()
        .zip(upstream)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

fn square_planes(input: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = input.dims4()?;
    if h != w {
        return Err(Error::shape(op, format!("plane {h}x{w} is not square")));
    }
    Ok((b, c, w))
}

/// `PᵀP` for every `(sample, channel)` plane `P`.
pub fn channel_gram(input: &Tensor) -> Result<Tensor> {
    let (b, c, w) = square_planes(input, "channel_gram")?;
    let plane = w * w;
    let x = input.data();
    let mut out = vec![0.0; b * c * plane];
    out.par_chunks_mut(plane)
        .zip(x.par_chunks(plane))
        .for_each(|(g, p)| {
            gemm(w, w, w, 1.0, p, (1, w), p, (w, 1), 0.0, g, (w, 1));
        });
    Tensor::new(vec![b, c, w, w], out)
}

/// `dP = P·(U + Uᵀ)` per plane.
pub fn channel_gram_backward(input: &Tensor, upstream: &[f64]) -> Result<Vec<f64>> {
    let (b, c, w) = square_planes(input, "channel_gram_backward")?;
    let plane = w * w;
    if upstream.len() != b * c * plane {
        return Err(Error::shape(
            "channel_gram_backward",
            "upstream size mismatch",
        ));
    }
    let x = input.data();
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(plane)
        .zip(x.par_chunks(plane).zip(upstream.par_chunks(plane)))
        .for_each_init(
            || vec![0.0; plane],
            |sym, (d, (p, u))| {
                for i in 0..w {
                    for j in 0..w {
                        sym[i * w + j] = u[i * w + j] + u[j * w + i];
                    }
                }
                gemm(w, w, w, 1.0, p, (w, 1), sym, (w, 1), 0.0, d, (w, 1));
            },
        );
    Ok(dx)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..ba {
        data.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(vec![ba, ca + cb, ha, wa], data)
}

/// Splits a concatenated gradient back into its `a` and `b` parts.
pub fn split_channels(
    grad: &[f64],
    batch: usize,
    ca: usize,
    cb: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = Vec::with_capacity(batch * ca * plane);
    let mut gb = Vec::with_capacity(batch * cb * plane);
    for s in 0..batch {
        let base = s * (ca + cb) * plane;
        ga.extend_from_slice(&grad[base..base + ca * plane]);
        gb.extend_from_slice(&grad[base + ca * plane..base + (ca + cb) * plane]);
    }
    (ga, gb)
}

/// `(B, C, H, W) → (B, C)` spatial means.
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let plane = h * w;
    let data = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![b, c], data)
}

pub fn global_average_pool_backward(input_shape: &[usize], upstream: &[f64]) -> Vec<f64> {
    let plane = input_shape[2] * input_shape[3];
    let scale = 1.0 / plane as f64;
    upstream
        .iter()
        .flat_map(|g| std::iter::repeat_n(g * scale, plane))
        .collect()
}

/// `(B, in) → (B, out)` affine map; `weights` is `out × in`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (b, i) = input.dims2()?;
    let (o, wi) = weights.dims2()?;
    if wi != i || bias.len() != o {
        return Err(Error::shape(
            "dense",
            format!(
                "input width {i}, weights {:?}, bias {}",
                weights.shape(),
                bias.len()
            ),
        ));
    }
    let mut out: Vec<f64> = (0..b).flat_map(|_| bias.iter().cloned()).collect();
    gemm(
        b,
        i,
        o,
        1.0,
        input.data(),
        (i, 1),
        weights.data(),
        (1, i),
        1.0,
        &mut out,
        (o, 1),
    );
    Tensor::new(vec![b, o], out)
}

/// Returns `(input grad, weight grad, bias grad)`.
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (b, i) = input.dims2()?;
    let (o, _) = weights.dims2()?;
    let mut dx = vec![0.0; b * i];
    gemm(
        b,
        o,
        i,
        1.0,
        upstream,
        (o, 1),
        weights.data(),
        (i, 1),
        0.0,
        &mut dx,
        (i, 1),
    );
    let mut dw = vec![0.0; o * i];
    gemm(
        o,
        b,
        i,
        1.0,
        upstream,
        (1, o),
        input.data(),
        (i, 1),
        0.0,
        &mut dw,
        (i, 1),
    );
    let mut db = vec![0.0; o];
    for row in upstream.chunks(o) {
        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }
    Ok((dx, dw, db))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy of softmax probabilities against one-hot targets,
/// with the combined gradient `(P − P̂)/N` with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if targets.shape() != logits.shape() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!(
                "targets {:?} vs logits {:?}",
                targets.shape(),
                logits.shape()
            ),
        ));
    }
    for (r, row) in targets.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::invalid(format!("target row {r} is not one-hot")));
        }
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for ((z, t), g) in logits
        .data()
        .chunks(k)
        .zip(targets.data().chunks(k))
        .zip(grad.chunks_mut(k))
    {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for j in 0..k {
            let log_p = z[j] - max - log_sum;
            if t[j] == 1.0 {
                loss -= log_p;
            }
            g[j] = (log_p.exp() - t[j]) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// One-hot rows for `labels` over `classes` classes.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!(
                "label {l} out of {classes} classes"
            )));
        }
        data[r * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition of cross-correlation.
    fn reference_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let (b, ci, h, w) = x.dims4().unwrap();
        let (co, _, k, _) = p.kernels.dims4().unwrap();
        let (oh, pt) = p.padding.resolve(h, k, p.stride).unwrap();
        let (ow, pl) = p.padding.resolve(w, k, p.stride).unwrap();
        let mut out = Tensor::zeros(&[b, co, oh, ow]);
        for s in 0..b {
            for o in 0..co {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = p.bias[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * p.stride + ky) as isize - pt as isize;
                                    let ix = (xo * p.stride + kx) as isize - pl as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += p.kernels.data()[((o * ci + c) * k + ky) * k + kx]
                                        * x.data()
                                            [((s * ci + c) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_ones_valid_is_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let p = ConvParams::new(
            Tensor::full(&[1, 1, 3, 3], 1.0),
            vec![0.0],
            1,
            Padding::Valid,
        )
        .unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_is_exact_identity() {
        let x = random(&[2, 1, 7, 7], 1);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let p = ConvParams::new(k, vec![0.0], 1, Padding::Same).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv_matches_reference_loops() {
        let x = random(&[1, 2, 8, 8], 2);
        for (stride, padding, k) in [
            (2, Padding::Same, 3),
            (1, Padding::Same, 5),
            (2, Padding::Valid, 3),
            (1, Padding::Valid, 3),
        ] {
            let p = ConvParams::new(
                random(&[3, 2, k, k], 3),
                vec![0.1, -0.2, 0.3],
                stride,
                padding,
            )
            .unwrap();
            let y = conv2d_forward(&x, &p).unwrap();
            let r = reference_conv(&x, &p);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn same_padding_output_sizes() {
        assert_eq!(Padding::Same.resolve(64, 3, 2).unwrap(), (32, 0));
        assert_eq!(Padding::Same.resolve(65, 3, 2).unwrap(), (33, 1));
        assert_eq!(Padding::Same.resolve(64, 5, 1).unwrap(), (64, 2));
        assert!(Padding::Valid.resolve(2, 3, 1).is_err());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let p = ConvParams::new(Tensor::zeros(&[1, 3, 3, 3]), vec![0.0], 1, Padding::Same).unwrap();
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_backward_zero_upstream_and_bias_sum() {
        let x = random(&[2, 2, 5, 5], 4);
        let p = ConvParams::new(random(&[3, 2, 3, 3], 5), vec![0.0; 3], 1, Padding::Same).unwrap();
        let zero = Tensor::zeros(&[2, 3, 5, 5]);
        let g = conv2d_backward(&x, &p, &zero).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernels.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));

        let up = random(&[2, 3, 5, 5], 6);
        let g = conv2d_backward(&x, &p, &up).unwrap();
        for o in 0..3 {
            let expect: f64 = (0..2)
                .map(|s| {
                    up.data()[(s * 3 + o) * 25..(s * 3 + o + 1) * 25]
                        .iter()
                        .sum::<f64>()
                })
                .sum();
            assert!((g.bias[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let x = random(&[4, 3, 5, 5], 7);
        let mut st = BatchNormState::new(3);
        let y = batchnorm(&x, &mut st, true).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_stats(y.data(), 4, 3, 25, ch);
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-3, "{v}"); // epsilon shrinks it slightly
        }
        assert!(st.running_var.iter().all(|&v| v >= 0.0));
        assert!(st.running_mean.iter().any(|&m| m != 0.0));

        let mut st2 = BatchNormState::new(3);
        st2.gamma = vec![2.0; 3];
        st2.beta = vec![3.0; 3];
        let y2 = batchnorm(&x, &mut st2, true).unwrap();
        for (a, b) in y2.data().iter().zip(y.data()) {
            assert!((a - (2.0 * b + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_single_sample_constant_channel_is_finite() {
        let x = Tensor::full(&[1, 1, 2, 2], 5.0);
        let mut st = BatchNormState::new(1);
        let y = batchnorm(&x, &mut st, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut st = BatchNormState::new(1);
        st.running_mean = vec![1.0];
        st.running_var = vec![4.0 - st.epsilon];
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 5.0]).unwrap();
        let y = batchnorm(&x, &mut st, false).unwrap();
        assert!((y.data()[0]).abs() < 1e-15);
        assert!((y.data()[1] - 2.0).abs() < 1e-12);
        assert_eq!(st.running_mean, vec![1.0]);
    }

    #[test]
    fn layernorm_examples() {
        let y = layernorm(&Tensor::full(&[1, 2, 3, 3], 4.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = layernorm(&Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        let s = 1.0 / (1.0 + LAYERNORM_EPSILON).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-15 && (y.data()[1] - s).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn relu_and_mask() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&x, &[5.0, 5.0, 5.0]), vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn channel_gram_identity_and_symmetry() {
        let mut x = Tensor::zeros(&[1, 1, 3, 3]);
        for i in 0..3 {
            x.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(channel_gram(&x).unwrap(), x);
        let x = random(&[2, 3, 6, 6], 8);
        let g = channel_gram(&x).unwrap();
        for p in g.data().chunks(36) {
            for i in 0..6 {
                for j in 0..6 {
                    assert!(
                        (p[i * 6 + j] - p[j * 6 + i]).abs() <= 1e-12 * p[i * 6 + i].abs().max(1.0)
                    );
                }
            }
        }
        assert!(channel_gram(&Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = random(&[2, 3, 4, 4], 9);
        let b = random(&[2, 5, 4, 4], 10);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 8, 4, 4]);
        assert_eq!(c.slice_channels(0, 3).unwrap(), a);
        assert_eq!(c.slice_channels(3, 8).unwrap(), b);
        let (ga, gb) = split_channels(c.data(), 2, 3, 5, 16);
        assert_eq!(ga, a.data());
        assert_eq!(gb, b.data());
        assert!(concat_channels(&a, &random(&[2, 5, 4, 3], 1)).is_err());
    }

    #[test]
    fn gap_examples() {
        let y = global_average_pool(&Tensor::full(&[1, 1, 3, 3], 2.5)).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let y = global_average_pool(&Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[2.5]);
        assert_eq!(
            global_average_pool_backward(&[1, 1, 2, 2], &[4.0]),
            vec![1.0; 4]
        );
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::new(vec![1, 2], vec![3.0, -4.0]).unwrap();
        let id = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(dense(&x, &id, &[0.0, 0.0]).unwrap().data(), x.data());
        // [[1,2],[3,4]]·[3,-4] + [1,1] = [-5+1, -7+1]
        let w = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(dense(&x, &w, &[1.0, 1.0]).unwrap().data(), &[-4.0, -6.0]);
    }

    #[test]
    fn softmax_ce_examples() {
        let z = Tensor::zeros(&[2, 4]);
        let t = one_hot(&[1, 3], 4).unwrap();
        let (loss, _) = softmax_cross_entropy(&z, &t).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);

        let z = Tensor::new(vec![1, 2], vec![20.0, -20.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&z, &one_hot(&[0], 2).unwrap()).unwrap();
        assert!((0.0..1e-15).contains(&loss));
        assert!(g.data()[0] <= 0.0);

        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(softmax_cross_entropy(&z, &bad).is_err());
        assert!(one_hot(&[2], 2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariance() {
        let z = random(&[5, 7], 11);
        let p = softmax(&z).unwrap();
        for row in p.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = Tensor::from_fn(&[5, 7], |i| z.data()[i] + 123.0);
        let t = one_hot(&[0, 1, 2, 3, 4], 7).unwrap();
        let (a, _) = softmax_cross_entropy(&z, &t).unwrap();
        let (b, _) = softmax_cross_entropy(&shifted, &t).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}
