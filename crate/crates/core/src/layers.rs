//! Differentiable building blocks: strided convolution, transposed
//! convolution, batch normalization, gated linear units and output
//! nonlinearities. Every forward has a hand-written backward.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Probability clamp used before every log.
pub const PROB_CLAMP: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// C = alpha * op(A) * op(B) + beta * C for row-major operands.
/// op(A) is m×k, op(B) is k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds views of slices whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry between a "large" image (channels, height, width)
/// and the output grid of a convolution over it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, img: &[f64], out: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut out[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy as usize >= self.h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            *v = if ix < 0 || ix as usize >= self.w { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of column buffer back onto the image (adjoint of im2col).
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output length of a strided convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (len + 2 * p).checked_sub(k).map(|r| r / s + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        match (conv_out_len(h, kh, sh, ph), conv_out_len(w, kw, sw, pw)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::Shape(alloc::format!(
                "input {h}x{w} too small for kernel {kh}x{kw}"
            ))),
        }
    }

    fn window(&self, h: usize, w: usize) -> Result<Window> {
        let (oh, ow) = self.out_size(h, w)?;
        Ok(Window {
            channels: self.in_ch,
            h,
            w,
            kh: self.spec.kernel.0,
            kw: self.spec.kernel.1,
            sh: self.spec.stride.0,
            sw: self.spec.stride.1,
            ph: self.spec.padding.0,
            pw: self.spec.padding.1,
            oh,
            ow,
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = x.shape();
        if c != self.in_ch {
            return Err(Error::Shape(alloc::format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let win = self.window(h, w)?;
        let (k, p) = (win.rows(), win.cols());
        let weight = ps.get(self.weight);
        let bias = ps.get(self.bias);
        let mut out = Tensor::zeros([b, self.out_ch, win.oh, win.ow]);
        let mut cols = vec![0.0; k * p];
        for n in 0..b {
            win.im2col(x.item(n), &mut cols);
            let y = out.item_mut(n);
            for (o, row) in y.chunks_exact_mut(p).enumerate() {
                row.fill(bias[o]);
            }
            gemm(self.out_ch, k, p, weight, false, &cols, false, 1.0, y);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient when asked.
    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        dy: &Tensor,
        grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Tensor> {
        let [b, _, h, w] = x.shape();
        let win = self.window(h, w).expect("shape validated in forward");
        let (k, p) = (win.rows(), win.cols());
        let weight = ps.get(self.weight);
        let mut cols = vec![0.0; k * p];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut grads = grads;
        for n in 0..b {
            let dyn_ = dy.item(n);
            if let Some(g) = grads.as_deref_mut() {
                win.im2col(x.item(n), &mut cols);
                gemm(self.out_ch, p, k, dyn_, false, &cols, true, 1.0, g.get_mut(self.weight));
                let db = g.get_mut(self.bias);
                for (o, row) in dyn_.chunks_exact(p).enumerate() {
                    db[o] += row.iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(k, self.out_ch, p, weight, true, dyn_, false, 0.0, &mut cols);
                win.col2im(&cols, dx.item_mut(n));
            }
        }
        dx
    }
}

/// Transposed convolution; weight layout is (in_ch, out_ch, kh, kw).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub spec: ConvSpec,
    pub output_padding: (usize, usize),
}

impl ConvTranspose2d {
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |len: usize, k: usize, s: usize, p: usize, op: usize| {
            ((len - 1) * s + k + op).checked_sub(2 * p)
        };
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let (oph, opw) = self.output_padding;
        match (f(h, kh, sh, ph, oph), f(w, kw, sw, pw, opw)) {
            (Some(a), Some(b)) if h > 0 && w > 0 && a > 0 && b > 0 => Ok((a, b)),
            _ => Err(Error::Shape(alloc::format!("transposed conv cannot expand {h}x{w}"))),
        }
    }

    fn window(&self, h: usize, w: usize) -> Result<Window> {
        let (bh, bw) = self.out_size(h, w)?;
        Ok(Window {
            channels: self.out_ch,
            h: bh,
            w: bw,
            kh: self.spec.kernel.0,
            kw: self.spec.kernel.1,
            sh: self.spec.stride.0,
            sw: self.spec.stride.1,
            ph: self.spec.padding.0,
            pw: self.spec.padding.1,
            oh: h,
            ow: w,
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = x.shape();
        if c != self.in_ch {
            return Err(Error::Shape(alloc::format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let win = self.window(h, w)?;
        let (k, p) = (win.rows(), win.cols());
        let weight = ps.get(self.weight);
        let bias = ps.get(self.bias);
        let mut out = Tensor::zeros([b, self.out_ch, win.h, win.w]);
        let plane = win.h * win.w;
        let mut cols = vec![0.0; k * p];
        for n in 0..b {
            gemm(k, self.in_ch, p, weight, true, x.item(n), false, 0.0, &mut cols);
            let y = out.item_mut(n);
            for (o, chunk) in y.chunks_exact_mut(plane).enumerate() {
                chunk.fill(bias[o]);
            }
            win.col2im(&cols, y);
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        dy: &Tensor,
        grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Tensor> {
        let [b, _, h, w] = x.shape();
        let win = self.window(h, w).expect("shape validated in forward");
        let (k, p) = (win.rows(), win.cols());
        let plane = win.h * win.w;
        let weight = ps.get(self.weight);
        let mut cols = vec![0.0; k * p];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut grads = grads;
        for n in 0..b {
            let dyn_ = dy.item(n);
            win.im2col(dyn_, &mut cols);
            if let Some(g) = grads.as_deref_mut() {
                gemm(self.in_ch, p, k, x.item(n), false, &cols, true, 1.0, g.get_mut(self.weight));
                let db = g.get_mut(self.bias);
                for (o, chunk) in dyn_.chunks_exact(plane).enumerate() {
                    db[o] += chunk.iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(self.in_ch, k, p, weight, false, &cols, false, 0.0, dx.item_mut(n));
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// running = momentum * running + (1 - momentum) * batch
    pub fn update(&mut self, batch: &RunningStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

/// What the batch-norm backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
    /// Biased batch statistics (train mode only).
    pub batch_stats: Option<RunningStats>,
}

impl BatchNorm2d {
    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        mode: Mode,
        running: &RunningStats,
    ) -> Result<(Tensor, BatchNormCache)> {
        let [b, c, h, w] = x.shape();
        if c != self.channels {
            return Err(Error::Shape(alloc::format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let plane = h * w;
        let count = (b * plane) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for n in 0..b {
                    let item = x.item(n);
                    for ch in 0..c {
                        mean[ch] += item[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for n in 0..b {
                    let item = x.item(n);
                    for ch in 0..c {
                        let m = mean[ch];
                        var[ch] += item[ch * plane..(ch + 1) * plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
            Mode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for n in 0..b {
            let src = x.item(n);
            let xh = xhat.item_mut(n);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (d, s) in xh[r.clone()].iter_mut().zip(&src[r]) {
                    *d = (s - mean[ch]) * inv_std[ch];
                }
            }
            let xh = xhat.item(n);
            let dst = y.item_mut(n);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (d, s) in dst[r.clone()].iter_mut().zip(&xh[r]) {
                    *d = gamma[ch] * s + beta[ch];
                }
            }
        }
        let batch_stats = (mode == Mode::Train).then_some(RunningStats { mean, var });
        Ok((y, BatchNormCache { xhat, inv_std, mode, batch_stats }))
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &BatchNormCache,
        dy: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let [b, c, h, w] = dy.shape();
        let plane = h * w;
        let count = (b * plane) as f64;
        let gamma = ps.get(self.gamma);
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for n in 0..b {
            let d = dy.item(n);
            let xh = cache.xhat.item(n);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for (g, x) in d[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * x;
                }
            }
        }
        if let Some(g) = grads {
            g.get_mut(self.gamma).iter_mut().zip(&sum_dy_xhat).for_each(|(a, v)| *a += v);
            g.get_mut(self.beta).iter_mut().zip(&sum_dy).for_each(|(a, v)| *a += v);
        }
        let mut dx = Tensor::zeros(dy.shape());
        for n in 0..b {
            let d = dy.item(n);
            let xh = cache.xhat.item(n);
            let out = dx.item_mut(n);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                let scale = gamma[ch] * cache.inv_std[ch];
                match cache.mode {
                    Mode::Eval => {
                        for (o, g) in out[r.clone()].iter_mut().zip(&d[r]) {
                            *o = scale * g;
                        }
                    }
                    Mode::Train => {
                        let mdy = sum_dy[ch] / count;
                        let mdyx = sum_dy_xhat[ch] / count;
                        for ((o, g), x) in out[r.clone()].iter_mut().zip(&d[r.clone()]).zip(&xh[r]) {
                            *o = scale * (g - mdy - x * mdyx);
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Gated linear unit over channels: first half times sigmoid of second half.
pub fn glu_forward(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.shape();
    if c % 2 != 0 {
        return Err(Error::Shape(alloc::format!("GLU needs an even channel count, got {c}")));
    }
    let half = c / 2 * h * w;
    let mut out = Tensor::zeros([b, c / 2, h, w]);
    for n in 0..b {
        let src = x.item(n);
        let (lin, gate) = src.split_at(half);
        for ((o, a), g) in out.item_mut(n).iter_mut().zip(lin).zip(gate) {
            *o = a * sigmoid(*g);
        }
    }
    Ok(out)
}

pub fn glu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let [b, c, _, _] = x.shape();
    let half = c / 2 * x.height() * x.width();
    let mut dx = Tensor::zeros(x.shape());
    for n in 0..b {
        let src = x.item(n);
        let (lin, gate) = src.split_at(half);
        let d = dy.item(n);
        let out = dx.item_mut(n);
        let (dlin, dgate) = out.split_at_mut(half);
        for i in 0..half {
            let s = sigmoid(gate[i]);
            dlin[i] = d[i] * s;
            dgate[i] = d[i] * lin[i] * s * (1.0 - s);
        }
    }
    dx
}

/// Clamped sigmoid probabilities.
pub fn sigmoid_probs(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|&z| sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        .collect()
}

/// Chain rule through [`sigmoid_probs`]; the clamp has zero derivative.
pub fn sigmoid_probs_backward(logits: &[f64], dprobs: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .zip(dprobs)
        .map(|(&z, &g)| {
            let s = sigmoid(z);
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&s) {
                0.0
            } else {
                g * s * (1.0 - s)
            }
        })
        .collect()
}

/// Softmax over the channel axis of a (B, N, 1, S) logit map; returns probabilities
/// laid out as [batch][segment][class].
pub fn segment_softmax(logits: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let [b, n_cls, h, s] = logits.shape();
    let segments = h * s;
    (0..b)
        .map(|n| {
            let item = logits.item(n);
            (0..segments)
                .map(|seg| {
                    let z: Vec<f64> = (0..n_cls).map(|k| item[k * segments + seg]).collect();
                    softmax(&z)
                })
                .collect()
        })
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| libm::exp(v - max)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Backward of [`segment_softmax`] given dL/dp in the same nested layout.
pub fn segment_softmax_backward(probs: &[Vec<Vec<f64>>], dprobs: &[Vec<Vec<f64>>], shape: [usize; 4]) -> Tensor {
    let [b, n_cls, h, s] = shape;
    let segments = h * s;
    let mut dz = Tensor::zeros(shape);
    for n in 0..b {
        let out = dz.item_mut(n);
        for seg in 0..segments {
            let p = &probs[n][seg];
            let dp = &dprobs[n][seg];
            let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            for k in 0..n_cls {
                out[k * segments + seg] = p[k] * (dp[k] - dot);
            }
        }
    }
    dz
}
