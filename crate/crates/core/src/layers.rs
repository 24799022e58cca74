//! Layer kernels on `[N, C, H, W]` batches.
//!
//! Every differentiable forward returns its output together with a cache that the
//! paired backward consumes by value. Max-pool returns [`PoolIndices`], which serve
//! both as the pool's backward cache and as the routing table for max-unpool.

use crate::error::{Error, Result};
use crate::tensor::{Prng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Infer,
}

/// 3×3 convolution parameters: `weight` is `[out_ch, in_ch, 3, 3]`, `bias` is `[out_ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self { weight: Tensor::zeros(&[out_ch, in_ch, 3, 3]), bias: Tensor::zeros(&[out_ch]) }
    }

    /// He-normal weights with std `sqrt(2 / (in_ch * 9))`, zero bias.
    pub fn he(in_ch: usize, out_ch: usize, prng: &mut Prng) -> Self {
        let std = (2.0 / (in_ch * 9) as f64).sqrt();
        let weight = prng.normal_tensor(&[out_ch, in_ch, 3, 3], 0.0, std).expect("nonzero channels");
        Self { weight, bias: Tensor::zeros(&[out_ch]) }
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BnParams {
    /// `gamma = 1`, `beta = 0`, running mean 0 and running variance 1.
    pub fn new(ch: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: Tensor::new(&[ch], 1.0).expect("nonzero channels"),
            beta: Tensor::zeros(&[ch]),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::new(&[ch], 1.0).expect("nonzero channels"),
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ConvCache {
    input: Tensor,
    weight: Tensor,
}

#[derive(Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Rows `y` for which `y + d` stays inside `0..len`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// 3×3 cross-correlation, zero padding 1, stride 1.
pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<(Tensor, ConvCache)> {
    let (n, cin, h, w) = x.dims4()?;
    if p.in_ch() != cin {
        return Err(Error::shape(format!("conv expects {} input channels, got {cin}", p.in_ch())));
    }
    let cout = p.out_ch();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let xs = x.data();
    let ws = p.weight.data();
    let bs = p.bias.data();
    let os = out.data_mut();
    for b in 0..n {
        for co in 0..cout {
            let dst = &mut os[(b * cout + co) * plane..][..plane];
            dst.fill(bs[co]);
            for ci in 0..cin {
                let src = &xs[(b * cin + ci) * plane..][..plane];
                let kern = &ws[(co * cin + ci) * 9..][..9];
                for kh in 0..3 {
                    let dy = kh as isize - 1;
                    let (ylo, yhi) = valid_range(h, dy);
                    for kw in 0..3 {
                        let dx = kw as isize - 1;
                        let (xlo, xhi) = valid_range(w, dx);
                        let k = kern[kh * 3 + kw];
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let s0 = (sy * w) as isize + dx;
                            let srow = &src[(s0 + xlo as isize) as usize..(s0 + xhi as isize) as usize];
                            let drow = &mut dst[y * w + xlo..y * w + xhi];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, ConvCache { input: x.clone(), weight: p.weight.clone() }))
}

pub fn conv2d_backward(cache: ConvCache, grad_out: &Tensor) -> Result<ConvGrads> {
    let (n, cin, h, w) = cache.input.dims4()?;
    let cout = cache.weight.shape()[0];
    if grad_out.shape() != [n, cout, h, w] {
        return Err(Error::shape(format!(
            "conv backward: grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, cout, h, w]
        )));
    }
    let plane = h * w;
    let mut gin = Tensor::zeros(&[n, cin, h, w]);
    let mut gw = Tensor::zeros(cache.weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let xs = cache.input.data();
    let ws = cache.weight.data();
    let gs = grad_out.data();
    {
        let gbs = gb.data_mut();
        for b in 0..n {
            for co in 0..cout {
                gbs[co] += gs[(b * cout + co) * plane..][..plane].iter().sum::<f64>();
            }
        }
    }
    let gis = gin.data_mut();
    let gws = gw.data_mut();
    for b in 0..n {
        for co in 0..cout {
            let g = &gs[(b * cout + co) * plane..][..plane];
            for ci in 0..cin {
                let src = &xs[(b * cin + ci) * plane..][..plane];
                let gsrc = &mut gis[(b * cin + ci) * plane..][..plane];
                let kbase = (co * cin + ci) * 9;
                for kh in 0..3 {
                    let dy = kh as isize - 1;
                    let (ylo, yhi) = valid_range(h, dy);
                    for kw in 0..3 {
                        let dx = kw as isize - 1;
                        let (xlo, xhi) = valid_range(w, dx);
                        let k = ws[kbase + kh * 3 + kw];
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let s0 = ((sy * w) as isize + dx + xlo as isize) as usize;
                            let s1 = s0 + (xhi - xlo);
                            let grow = &g[y * w + xlo..y * w + xhi];
                            for (gv, s) in grow.iter().zip(&src[s0..s1]) {
                                acc += gv * s;
                            }
                            for (gi, gv) in gsrc[s0..s1].iter_mut().zip(grow) {
                                *gi += k * gv;
                            }
                        }
                        gws[kbase + kh * 3 + kw] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: gin, weight: gw, bias: gb })
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    mode: Mode,
}

#[derive(Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Per-channel normalization. In train mode the batch mean and population variance
/// over `(N, H, W)` are used and folded into the running statistics with `momentum`.
pub fn batchnorm_forward(x: &Tensor, p: &mut BnParams, mode: Mode) -> Result<(Tensor, BnCache)> {
    let (y, cache, stats) = batchnorm_apply(x, p, mode)?;
    if let Some((mean, var)) = stats {
        let m = p.momentum;
        for (r, b) in p.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in p.running_var.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
    Ok((y, cache))
}

/// Forward without touching running statistics. Returns the batch `(mean, var)` in train mode.
#[allow(clippy::type_complexity)]
pub fn batchnorm_apply(
    x: &Tensor,
    p: &BnParams,
    mode: Mode,
) -> Result<(Tensor, BnCache, Option<(Vec<f64>, Vec<f64>)>)> {
    let (n, c, h, w) = x.dims4()?;
    if p.channels() != c {
        return Err(Error::shape(format!("batch norm expects {} channels, got {c}", p.channels())));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let xs = x.data();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xs[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for b in 0..n {
                    v += xs[(b * c + ch) * plane..][..plane].iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var)
        }
        Mode::Infer => (p.running_mean.data().to_vec(), p.running_var.data().to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let (gamma, beta) = (p.gamma.data(), p.beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let src = &xs[off..off + plane];
            let xh = &mut x_hat.data_mut()[off..off + plane];
            for (d, s) in xh.iter_mut().zip(src) {
                *d = (s - mean[ch]) * inv_std[ch];
            }
            let yd = &mut y.data_mut()[off..off + plane];
            for (d, s) in yd.iter_mut().zip(&x_hat.data()[off..off + plane]) {
                *d = gamma[ch] * s + beta[ch];
            }
        }
    }
    let cache = BnCache { x_hat, inv_std, gamma: gamma.to_vec(), mode };
    let stats = (mode == Mode::Train).then_some((mean, var));
    Ok((y, cache, stats))
}

pub fn batchnorm_backward(cache: BnCache, grad_out: &Tensor) -> Result<BnGrads> {
    if !grad_out.same_shape(&cache.x_hat) {
        return Err(Error::shape(format!(
            "batch norm backward: grad shape {:?}, expected {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let (n, c, h, w) = cache.x_hat.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let gs = grad_out.data();
    let xh = cache.x_hat.data();
    let mut gin = Tensor::zeros(grad_out.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for (g, x) in gs[off..off + plane].iter().zip(&xh[off..off + plane]) {
                sg += g;
                sgx += g * x;
            }
        }
        ggamma.data_mut()[ch] = sgx;
        gbeta.data_mut()[ch] = sg;
        let gamma = cache.gamma[ch];
        let inv_std = cache.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * plane;
            let dst = &mut gin.data_mut()[off..off + plane];
            match cache.mode {
                Mode::Train => {
                    let scale = gamma * inv_std / count;
                    for ((d, g), x) in dst.iter_mut().zip(&gs[off..off + plane]).zip(&xh[off..off + plane]) {
                        *d = scale * (count * g - sg - x * sgx);
                    }
                }
                Mode::Infer => {
                    for (d, g) in dst.iter_mut().zip(&gs[off..off + plane]) {
                        *d = gamma * inv_std * g;
                    }
                }
            }
        }
    }
    Ok(BnGrads { input: gin, gamma: ggamma, beta: gbeta })
}

// ---------------------------------------------------------------------------
// ReLU / sigmoid
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu(x: &Tensor) -> (Tensor, ReluCache) {
    let active = x.data().iter().map(|&v| v > 0.0).collect();
    // NaN passes through so that divergence stays visible downstream
    (x.map(|v| if v < 0.0 { 0.0 } else { v }), ReluCache { active, shape: x.shape().to_vec() })
}

/// Gradient passes only where the input was strictly positive.
pub fn relu_backward(cache: ReluCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::shape("relu backward: grad shape mismatch"));
    }
    let data = grad_out.data().iter().zip(&cache.active).map(|(&g, &a)| if a { g } else { 0.0 }).collect();
    Tensor::from_vec(&cache.shape, data)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
pub struct SigmoidCache {
    y: Tensor,
}

pub fn sigmoid(x: &Tensor) -> (Tensor, SigmoidCache) {
    let y = x.map(sigmoid_scalar);
    (y.clone(), SigmoidCache { y })
}

pub fn sigmoid_backward(cache: SigmoidCache, grad_out: &Tensor) -> Result<Tensor> {
    if !grad_out.same_shape(&cache.y) {
        return Err(Error::shape("sigmoid backward: grad shape mismatch"));
    }
    let data = grad_out.data().iter().zip(cache.y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
    Tensor::from_vec(cache.y.shape(), data)
}

// ---------------------------------------------------------------------------
// Max pooling / unpooling
// ---------------------------------------------------------------------------

/// Winning positions of a 2×2 stride-2 max-pool: for each output cell, the flat
/// row-major index of the winner within its channel's `in_h × in_w` input plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    idx: Vec<usize>,
}

impl PoolIndices {
    /// Wrap raw indices, e.g. ones read back from disk. Layout is checked here;
    /// window membership is checked when the indices are used.
    pub fn from_raw(batch: usize, channels: usize, in_h: usize, in_w: usize, idx: Vec<usize>) -> Result<Self> {
        if !in_h.is_multiple_of(2) || !in_w.is_multiple_of(2) {
            return Err(Error::shape(format!("pool input {in_h}x{in_w} must have even dims")));
        }
        if idx.len() != batch * channels * (in_h / 2) * (in_w / 2) {
            return Err(Error::CorruptIndices(format!(
                "{} indices for {batch}x{channels}x{in_h}x{in_w} input",
                idx.len()
            )));
        }
        Ok(Self { batch, channels, in_h, in_w, idx })
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.in_h / 2, self.in_w / 2]
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.in_h, self.in_w]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }

    /// Check every index lies inside its own 2×2 source window.
    fn validate(&self) -> Result<()> {
        let (oh, ow) = (self.in_h / 2, self.in_w / 2);
        for (k, &i) in self.idx.iter().enumerate() {
            let cell = k % (oh * ow);
            let (oy, ox) = (cell / ow, cell % ow);
            let (y, x) = (i / self.in_w, i % self.in_w);
            if i >= self.in_h * self.in_w || y / 2 != oy || x / 2 != ox {
                return Err(Error::CorruptIndices(format!(
                    "index {i} at output cell ({oy},{ox}) is outside its 2x2 window"
                )));
            }
        }
        Ok(())
    }
}

/// 2×2 window, stride 2. Ties go to the smallest flat index.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max-pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0usize; n * c * oh * ow];
    let xs = x.data();
    for p in 0..n * c {
        let src = &xs[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out.data_mut()[o] = src[best];
                idx[o] = best;
            }
        }
    }
    Ok((out, PoolIndices { batch: n, channels: c, in_h: h, in_w: w, idx }))
}

/// Scatter `v` into a zero map of size `out_h × out_w` at the stored winner positions.
pub fn maxunpool2_forward(v: &Tensor, idx: &PoolIndices, out_h: usize, out_w: usize) -> Result<Tensor> {
    if (idx.in_h, idx.in_w) != (out_h, out_w) {
        return Err(Error::CorruptIndices(format!(
            "indices recorded for {}x{} input, unpool target is {out_h}x{out_w}",
            idx.in_h, idx.in_w
        )));
    }
    if v.shape() != idx.output_shape() {
        return Err(Error::shape(format!("unpool input {:?}, indices expect {:?}", v.shape(), idx.output_shape())));
    }
    idx.validate()?;
    let (oh, ow) = (out_h / 2, out_w / 2);
    let mut out = Tensor::zeros(&idx.input_shape());
    let plane = out_h * out_w;
    for p in 0..idx.batch * idx.channels {
        let vs = &v.data()[p * oh * ow..][..oh * ow];
        let is = &idx.idx[p * oh * ow..][..oh * ow];
        let dst = &mut out.data_mut()[p * plane..][..plane];
        for (&val, &i) in vs.iter().zip(is) {
            dst[i] = val;
        }
    }
    Ok(out)
}

/// Route each pooled gradient to its winner.
pub fn maxpool2_backward(idx: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != idx.output_shape() {
        return Err(Error::shape(format!(
            "max-pool backward: grad {:?}, expected {:?}",
            grad_out.shape(),
            idx.output_shape()
        )));
    }
    maxunpool2_forward(grad_out, idx, idx.in_h, idx.in_w)
}

/// Gather the gradient at the scattered positions.
pub fn maxunpool2_backward(idx: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != idx.input_shape() {
        return Err(Error::shape(format!(
            "max-unpool backward: grad {:?}, expected {:?}",
            grad_out.shape(),
            idx.input_shape()
        )));
    }
    let plane = idx.in_h * idx.in_w;
    let cells = plane / 4;
    let mut out = Tensor::zeros(&idx.output_shape());
    for p in 0..idx.batch * idx.channels {
        let g = &grad_out.data()[p * plane..][..plane];
        let is = &idx.idx[p * cells..][..cells];
        for (d, &i) in out.data_mut()[p * cells..][..cells].iter_mut().zip(is) {
            *d = g[i];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Channel softmax
// ---------------------------------------------------------------------------

/// Softmax over the channel axis at every pixel, max-subtracted. Inference only.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let os = out.data_mut();
    let mut buf = vec![0.0; c];
    for b in 0..n {
        let base = b * c * plane;
        for px in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (ch, slot) in buf.iter_mut().enumerate() {
                *slot = xs[base + ch * plane + px];
                max = max.max(*slot);
            }
            let mut sum = 0.0;
            for slot in buf.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            for (ch, slot) in buf.iter().enumerate() {
                os[base + ch * plane + px] = slot / sum;
            }
        }
    }
    Ok(out)
}
