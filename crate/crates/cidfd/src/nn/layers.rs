//! Individual layers. Forward passes come in a caching training variant and
//! a pure inference variant; backward passes consume the caches.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureMap, Slot};
use crate::error::{Error, Result};

/// 2-D convolution. Weights are stored flattened as
/// `(c_out, c_in * kh * kw)` so the forward pass is a single GEMM against
/// the im2col matrix.
pub struct Conv2d {
    weight: Array2<f32>,
    bias: Array1<f32>,
    grad_w: Array2<f32>,
    grad_b: Array1<f32>,
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cache: Option<FeatureMap>,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // He initialization for ReLU networks.
        let fan_in = (c_in * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array2::from_shape_fn((c_out, c_in * k * k), |_| std * normal(rng));
        Self {
            weight,
            bias: Array1::zeros(c_out),
            grad_w: Array2::zeros((c_out, c_in * k * k)),
            grad_b: Array1::zeros(c_out),
            c_in,
            c_out,
            kh: k,
            kw: k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn run(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels() != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.c_in,
                x.channels()
            )));
        }
        if x.h + 2 * self.pad < self.kh || x.w + 2 * self.pad < self.kw {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} too small for kernel {}x{} with pad {}",
                x.h, x.w, self.kh, self.kw, self.pad
            )));
        }
        let (ho, wo) = self.out_hw(x.h, x.w);
        let cols = im2col(x, self.kh, self.kw, self.stride, self.pad, ho, wo);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        FeatureMap::new(out, x.n, ho, wo)
    }

    pub fn forward_train(&mut self, x: FeatureMap) -> Result<FeatureMap> {
        let y = self.run(&x)?;
        self.cache = Some(x);
        Ok(y)
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.run(x)
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidParameter("conv backward without forward".into()))?;
        let (ho, wo) = (dy.h, dy.w);
        let cols = im2col(&x, self.kh, self.kw, self.stride, self.pad, ho, wo);
        self.grad_w = &self.grad_w + &dy.data.dot(&cols.t());
        self.grad_b = &self.grad_b + &dy.data.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(&dy.data);
        let dx = col2im(
            &dcols, x.n, self.c_in, x.h, x.w, self.kh, self.kw, self.stride, self.pad, ho, wo,
        );
        FeatureMap::new(dx, x.n, x.h, x.w)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(
            &format!("{prefix}.weight"),
            Slot::Param {
                values: self.weight.as_slice_mut().expect("standard layout"),
                grad: self.grad_w.as_slice_mut().expect("standard layout"),
                shape: vec![self.c_out, self.c_in * self.kh * self.kw],
            },
        );
        f(
            &format!("{prefix}.bias"),
            Slot::Param {
                values: self.bias.as_slice_mut().expect("standard layout"),
                grad: self.grad_b.as_slice_mut().expect("standard layout"),
                shape: vec![self.c_out],
            },
        );
    }
}

/// Unrolls convolution windows: output is
/// `(c_in * kh * kw) x (n * ho * wo)`, matching the [`FeatureMap`] column
/// order. Out-of-bounds taps read as zero.
fn im2col(x: &FeatureMap, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let c_in = x.channels();
    let n = x.n;
    let (h, w) = (x.h, x.w);
    let mut cols = Array2::<f32>::zeros((c_in * kh * kw, n * ho * wo));
    let x_data = x.data.as_slice().expect("standard layout");
    let cols_slice = cols.as_slice_mut().expect("standard layout");
    let row_len = n * ho * wo;
    for c in 0..c_in {
        let x_chan = &x_data[c * n * h * w..(c + 1) * n * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst_row = &mut cols_slice[row * row_len..(row + 1) * row_len];
                for ni in 0..n {
                    let x_plane = &x_chan[ni * h * w..(ni + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst = &mut dst_row[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            continue; // stays zero
                        }
                        let src_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f32>,
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let mut dx = Array2::<f32>::zeros((c_in, n * h * w));
    let dx_slice = dx.as_slice_mut().expect("standard layout");
    let dcols_slice = dcols.as_slice().expect("standard layout");
    let row_len = n * ho * wo;
    for c in 0..c_in {
        let dx_chan = &mut dx_slice[c * n * h * w..(c + 1) * n * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src_row = &dcols_slice[row * row_len..(row + 1) * row_len];
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &src_row[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                        let plane = ni * h * w + iy as usize * w;
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx_chan[plane + ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Group normalization: statistics per (sample, channel group), identical
/// in training and inference. Group size is 8 channels (falling back to one
/// group when the channel count is not a multiple of 8), so per-sample
/// outputs never depend on the rest of the batch.
pub struct GroupNorm2d {
    gamma: Array1<f32>,
    beta: Array1<f32>,
    grad_gamma: Array1<f32>,
    grad_beta: Array1<f32>,
    groups: usize,
    eps: f32,
    cache: Option<GnCache>,
}

struct GnCache {
    xhat: Array2<f32>,
    inv_std: Array2<f32>, // (groups, n)
    n: usize,
    h: usize,
    w: usize,
}

const GROUP_SIZE: usize = 8;

impl GroupNorm2d {
    pub fn new(channels: usize) -> Self {
        let groups = if channels % GROUP_SIZE == 0 {
            channels / GROUP_SIZE
        } else {
            1
        };
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            groups,
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize(&self, x: &FeatureMap) -> Result<(Array2<f32>, Array2<f32>)> {
        let c = x.channels();
        if c != self.gamma.len() {
            return Err(Error::ShapeMismatch(format!(
                "groupnorm over {} channels got {c}",
                self.gamma.len()
            )));
        }
        let gs = c / self.groups;
        let hw = x.h * x.w;
        let m = (gs * hw) as f32;
        let mut xhat = x.data.clone();
        let mut inv_std = Array2::<f32>::zeros((self.groups, x.n));
        for g in 0..self.groups {
            for ni in 0..x.n {
                let mut mean = 0.0f32;
                for ci in g * gs..(g + 1) * gs {
                    let row = xhat.row(ci);
                    let seg = &row.as_slice().expect("standard layout")[ni * hw..(ni + 1) * hw];
                    mean += seg.iter().sum::<f32>();
                }
                mean /= m;
                let mut var = 0.0f32;
                for ci in g * gs..(g + 1) * gs {
                    let row = xhat.row(ci);
                    let seg = &row.as_slice().expect("standard layout")[ni * hw..(ni + 1) * hw];
                    for &v in seg {
                        let d = v - mean;
                        var += d * d;
                    }
                }
                var /= m;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[[g, ni]] = istd;
                for ci in g * gs..(g + 1) * gs {
                    let mut row = xhat.row_mut(ci);
                    let seg =
                        &mut row.as_slice_mut().expect("standard layout")[ni * hw..(ni + 1) * hw];
                    for v in seg.iter_mut() {
                        *v = (*v - mean) * istd;
                    }
                }
            }
        }
        Ok((xhat, inv_std))
    }

    fn scale_shift(&self, xhat: &Array2<f32>) -> Array2<f32> {
        let mut out = xhat.clone();
        for (ci, mut row) in out.rows_mut().into_iter().enumerate() {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            row.mapv_inplace(|v| g * v + b);
        }
        out
    }

    pub fn forward_train(&mut self, x: FeatureMap) -> Result<FeatureMap> {
        let (xhat, inv_std) = self.normalize(&x)?;
        let out = self.scale_shift(&xhat);
        self.cache = Some(GnCache {
            xhat,
            inv_std,
            n: x.n,
            h: x.h,
            w: x.w,
        });
        FeatureMap::new(out, x.n, x.h, x.w)
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (xhat, _) = self.normalize(x)?;
        FeatureMap::new(self.scale_shift(&xhat), x.n, x.h, x.w)
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidParameter("groupnorm backward without forward".into()))?;
        let c = self.gamma.len();
        let gs = c / self.groups;
        let hw = cache.h * cache.w;
        let m = (gs * hw) as f32;
        // per-channel parameter gradients
        for ci in 0..c {
            let dy_row = dy.data.row(ci);
            let xhat_row = cache.xhat.row(ci);
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for (&d, &xh) in dy_row.iter().zip(xhat_row.iter()) {
                sum_dy += d;
                sum_dy_xhat += d * xh;
            }
            self.grad_beta[ci] += sum_dy;
            self.grad_gamma[ci] += sum_dy_xhat;
        }
        // input gradient per (group, sample) block over dxhat = dy * gamma
        let mut dx = Array2::<f32>::zeros(dy.data.dim());
        for g in 0..self.groups {
            for ni in 0..cache.n {
                let mut sum_dxhat = 0.0f32;
                let mut sum_dxhat_xhat = 0.0f32;
                for ci in g * gs..(g + 1) * gs {
                    let gamma = self.gamma[ci];
                    let dy_row = dy.data.row(ci);
                    let dy_seg =
                        &dy_row.as_slice().expect("standard layout")[ni * hw..(ni + 1) * hw];
                    let xh_row = cache.xhat.row(ci);
                    let xh_seg =
                        &xh_row.as_slice().expect("standard layout")[ni * hw..(ni + 1) * hw];
                    for (&d, &xh) in dy_seg.iter().zip(xh_seg.iter()) {
                        let dxh = d * gamma;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh;
                    }
                }
                let istd = cache.inv_std[[g, ni]];
                for ci in g * gs..(g + 1) * gs {
                    let gamma = self.gamma[ci];
                    let dy_row = dy.data.row(ci);
                    let dy_seg =
                        &dy_row.as_slice().expect("standard layout")[ni * hw..(ni + 1) * hw];
                    let xh_row = cache.xhat.row(ci);
                    let xh_seg =
                        &xh_row.as_slice().expect("standard layout")[ni * hw..(ni + 1) * hw];
                    let mut dx_row = dx.row_mut(ci);
                    let dx_seg =
                        &mut dx_row.as_slice_mut().expect("standard layout")[ni * hw..(ni + 1) * hw];
                    for ((dst, &d), &xh) in dx_seg.iter_mut().zip(dy_seg.iter()).zip(xh_seg.iter())
                    {
                        let dxh = d * gamma;
                        *dst = istd / m * (m * dxh - sum_dxhat - xh * sum_dxhat_xhat);
                    }
                }
            }
        }
        FeatureMap::new(dx, cache.n, cache.h, cache.w)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        let c = self.gamma.len();
        f(
            &format!("{prefix}.gamma"),
            Slot::Param {
                values: self.gamma.as_slice_mut().expect("standard layout"),
                grad: self.grad_gamma.as_slice_mut().expect("standard layout"),
                shape: vec![c],
            },
        );
        f(
            &format!("{prefix}.beta"),
            Slot::Param {
                values: self.beta.as_slice_mut().expect("standard layout"),
                grad: self.grad_beta.as_slice_mut().expect("standard layout"),
                shape: vec![c],
            },
        );
    }
}

/// Elementwise max(0, x).
#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward_train(&mut self, mut x: FeatureMap) -> FeatureMap {
        let mut mask = vec![false; x.data.len()];
        for (v, m) in x.data.iter_mut().zip(mask.iter_mut()) {
            if *v > 0.0 {
                *m = true;
            } else {
                *v = 0.0;
            }
        }
        self.mask = Some(mask);
        x
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        FeatureMap {
            data: x.data.mapv(|v| v.max(0.0)),
            n: x.n,
            h: x.h,
            w: x.w,
        }
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::InvalidParameter("relu backward without forward".into()))?;
        let mut dx = dy.data.clone();
        for (v, m) in dx.iter_mut().zip(mask.iter()) {
            if !*m {
                *v = 0.0;
            }
        }
        FeatureMap::new(dx, dy.n, dy.h, dy.w)
    }
}

/// Max pooling; out-of-bounds positions under padding never win.
pub struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
    argmax: Option<(Array2<u32>, usize, usize)>, // indices into each sample-channel plane, input h, w
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            k,
            stride,
            pad,
            argmax: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn run(&self, x: &FeatureMap) -> (FeatureMap, Array2<u32>) {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let c = x.channels();
        let mut out = Array2::<f32>::zeros((c, x.n * ho * wo));
        let mut arg = Array2::<u32>::zeros((c, x.n * ho * wo));
        for ci in 0..c {
            let x_row = x.data.row(ci);
            let mut out_row = out.row_mut(ci);
            let mut arg_row = arg.row_mut(ci);
            for ni in 0..x.n {
                let plane = &x_row.as_slice().expect("standard layout")
                    [ni * x.h * x.w..(ni + 1) * x.h * x.w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let idx = iy as usize * x.w + ix as usize;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (ni * ho + oy) * wo + ox;
                        out_row[o] = best;
                        arg_row[o] = best_idx as u32;
                    }
                }
            }
        }
        (
            FeatureMap {
                data: out,
                n: x.n,
                h: ho,
                w: wo,
            },
            arg,
        )
    }

    pub fn forward_train(&mut self, x: FeatureMap) -> FeatureMap {
        let (y, arg) = self.run(&x);
        self.argmax = Some((arg, x.h, x.w));
        y
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        self.run(x).0
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let (arg, h, w) = self
            .argmax
            .take()
            .ok_or_else(|| Error::InvalidParameter("maxpool backward without forward".into()))?;
        let c = dy.channels();
        let mut dx = Array2::<f32>::zeros((c, dy.n * h * w));
        for ci in 0..c {
            let dy_row = dy.data.row(ci);
            let arg_row = arg.row(ci);
            let mut dx_row = dx.row_mut(ci);
            let dx_slice = dx_row.as_slice_mut().expect("standard layout");
            for ni in 0..dy.n {
                for o in 0..dy.h * dy.w {
                    let flat = ni * dy.h * dy.w + o;
                    let src = arg_row[flat] as usize;
                    dx_slice[ni * h * w + src] += dy_row[flat];
                }
            }
        }
        FeatureMap::new(dx, dy.n, h, w)
    }
}

/// Spatial mean per channel; output has h = w = 1.
#[derive(Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    fn run(x: &FeatureMap) -> FeatureMap {
        let c = x.channels();
        let hw = x.h * x.w;
        let mut out = Array2::<f32>::zeros((c, x.n));
        for ci in 0..c {
            let row = x.data.row(ci);
            let slice = row.as_slice().expect("standard layout");
            let mut out_row = out.row_mut(ci);
            for ni in 0..x.n {
                out_row[ni] = slice[ni * hw..(ni + 1) * hw].iter().sum::<f32>() / hw as f32;
            }
        }
        FeatureMap {
            data: out,
            n: x.n,
            h: 1,
            w: 1,
        }
    }

    pub fn forward_train(&mut self, x: FeatureMap) -> FeatureMap {
        self.hw = Some((x.h, x.w));
        Self::run(&x)
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        Self::run(x)
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let (h, w) = self
            .hw
            .take()
            .ok_or_else(|| Error::InvalidParameter("avgpool backward without forward".into()))?;
        let c = dy.channels();
        let hw = h * w;
        let inv = 1.0 / hw as f32;
        let mut dx = Array2::<f32>::zeros((c, dy.n * hw));
        for ci in 0..c {
            let dy_row = dy.data.row(ci);
            let mut dx_row = dx.row_mut(ci);
            let dx_slice = dx_row.as_slice_mut().expect("standard layout");
            for ni in 0..dy.n {
                let g = dy_row[ni] * inv;
                for v in &mut dx_slice[ni * hw..(ni + 1) * hw] {
                    *v = g;
                }
            }
        }
        FeatureMap::new(dx, dy.n, h, w)
    }
}

/// Fully connected layer over `(batch, features)` matrices.
pub struct Linear {
    weight: Array2<f32>, // (out, in)
    bias: Array1<f32>,
    grad_w: Array2<f32>,
    grad_b: Array1<f32>,
    cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
            grad_w: Array2::zeros((out_dim, in_dim)),
            grad_b: Array1::zeros(out_dim),
            cache: None,
        }
    }

    fn run(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.weight.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "linear expects {} inputs, got {}",
                self.weight.ncols(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: Array2<f32>) -> Result<Array2<f32>> {
        let y = self.run(&x)?;
        self.cache = Some(x);
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.run(x)
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Result<Array2<f32>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidParameter("linear backward without forward".into()))?;
        self.grad_w = &self.grad_w + &dy.t().dot(&x);
        self.grad_b = &self.grad_b + &dy.sum_axis(Axis(0));
        Ok(dy.dot(&self.weight))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        let (o, i) = self.weight.dim();
        f(
            &format!("{prefix}.weight"),
            Slot::Param {
                values: self.weight.as_slice_mut().expect("standard layout"),
                grad: self.grad_w.as_slice_mut().expect("standard layout"),
                shape: vec![o, i],
            },
        );
        f(
            &format!("{prefix}.bias"),
            Slot::Param {
                values: self.bias.as_slice_mut().expect("standard layout"),
                grad: self.grad_b.as_slice_mut().expect("standard layout"),
                shape: vec![o],
            },
        );
    }
}

/// Scales each row of `(batch, features)` to unit L2 norm; the encoders end
/// with this so features live on the unit sphere.
#[derive(Default)]
pub struct L2NormRows {
    cache: Option<(Array2<f32>, Vec<f32>)>, // normalized output, input norms
}

impl L2NormRows {
    pub fn new() -> Self {
        Self::default()
    }

    fn run(x: &Array2<f32>) -> Result<(Array2<f32>, Vec<f32>)> {
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !norm.is_finite() || norm < 1e-20 {
                return Err(Error::DegenerateInput(
                    "encoder produced a (near-)zero feature vector".into(),
                ));
            }
            row.mapv_inplace(|v| v / norm);
            norms.push(norm);
        }
        Ok((y, norms))
    }

    pub fn forward_train(&mut self, x: Array2<f32>) -> Result<Array2<f32>> {
        let (y, norms) = Self::run(&x)?;
        self.cache = Some((y.clone(), norms));
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(Self::run(x)?.0)
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Result<Array2<f32>> {
        let (y, norms) = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidParameter("l2norm backward without forward".into()))?;
        let mut dx = dy.clone();
        for ((mut dx_row, y_row), &norm) in dx.rows_mut().into_iter().zip(y.rows()).zip(&norms) {
            let dot: f32 = dx_row.iter().zip(y_row.iter()).map(|(a, b)| a * b).sum();
            for (g, &yv) in dx_row.iter_mut().zip(y_row.iter()) {
                *g = (*g - dot * yv) / norm;
            }
        }
        Ok(dx)
    }
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let u1: f32 = rng.gen();
        let u2: f32 = rng.gen();
        if u1 > f32::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap {
            data: Array2::from_shape_fn((c, n * h * w), |_| rng.gen_range(-1.0..1.0f32)),
            n,
            h,
            w,
        }
    }

    /// Scalar probe: weighted sum of the layer output with fixed random
    /// weights; its gradient w.r.t. the output is the weight tensor itself.
    fn probe(out: &Array2<f32>, weights: &Array2<f32>) -> f32 {
        out.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
    }

    fn rel_close(numeric: f32, analytic: f32, tol: f32) -> bool {
        let denom = numeric.abs().max(analytic.abs()).max(1e-3);
        ((numeric - analytic) / denom).abs() < tol
    }

    #[test]
    fn conv_shapes_and_input_gradient() {
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0), (2, 3)] {
            let mut r = rng(7);
            let mut conv = Conv2d::new(2, 3, 3, stride, pad, &mut r);
            let x = random_map(2, 2, 7, 6, &mut r);
            let (ho, wo) = conv.out_hw(7, 6);
            let y = conv.forward_train(x.clone()).unwrap();
            assert_eq!(y.data.dim(), (3, 2 * ho * wo));

            let probe_w = Array2::from_shape_fn(y.data.dim(), |_| r.gen_range(-1.0..1.0f32));
            let dy = FeatureMap::new(probe_w.clone(), 2, ho, wo).unwrap();
            let dx = conv.backward(&dy).unwrap();
            for _ in 0..3 {
                let dir = Array2::from_shape_fn(x.data.dim(), |_| r.gen_range(-1.0..1.0f32));
                let h = 1e-2f32;
                let mut xp = x.clone();
                xp.data = &x.data + &dir.mapv(|v| v * h);
                let mut xm = x.clone();
                xm.data = &x.data - &dir.mapv(|v| v * h);
                let fp = probe(&conv.forward_eval(&xp).unwrap().data, &probe_w);
                let fm = probe(&conv.forward_eval(&xm).unwrap().data, &probe_w);
                let numeric = (fp - fm) / (2.0 * h);
                let analytic: f32 = dx.data.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
                assert!(rel_close(numeric, analytic, 2e-2), "{numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn conv_weight_gradient_matches_directional_difference() {
        let mut r = rng(13);
        let mut conv = Conv2d::new(2, 4, 3, 1, 1, &mut r);
        let x = random_map(2, 3, 5, 5, &mut r);
        let probe_w = Array2::from_shape_fn((4, 3 * 25), |_| r.gen_range(-1.0..1.0f32));

        let _ = conv.forward_train(x.clone()).unwrap();
        let dy = FeatureMap::new(probe_w.clone(), 3, 5, 5).unwrap();
        let _ = conv.backward(&dy).unwrap();
        let analytic_gw = conv.grad_w.clone();
        let analytic_gb = conv.grad_b.clone();

        let h = 1e-2f32;
        for _ in 0..3 {
            let dir_w = Array2::from_shape_fn(conv.weight.dim(), |_| r.gen_range(-1.0..1.0f32));
            let dir_b = Array1::from_shape_fn(conv.bias.dim(), |_| r.gen_range(-1.0..1.0f32));
            let w0 = conv.weight.clone();
            let b0 = conv.bias.clone();
            conv.weight = &w0 + &dir_w.mapv(|v| v * h);
            conv.bias = &b0 + &dir_b.mapv(|v| v * h);
            let fp = probe(&conv.forward_eval(&x).unwrap().data, &probe_w);
            conv.weight = &w0 - &dir_w.mapv(|v| v * h);
            conv.bias = &b0 - &dir_b.mapv(|v| v * h);
            let fm = probe(&conv.forward_eval(&x).unwrap().data, &probe_w);
            conv.weight = w0;
            conv.bias = b0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic: f32 = analytic_gw.iter().zip(dir_w.iter()).map(|(a, b)| a * b).sum::<f32>()
                + analytic_gb.iter().zip(dir_b.iter()).map(|(a, b)| a * b).sum::<f32>();
            assert!(rel_close(numeric, analytic, 2e-2));
        }
    }

    #[test]
    fn groupnorm_normalizes_and_gradient_checks() {
        let mut r = rng(5);
        let mut gn = GroupNorm2d::new(16);
        let x = random_map(16, 3, 4, 4, &mut r);
        let y = gn.forward_train(x.clone()).unwrap();
        // statistics per (sample, group of 8 channels)
        for g in 0..2 {
            for ni in 0..3 {
                let mut vals = Vec::new();
                for ci in g * 8..(g + 1) * 8 {
                    for i in 0..16 {
                        vals.push(y.data[[ci, ni * 16 + i]]);
                    }
                }
                let m = vals.iter().sum::<f32>() / vals.len() as f32;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / vals.len() as f32;
                assert_abs_diff_eq!(m, 0.0, epsilon = 1e-4);
                assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
            }
        }

        let probe_w = Array2::from_shape_fn(y.data.dim(), |_| r.gen_range(-1.0..1.0f32));
        let _ = gn.forward_train(x.clone()).unwrap();
        let dy = FeatureMap::new(probe_w.clone(), 3, 4, 4).unwrap();
        let dx = gn.backward(&dy).unwrap();
        for _ in 0..3 {
            let dir = Array2::from_shape_fn(x.data.dim(), |_| r.gen_range(-1.0..1.0f32));
            let h = 1e-2f32;
            let mut xp = x.clone();
            xp.data = &x.data + &dir.mapv(|v| v * h);
            let mut xm = x.clone();
            xm.data = &x.data - &dir.mapv(|v| v * h);
            let fp = probe(&gn.forward_train(xp).unwrap().data, &probe_w);
            let fm = probe(&gn.forward_train(xm).unwrap().data, &probe_w);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic: f32 = dx.data.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
            assert!(rel_close(numeric, analytic, 2e-2), "{numeric} vs {analytic}");
        }
    }

    #[test]
    fn groupnorm_param_gradients_check() {
        let mut r = rng(29);
        let mut gn = GroupNorm2d::new(8);
        let x = random_map(8, 2, 3, 3, &mut r);
        let probe_w = Array2::from_shape_fn((8, 2 * 9), |_| r.gen_range(-1.0..1.0f32));
        let _ = gn.forward_train(x.clone()).unwrap();
        let dy = FeatureMap::new(probe_w.clone(), 2, 3, 3).unwrap();
        let _ = gn.backward(&dy).unwrap();
        let ggamma = gn.grad_gamma.clone();
        let gbeta = gn.grad_beta.clone();
        let h = 1e-2f32;
        for _ in 0..3 {
            let dg = Array1::from_shape_fn(8, |_| r.gen_range(-1.0..1.0f32));
            let db = Array1::from_shape_fn(8, |_| r.gen_range(-1.0..1.0f32));
            let g0 = gn.gamma.clone();
            let b0 = gn.beta.clone();
            gn.gamma = &g0 + &dg.mapv(|v| v * h);
            gn.beta = &b0 + &db.mapv(|v| v * h);
            let fp = probe(&gn.forward_eval(&x).unwrap().data, &probe_w);
            gn.gamma = &g0 - &dg.mapv(|v| v * h);
            gn.beta = &b0 - &db.mapv(|v| v * h);
            let fm = probe(&gn.forward_eval(&x).unwrap().data, &probe_w);
            gn.gamma = g0;
            gn.beta = b0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic: f32 = ggamma.iter().zip(dg.iter()).map(|(a, b)| a * b).sum::<f32>()
                + gbeta.iter().zip(db.iter()).map(|(a, b)| a * b).sum::<f32>();
            assert!(rel_close(numeric, analytic, 2e-2));
        }
    }

    #[test]
    fn groupnorm_train_equals_eval() {
        let mut r = rng(31);
        let mut gn = GroupNorm2d::new(16);
        let x = random_map(16, 4, 5, 5, &mut r);
        let a = gn.forward_train(x.clone()).unwrap();
        let b = gn.forward_eval(&x).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn groupnorm_is_per_sample() {
        // a sample's output is independent of what else is in the batch
        let mut r = rng(37);
        let gn = GroupNorm2d::new(8);
        let x1 = random_map(8, 1, 4, 4, &mut r);
        let mut x2 = FeatureMap::zeros(8, 2, 4, 4);
        for c in 0..8 {
            for i in 0..16 {
                x2.data[[c, i]] = x1.data[[c, i]];
                x2.data[[c, 16 + i]] = r.gen_range(-1.0..1.0);
            }
        }
        let y1 = gn.forward_eval(&x1).unwrap();
        let y2 = gn.forward_eval(&x2).unwrap();
        for c in 0..8 {
            for i in 0..16 {
                assert_eq!(y1.data[[c, i]], y2.data[[c, i]]);
            }
        }
    }

    #[test]
    fn relu_masks_negative_paths() {
        let mut relu = Relu::new();
        let x = FeatureMap {
            data: ndarray::array![[1.0f32, -2.0, 0.5, -0.1]],
            n: 4,
            h: 1,
            w: 1,
        };
        let y = relu.forward_train(x);
        assert_eq!(y.data, ndarray::array![[1.0f32, 0.0, 0.5, 0.0]]);
        let dy = FeatureMap {
            data: ndarray::array![[3.0f32, 3.0, 3.0, 3.0]],
            n: 4,
            h: 1,
            w: 1,
        };
        let dx = relu.backward(&dy).unwrap();
        assert_eq!(dx.data, ndarray::array![[3.0f32, 0.0, 3.0, 0.0]]);
    }

    #[test]
    fn maxpool_selects_maxima_and_routes_gradient() {
        let mut pool = MaxPool2d::new(2, 2, 0);
        // one channel, one sample, 2x4
        let x = FeatureMap {
            data: ndarray::array![[1.0f32, 5.0, 2.0, 0.0, 3.0, -1.0, 4.0, 2.5]],
            n: 1,
            h: 2,
            w: 4,
        };
        let y = pool.forward_train(x);
        assert_eq!(y.data, ndarray::array![[5.0f32, 4.0]]);
        let dy = FeatureMap {
            data: ndarray::array![[1.0f32, 2.0]],
            n: 1,
            h: 1,
            w: 2,
        };
        let dx = pool.backward(&dy).unwrap();
        assert_eq!(
            dx.data,
            ndarray::array![[0.0f32, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]]
        );
    }

    #[test]
    fn maxpool_with_padding_ignores_out_of_bounds() {
        let mut pool = MaxPool2d::new(3, 2, 1);
        let mut r = rng(11);
        let x = random_map(2, 2, 5, 5, &mut r);
        let y = pool.forward_train(x.clone());
        assert_eq!(y.h, 3);
        assert_eq!(y.w, 3);
        // every output equals the max of its (clipped) window
        for ci in 0..2 {
            for ni in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut best = f32::NEG_INFINITY;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                    let v = x.data[[ci, ni * 25 + iy as usize * 5 + ix as usize]];
                                    best = best.max(v);
                                }
                            }
                        }
                        assert_eq!(y.data[[ci, (ni * 3 + oy) * 3 + ox]], best);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng(19);
        let mut lin = Linear::new(6, 4, &mut r);
        let x = Array2::from_shape_fn((3, 6), |_| r.gen_range(-1.0..1.0f32));
        let probe_w = Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0f32));
        let _ = lin.forward_train(x.clone()).unwrap();
        let dx = lin.backward(&probe_w).unwrap();
        let h = 1e-2f32;
        for _ in 0..3 {
            let dir = Array2::from_shape_fn((3, 6), |_| r.gen_range(-1.0..1.0f32));
            let fp = probe(&lin.forward_eval(&(&x + &dir.mapv(|v| v * h))).unwrap(), &probe_w);
            let fm = probe(&lin.forward_eval(&(&x - &dir.mapv(|v| v * h))).unwrap(), &probe_w);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic: f32 = dx.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
            assert!(rel_close(numeric, analytic, 2e-2));
        }
    }

    #[test]
    fn l2norm_rows_and_gradient() {
        let mut r = rng(23);
        let mut l2 = L2NormRows::new();
        let x = Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0f32));
        let probe_w = Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0f32));
        let y = l2.forward_train(x.clone()).unwrap();
        for row in y.rows() {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-5);
        }
        let dx = l2.backward(&probe_w).unwrap();
        for _ in 0..3 {
            let dir = Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0f32));
            let h = 1e-3f32;
            let fp = probe(&l2.forward_eval(&(&x + &dir.mapv(|v| v * h))).unwrap(), &probe_w);
            let fm = probe(&l2.forward_eval(&(&x - &dir.mapv(|v| v * h))).unwrap(), &probe_w);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic: f32 = dx.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
            assert!(rel_close(numeric, analytic, 2e-2));
        }
        // zero rows are rejected
        let zeros = Array2::<f32>::zeros((2, 3));
        assert!(l2.forward_eval(&zeros).is_err());
    }

    #[test]
    fn im2col_identity_kernel_reproduces_input() {
        let mut r = rng(2);
        let x = random_map(3, 2, 4, 4, &mut r);
        let cols = im2col(&x, 1, 1, 1, 0, 4, 4);
        assert_eq!(cols, x.data);
    }
}
