//! Forward numeric kernels for every primitive operator.
//!
//! All kernels are pure functions of their inputs (batch norm in train mode
//! additionally updates the running statistics it is handed) and produce
//! bit-identical results for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::{finish, precision, Precision, Shape, Tensor};

/// Convolution weights and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `C_out × C_in × k × k`.
    pub kernel: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub bias: Option<Vec<f64>>,
}

impl ConvParams {
    pub fn new(kernel: Tensor, stride: usize, padding: usize, bias: Option<Vec<f64>>) -> Result<Self> {
        let k = kernel.shape();
        if k.h != k.w || ![1, 3, 5].contains(&k.h) {
            return Err(Error::Config(format!(
                "kernel must be square with size 1, 3 or 5, got {}x{}",
                k.h, k.w
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.len() != k.n {
                return Err(Error::dim(
                    "ConvParams",
                    format!("bias of length {} for {} output channels", b.len(), k.n),
                ));
            }
        }
        Ok(ConvParams {
            kernel,
            stride,
            padding,
            bias,
        })
    }
}

/// Output spatial extent of a convolution, or `None` when it would be empty.
pub fn conv_output_size(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub input: Shape,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, kernel: Shape, stride: usize, padding: usize) -> Result<Self> {
        if input.c != kernel.c {
            return Err(Error::dim(
                "conv2d",
                format!("input {input} has {} channels, kernel {kernel} expects {}", input.c, kernel.c),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let k = kernel.h;
        let (h_out, w_out) = match (
            conv_output_size(input.h, k, stride, padding),
            conv_output_size(input.w, kernel.w, stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("input {input} too small for kernel {kernel} with padding {padding}"),
                ))
            }
        };
        Ok(ConvGeom {
            input,
            c_out: kernel.n,
            k,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.input.n, self.c_out, self.h_out, self.w_out)
    }

    fn patch(&self) -> usize {
        self.input.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Output columns `[lo, hi)` whose input column `ow·stride + kw − padding`
    /// lies inside the image.
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let w = self.input.w;
        let lo = self.padding.saturating_sub(kw).div_ceil(self.stride).min(self.w_out);
        let hi = if w + self.padding <= kw {
            lo
        } else {
            (w + self.padding - kw).div_ceil(self.stride).min(self.w_out).max(lo)
        };
        (lo, hi)
    }

    /// Lowered input: `(C_in·k·k) × (N·H_out·W_out)`, column `n·P + p`.
    /// Every element of `col` is written.
    pub fn im2col_into(&self, x: &[f64], col: &mut [f64]) {
        let s = self.input;
        let p = self.positions();
        let cols = s.n * p;
        for ci in 0..s.c {
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.valid_cols(kw);
                    for n in 0..s.n {
                        let plane = &x[(n * s.c + ci) * s.h * s.w..][..s.h * s.w];
                        for oh in 0..self.h_out {
                            let out = &mut dst[n * p + oh * self.w_out..][..self.w_out];
                            let ih = (oh * self.stride + kh) as isize - self.padding as isize;
                            if ih < 0 || ih >= s.h as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let src_row = &plane[ih as usize * s.w..][..s.w];
                            out[..lo].fill(0.0);
                            out[hi..].fill(0.0);
                            if lo < hi {
                                let start = lo * self.stride + kw - self.padding;
                                if self.stride == 1 {
                                    out[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                                } else {
                                    for (o, v) in out[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(self.stride)) {
                                        *o = *v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a lowered gradient back onto the input grid.
    pub fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let s = self.input;
        let p = self.positions();
        let cols = s.n * p;
        let mut x = vec![0.0; s.numel()];
        for ci in 0..s.c {
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let src = &col[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.valid_cols(kw);
                    if lo >= hi {
                        continue;
                    }
                    for n in 0..s.n {
                        let plane = &mut x[(n * s.c + ci) * s.h * s.w..][..s.h * s.w];
                        for oh in 0..self.h_out {
                            let ih = (oh * self.stride + kh) as isize - self.padding as isize;
                            if ih < 0 || ih >= s.h as isize {
                                continue;
                            }
                            let g = &src[n * p + oh * self.w_out..][lo..hi];
                            let start = lo * self.stride + kw - self.padding;
                            let dst_row = &mut plane[ih as usize * s.w..][..s.w];
                            for (d, v) in dst_row[start..].iter_mut().step_by(self.stride).zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// NCHW output gradient gathered into `C_out × (N·P)`; every element
    /// of `m` is written.
    pub fn gather_out_into(&self, dy: &[f64], m: &mut [f64]) {
        let p = self.positions();
        let n_total = self.input.n;
        let cols = n_total * p;
        for n in 0..n_total {
            for co in 0..self.c_out {
                m[co * cols + n * p..][..p].copy_from_slice(&dy[(n * self.c_out + co) * p..][..p]);
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Run `f` with a reusable buffer of `len` elements whose contents are
/// unspecified; `f` must write before it reads.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let r = f(&mut buf[..len]);
    SCRATCH.with(|s| s.borrow_mut().push(buf));
    r
}

/// `C = A·B` for row-major `A: m×k`, `B: k×n` given as raw strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: the caller provides buffers covering every strided index of
    // A (m×k), B (k×n) and C (m×n, row-major, contiguous).
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation over an NCHW batch.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let geom = ConvGeom::new(x.shape(), p.kernel.shape(), p.stride, p.padding)?;
    Ok(conv2d_raw(&geom, x.data(), p.kernel.data(), p.bias.as_deref()))
}

/// 1×1, stride 1, no padding: the lowered input is `x` itself per sample.
fn is_pointwise(geom: &ConvGeom) -> bool {
    geom.k == 1 && geom.stride == 1 && geom.padding == 0
}

pub(crate) fn conv2d_raw(geom: &ConvGeom, x: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Tensor {
    let positions = geom.positions();
    let out_shape = geom.out_shape();
    let kk = geom.patch();
    let mut out = vec![0.0; out_shape.numel()];
    if is_pointwise(geom) {
        let per_in = geom.input.c * positions;
        let per_out = geom.c_out * positions;
        for n in 0..geom.input.n {
            let xs = &x[n * per_in..][..per_in];
            gemm(geom.c_out, kk, positions, kernel, (kk, 1), xs, (positions, 1), &mut out[n * per_out..][..per_out]);
        }
    } else {
        let cols = geom.input.n * positions;
        with_scratch(kk * cols, |col| {
            geom.im2col_into(x, col);
            with_scratch(geom.c_out * cols, |tmp| {
                gemm(geom.c_out, kk, cols, kernel, (kk, 1), col, (cols, 1), tmp);
                for n in 0..geom.input.n {
                    for co in 0..geom.c_out {
                        out[(n * geom.c_out + co) * positions..][..positions]
                            .copy_from_slice(&tmp[co * cols + n * positions..][..positions]);
                    }
                }
            })
        });
    }
    if let Some(b) = bias {
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[(i / positions) % geom.c_out];
        }
    }
    Tensor::from_kernel(out_shape, out)
}

/// Gradient of the convolution output w.r.t. its input.
pub(crate) fn conv2d_grad_input(geom: &ConvGeom, kernel: &[f64], dy: &[f64]) -> Tensor {
    let positions = geom.positions();
    let cols = geom.input.n * positions;
    let kk = geom.patch();
    if is_pointwise(geom) {
        let mut dx = vec![0.0; geom.input.numel()];
        let per_in = geom.input.c * positions;
        let per_out = geom.c_out * positions;
        for n in 0..geom.input.n {
            let g = &dy[n * per_out..][..per_out];
            gemm(kk, geom.c_out, positions, kernel, (1, kk), g, (positions, 1), &mut dx[n * per_in..][..per_in]);
        }
        return Tensor::from_kernel(geom.input, dx);
    }
    let dx = with_scratch(geom.c_out * cols, |dy_m| {
        geom.gather_out_into(dy, dy_m);
        with_scratch(kk * cols, |dcol| {
            // dcol = Wᵀ · dY
            gemm(kk, geom.c_out, cols, kernel, (1, kk), dy_m, (cols, 1), dcol);
            geom.col2im(dcol)
        })
    });
    Tensor::from_kernel(geom.input, dx)
}

/// Gradient of the convolution output w.r.t. its kernel.
pub(crate) fn conv2d_grad_kernel(geom: &ConvGeom, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let positions = geom.positions();
    let cols = geom.input.n * positions;
    let kk = geom.patch();
    let mut dk = vec![0.0; geom.c_out * kk];
    if is_pointwise(geom) {
        let per_in = geom.input.c * positions;
        let per_out = geom.c_out * positions;
        let mut part = vec![0.0; geom.c_out * kk];
        for n in 0..geom.input.n {
            let g = &dy[n * per_out..][..per_out];
            let xs = &x[n * per_in..][..per_in];
            gemm(geom.c_out, positions, kk, g, (positions, 1), xs, (1, positions), &mut part);
            for (d, v) in dk.iter_mut().zip(&part) {
                *d += v;
            }
        }
        return finish(dk);
    }
    with_scratch(geom.c_out * cols, |dy_m| {
        geom.gather_out_into(dy, dy_m);
        with_scratch(kk * cols, |col| {
            geom.im2col_into(x, col);
            // dW = dY · colᵀ
            gemm(geom.c_out, cols, kk, dy_m, (cols, 1), col, (1, cols), &mut dk);
        })
    });
    finish(dk)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch-normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNormState {
    /// `gamma = 1`, `beta = 0`, running statistics `(0, 1)`.
    pub fn new(channels: usize, mode: BnMode) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode,
        }
    }
}

/// Per-channel mean and biased variance over the `N×H×W` extent.
pub(crate) fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.n * s.spatial()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += x.plane(n, c).iter().sum::<f64>();
        }
        mean[c] = acc / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
        }
        var[c] = sq / count;
    }
    (mean, var)
}

/// `gamma·(x − mean)/sqrt(var + eps) + beta` with the given per-channel statistics.
pub(crate) fn normalize(x: &Tensor, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let s = x.shape();
    let hw = s.spatial();
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = 1.0 / (var[c] + eps).sqrt();
            let src = x.plane(n, c);
            let dst = &mut out[(n * s.c + c) * hw..][..hw];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = gamma[c] * (v - mean[c]) * inv + beta[c];
            }
        }
    }
    Tensor::from_kernel(s, out)
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// updates the running statistics; eval mode uses the running statistics.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState) -> Result<Tensor> {
    let s = x.shape();
    if state.gamma.len() != s.c || state.beta.len() != s.c || state.running_mean.len() != s.c || state.running_var.len() != s.c {
        return Err(Error::dim(
            "batch_norm",
            format!("input {s} has {} channels, state has {}", s.c, state.gamma.len()),
        ));
    }
    match state.mode {
        BnMode::Train => {
            let count = s.n * s.spatial();
            if count < 2 {
                return Err(Error::dim(
                    "batch_norm",
                    format!("train mode needs N·H·W ≥ 2, input is {s}"),
                ));
            }
            let (mean, var) = channel_stats(x);
            update_running(state, &mean, &var, count);
            Ok(normalize(x, &mean, &var, &state.gamma, &state.beta, state.eps))
        }
        BnMode::Eval => Ok(normalize(
            x,
            &state.running_mean,
            &state.running_var,
            &state.gamma,
            &state.beta,
            state.eps,
        )),
    }
}

/// Exponential moving average; the running variance uses the unbiased estimate.
pub(crate) fn update_running(state: &mut BatchNormState, mean: &[f64], var: &[f64], count: usize) {
    let m = state.momentum;
    let unbias = count as f64 / (count as f64 - 1.0);
    for c in 0..mean.len() {
        state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * mean[c];
        state.running_var[c] = m * state.running_var[c] + (1.0 - m) * var[c] * unbias;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Logistic function clamped so the result is strictly inside (0, 1) at the
/// engine precision.
pub fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    let (lo, hi) = match precision() {
        Precision::F64 => (f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0),
        Precision::F32 => (f32::MIN_POSITIVE as f64, 1.0 - f32::EPSILON as f64 / 2.0),
    };
    s.clamp(lo, hi)
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let data = match kind {
        Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
    };
    let t = Tensor::from_kernel(x.shape(), data);
    if kind == Activation::Sigmoid && precision() == Precision::F32 {
        // f32 rounding may push a clamped value back onto a bound of (0, 1).
        return t.map(|v| v.clamp(f32::MIN_POSITIVE as f64, 1.0 - f32::EPSILON as f64 / 2.0));
    }
    t
}

/// `1 − x`, elementwise.
pub fn one_minus(x: &Tensor) -> Tensor {
    Tensor::from_kernel(x.shape(), x.data().iter().map(|v| 1.0 - v).collect())
}

/// Spatial mean per channel, `N×C×1×1`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.spatial() as f64;
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            out.push(x.plane(n, c).iter().sum::<f64>() / hw);
        }
    }
    Tensor::from_kernel(Shape::new(s.n, s.c, 1, 1), out)
}

/// Result shape of a broadcasting binary op where either operand may be a
/// per-channel `N×C×1×1` vector.
pub(crate) fn broadcast_shape(op: &str, a: Shape, b: Shape) -> Result<Shape> {
    if a.n != b.n || a.c != b.c {
        return Err(Error::dim(op, format!("cannot broadcast {a} with {b}")));
    }
    if a == b {
        return Ok(a);
    }
    if b.is_pooled() {
        return Ok(a);
    }
    if a.is_pooled() {
        return Ok(b);
    }
    Err(Error::dim(op, format!("cannot broadcast {a} with {b}")))
}

fn broadcast_binary(op: &str, x: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out = broadcast_shape(op, x.shape(), y.shape())?;
    if x.shape() == y.shape() {
        let data = x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
        return Ok(Tensor::from_kernel(out, data));
    }
    let hw = out.spatial();
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..out.n {
        for c in 0..out.c {
            if y.shape().is_pooled() {
                let b = y.at(n, c, 0, 0);
                data.extend(x.plane(n, c).iter().map(|&a| f(a, b)));
            } else {
                let a = x.at(n, c, 0, 0);
                data.extend(y.plane(n, c).iter().map(|&b| f(a, b)));
            }
        }
    }
    debug_assert_eq!(data.len(), out.numel());
    let _ = hw;
    Ok(Tensor::from_kernel(out, data))
}

/// Elementwise sum; a per-channel `N×C×1×1` operand is replicated spatially.
pub fn broadcast_add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    broadcast_binary("broadcast_add", x, y, |a, b| a + b)
}

/// Hadamard product; a per-channel `N×C×1×1` operand is replicated spatially.
pub fn elementwise_mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    broadcast_binary("elementwise_mul", x, y, |a, b| a * b)
}

/// Channel concatenation, `x`'s channels first.
pub fn concat_channels(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (a, b) = (x.shape(), y.shape());
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(Error::dim("concat_channels", format!("{a} vs {b}")));
    }
    let hw = a.spatial();
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..a.n {
        data.extend_from_slice(&x.data()[n * a.c * hw..(n + 1) * a.c * hw]);
        data.extend_from_slice(&y.data()[n * b.c * hw..(n + 1) * b.c * hw]);
    }
    Ok(Tensor::from_kernel(Shape::new(a.n, a.c + b.c, a.h, a.w), data))
}

/// Nearest-neighbour 2× upsampling: every pixel becomes a 2×2 block.
pub fn nearest_upsample2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    let out = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for oh in 0..out.h {
                let row = &plane[(oh / 2) * s.w..][..s.w];
                for ow in 0..out.w {
                    data.push(row[ow / 2]);
                }
            }
        }
    }
    Tensor::from_kernel(out, data)
}

/// Affine map on per-channel vectors: `x: N×C_in×1×1`, `weight: C_out×C_in×1×1`.
pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let (s, w) = (x.shape(), weight.shape());
    if !s.is_pooled() || !w.is_pooled() || w.c != s.c {
        return Err(Error::dim(
            "fully_connected",
            format!("input {s} incompatible with weight {w}"),
        ));
    }
    if let Some(b) = bias {
        if b.len() != w.n {
            return Err(Error::dim(
                "fully_connected",
                format!("bias of length {} for {} outputs", b.len(), w.n),
            ));
        }
    }
    let mut out = vec![0.0; s.n * w.n];
    // out (N×C_out) = x (N×C_in) · Wᵀ
    gemm(s.n, s.c, w.n, x.data(), (s.c, 1), weight.data(), (1, s.c), &mut out);
    if let Some(b) = bias {
        for row in out.chunks_mut(w.n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    Ok(Tensor::from_kernel(Shape::new(s.n, w.n, 1, 1), out))
}

/// Softmax probabilities over the channel axis at every `(n, h, w)`.
pub(crate) fn softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let hw = s.spatial();
    let mut probs = vec![0.0; s.numel()];
    for n in 0..s.n {
        for p in 0..hw {
            let at = |c: usize| (n * s.c + c) * hw + p;
            let max = (0..s.c).map(|c| logits.data()[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c {
                let e = (logits.data()[at(c)] - max).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..s.c {
                probs[at(c)] /= z;
            }
        }
    }
    Tensor::from_kernel(s, probs)
}

pub(crate) fn check_labels(logits: Shape, labels: &[usize]) -> Result<()> {
    let expected = logits.n * logits.spatial();
    if labels.len() != expected {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} labels for logits {logits} (expected {expected})", labels.len()),
        ));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= logits.c) {
        return Err(Error::Input(format!(
            "label {l} at position {i} outside [0, {})",
            logits.c
        )));
    }
    Ok(())
}

/// Mean negative log-softmax probability of the true class. Labels are one
/// per sample for `N×K×1×1` logits, or one per pixel (`n`, then row-major
/// `h, w`) for `N×K×H×W` logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    check_labels(s, labels)?;
    let hw = s.spatial();
    let mut total = 0.0;
    for n in 0..s.n {
        for p in 0..hw {
            let at = |c: usize| logits.data()[(n * s.c + c) * hw + p];
            let max = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..s.c).map(|c| (at(c) - max).exp()).sum::<f64>().ln() + max;
            total += lse - at(labels[n * hw + p]);
        }
    }
    let loss = total / labels.len() as f64;
    Ok(finish(vec![loss])[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Six nested loops, straight from the definition.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize, bias: Option<&[f64]>) -> Tensor {
        let (s, ks) = (x.shape(), k.shape());
        let ho = (s.h + 2 * pad - ks.h) / stride + 1;
        let wo = (s.w + 2 * pad - ks.w) / stride + 1;
        Tensor::from_fn(Shape::new(s.n, ks.n, ho, wo), |n, co, oh, ow| {
            let mut acc = bias.map_or(0.0, |b| b[co]);
            for ci in 0..s.c {
                for kh in 0..ks.h {
                    for kw in 0..ks.w {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < s.h && (iw as usize) < s.w {
                            acc += k.at(co, ci, kh, kw) * x.at(n, ci, ih as usize, iw as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let x = Tensor::zeros(Shape::new(1, 1, 3, 3));
        let k = Tensor::uniform(Shape::new(2, 1, 3, 3), -1.0, 1.0, &mut rng(1));
        let p = ConvParams::new(k, 1, 1, Some(vec![0.0, 0.0])).unwrap();
        assert!(conv2d(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_scalar_multiply_add() {
        let x = Tensor::new(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let k = Tensor::new(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let p = ConvParams::new(k, 1, 0, Some(vec![1.0])).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[7.0]);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut r = rng(7);
        for &(ks, stride, pad) in &[(3, 1, 1), (5, 1, 2), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)] {
            let x = Tensor::uniform(Shape::new(2, 2, 4, 4), -1.0, 1.0, &mut r);
            let k = Tensor::uniform(Shape::new(3, 2, ks, ks), -1.0, 1.0, &mut r);
            let bias = vec![0.1, -0.2, 0.3];
            let p = ConvParams::new(k.clone(), stride, pad, Some(bias.clone())).unwrap();
            let got = conv2d(&x, &p).unwrap();
            let want = conv_oracle(&x, &k, stride, pad, Some(&bias));
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "k={ks} s={stride} p={pad}");
        }
        // spec case: 1×2×4×4, 3×3, pad 1
        let x = Tensor::uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut r);
        let k = Tensor::uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0, &mut r);
        let p = ConvParams::new(k.clone(), 1, 1, None).unwrap();
        assert!(conv2d(&x, &p).unwrap().max_abs_diff(&conv_oracle(&x, &k, 1, 1, None)) < 1e-12);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let k = Tensor::zeros(Shape::new(2, 2, 3, 3));
        let err = conv2d(&x, &ConvParams::new(k, 1, 1, None).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"), "{msg}");
        assert!(ConvParams::new(Tensor::zeros(Shape::new(1, 1, 2, 2)), 1, 0, None).is_err());
        let tiny = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let p = ConvParams::new(Tensor::zeros(Shape::new(1, 1, 5, 5)), 1, 0, None).unwrap();
        assert!(matches!(conv2d(&tiny, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pointwise_conv_equals_fc_per_pixel() {
        let mut r = rng(3);
        let x = Tensor::uniform(Shape::new(2, 4, 3, 5), -1.0, 1.0, &mut r);
        let w = Tensor::uniform(Shape::new(6, 4, 1, 1), -1.0, 1.0, &mut r);
        let b: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let conv = conv2d(&x, &ConvParams::new(w.clone(), 1, 0, Some(b.clone())).unwrap()).unwrap();
        for h in 0..3 {
            for ww in 0..5 {
                let px = Tensor::from_fn(Shape::new(2, 4, 1, 1), |n, c, _, _| x.at(n, c, h, ww));
                let fc = fully_connected(&px, &w, Some(&b)).unwrap();
                for n in 0..2 {
                    for c in 0..6 {
                        assert!((fc.at(n, c, 0, 0) - conv.at(n, c, h, ww)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut r = rng(11);
        let x = Tensor::uniform(Shape::new(4, 3, 5, 5), -10.0, 30.0, &mut r);
        let mut st = BatchNormState::new(3, BnMode::Train);
        let y = batch_norm(&x, &mut st).unwrap();
        let (mean, var) = channel_stats(&y);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-10);
            assert!((var[c] - 1.0).abs() < 1e-6);
        }
        // running stats moved towards the batch statistics
        let (bm, _) = channel_stats(&x);
        for c in 0..3 {
            assert!((st.running_mean[c] - 0.1 * bm[c]).abs() < 1e-12);
            assert!(st.running_var[c] >= 0.0);
        }
    }

    #[test]
    fn batch_norm_affine_collapse_and_identity_eval() {
        let mut r = rng(12);
        let x = Tensor::uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0, &mut r);
        let mut st = BatchNormState::new(2, BnMode::Train);
        st.gamma = vec![0.0, 0.0];
        st.beta = vec![1.5, -2.0];
        let y = batch_norm(&x, &mut st).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 1.5));
            assert!(y.plane(n, 1).iter().all(|&v| v == -2.0));
        }
        // The eps term scales by 1/sqrt(1 + 1e-5), so the bound needs |x| < 0.2.
        let x = x.map(|v| 0.1 * v);
        let mut ev = BatchNormState::new(2, BnMode::Eval);
        let y = batch_norm(&x, &mut ev).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn batch_norm_errors() {
        let x = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let mut st = BatchNormState::new(2, BnMode::Train);
        assert!(batch_norm(&x, &mut st).is_err());
        let mut st3 = BatchNormState::new(3, BnMode::Eval);
        assert!(matches!(batch_norm(&x, &mut st3), Err(Error::Dimension { .. })));
        // zero variance stays finite through eps
        let c = Tensor::full(Shape::new(2, 2, 2, 2), 4.0);
        let y = batch_norm(&c, &mut st).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![-3.0, 3.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 3.0]);
        let mut r = rng(5);
        let xs = Tensor::uniform(Shape::new(1, 1, 10, 10), -20.0, 20.0, &mut r);
        let pos = activation(&xs, Activation::Sigmoid);
        let neg = activation(&xs.map(|v| -v), Activation::Sigmoid);
        for (a, b) in pos.data().iter().zip(neg.data()) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
        for v in [-1e6, -800.0, -40.0, 40.0, 800.0, 1e6] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0, "sigmoid({v}) = {s}");
        }
    }

    #[test]
    fn gap_cases() {
        let x = Tensor::full(Shape::new(1, 3, 4, 4), 2.5);
        assert!(global_avg_pool(&x).data().iter().all(|&v| v == 2.5));
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let mut r = rng(9);
        let x = Tensor::uniform(Shape::new(2, 8, 5, 7), -1.0, 1.0, &mut r);
        let g = global_avg_pool(&x);
        for n in 0..2 {
            for c in 0..8 {
                let mut acc = 0.0;
                for h in 0..5 {
                    for w in 0..7 {
                        acc += x.at(n, c, h, w);
                    }
                }
                assert!((g.at(n, c, 0, 0) - acc / 35.0).abs() < 1e-12);
            }
        }
        let one = Tensor::uniform(Shape::new(2, 3, 1, 1), -1.0, 1.0, &mut r);
        assert_eq!(global_avg_pool(&one), one);
    }

    #[test]
    fn broadcast_ops() {
        let mut r = rng(21);
        let x = Tensor::uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0, &mut r);
        assert_eq!(broadcast_add(&x, &Tensor::zeros(Shape::new(2, 2, 1, 1))).unwrap(), x);
        let z = Tensor::zeros(Shape::new(1, 2, 3, 3));
        let y = Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let s = broadcast_add(&z, &y).unwrap();
        assert!(s.plane(0, 0).iter().all(|&v| v == 1.0));
        assert!(s.plane(0, 1).iter().all(|&v| v == 2.0));
        let y = Tensor::uniform(Shape::new(2, 2, 1, 1), -1.0, 1.0, &mut r);
        let rep = Tensor::from_fn(x.shape(), |n, c, _, _| y.at(n, c, 0, 0));
        let sum = broadcast_add(&x, &y).unwrap();
        let oracle = Tensor::from_fn(x.shape(), |n, c, h, w| x.at(n, c, h, w) + rep.at(n, c, h, w));
        assert_eq!(sum, oracle);
        // either side may be the pooled operand
        assert_eq!(broadcast_add(&y, &x).unwrap(), sum);
        assert!(broadcast_add(&x, &Tensor::zeros(Shape::new(2, 3, 1, 1))).is_err());
        assert!(broadcast_add(&x, &Tensor::zeros(Shape::new(2, 2, 2, 2))).is_err());

        assert_eq!(elementwise_mul(&x, &Tensor::ones(x.shape())).unwrap(), x);
        assert!(elementwise_mul(&x, &Tensor::zeros(x.shape())).unwrap().data().iter().all(|&v| v == 0.0));
        let y2 = Tensor::uniform(x.shape(), -1.0, 1.0, &mut r);
        let m = elementwise_mul(&x, &y2).unwrap();
        for i in 0..x.numel() {
            assert_eq!(m.data()[i], x.data()[i] * y2.data()[i]);
        }
        assert!(elementwise_mul(&x, &Tensor::zeros(Shape::new(2, 2, 3, 2))).is_err());
    }

    #[test]
    fn concat_and_upsample() {
        let mut r = rng(4);
        let x = Tensor::uniform(Shape::new(2, 3, 2, 2), -1.0, 1.0, &mut r);
        let empty = Tensor::zeros(Shape::new(2, 0, 2, 2));
        assert_eq!(concat_channels(&x, &empty).unwrap(), x);
        let y = Tensor::uniform(Shape::new(2, 2, 2, 2), -1.0, 1.0, &mut r);
        let c = concat_channels(&x, &y).unwrap();
        assert_eq!(c.shape().c, 5);
        assert_eq!(c.slice_channels(0, 3).unwrap(), x);
        for k in 3..5 {
            for n in 0..2 {
                assert_eq!(c.plane(n, k), y.plane(n, k - 3));
            }
        }
        assert!(concat_channels(&x, &Tensor::zeros(Shape::new(2, 1, 3, 2))).is_err());

        let one = Tensor::new(Shape::new(1, 1, 1, 1), vec![5.0]).unwrap();
        assert_eq!(nearest_upsample2x(&one), Tensor::full(Shape::new(1, 1, 2, 2), 5.0));
        let u = nearest_upsample2x(&x);
        let back = Tensor::from_fn(x.shape(), |n, c, h, w| u.at(n, c, 2 * h, 2 * w));
        assert_eq!(back, x);
    }

    #[test]
    fn fully_connected_cases() {
        let mut r = rng(8);
        let x = Tensor::uniform(Shape::new(3, 4, 1, 1), -1.0, 1.0, &mut r);
        let eye = Tensor::from_fn(Shape::new(4, 4, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(fully_connected(&x, &eye, None).unwrap(), x);
        let b = [0.5, -1.0];
        let y = fully_connected(&x, &Tensor::zeros(Shape::new(2, 4, 1, 1)), Some(&b)).unwrap();
        for n in 0..3 {
            assert_eq!(y.at(n, 0, 0, 0), 0.5);
            assert_eq!(y.at(n, 1, 0, 0), -1.0);
        }
        let w = Tensor::uniform(Shape::new(5, 4, 1, 1), -1.0, 1.0, &mut r);
        let fc = fully_connected(&x, &w, None).unwrap();
        let conv = conv2d(&x, &ConvParams::new(w.clone(), 1, 0, None).unwrap()).unwrap();
        assert!(fc.max_abs_diff(&conv) < 1e-12);
        assert!(fully_connected(&Tensor::zeros(Shape::new(1, 4, 2, 2)), &w, None).is_err());
        assert!(fully_connected(&Tensor::zeros(Shape::new(1, 3, 1, 1)), &w, None).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(Shape::new(2, 4, 1, 1));
        let l = softmax_cross_entropy(&uniform, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sharp = Tensor::from_fn(Shape::new(1, 4, 1, 1), |_, c, _, _| if c == 2 { 1000.0 } else { 0.0 });
        assert!(softmax_cross_entropy(&sharp, &[2]).unwrap() < 1e-6);
        assert!(matches!(
            softmax_cross_entropy(&uniform, &[0, 4]),
            Err(Error::Input(_))
        ));
        let mut r = rng(10);
        let logits = Tensor::uniform(Shape::new(2, 3, 2, 2), -3.0, 3.0, &mut r);
        let labels = [0, 1, 2, 0, 2, 2, 1, 0];
        let got = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut want = 0.0;
        for n in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let z: f64 = (0..3).map(|c| logits.at(n, c, h, w).exp()).sum();
                    let y = labels[n * 4 + h * 2 + w];
                    want -= (logits.at(n, y, h, w).exp() / z).ln();
                }
            }
        }
        assert!((got - want / 8.0).abs() < 1e-10);
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut r = rng(99);
        let x = Tensor::uniform(Shape::new(2, 3, 6, 6), -1.0, 1.0, &mut r);
        let k = Tensor::uniform(Shape::new(4, 3, 3, 3), -1.0, 1.0, &mut r);
        let p = ConvParams::new(k, 2, 1, None).unwrap();
        let a = conv2d(&x, &p).unwrap();
        let b = conv2d(&x, &p).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
