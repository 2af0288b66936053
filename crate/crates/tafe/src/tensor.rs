//! Dense rank-4 tensors and the primitive kernels every higher module is
//! built from: general and strip 2-D convolution, elementwise ops, softmax,
//! layer normalization, and bilinear upsampling.
//!
//! All values are 64-bit floats in `(batch, channel, row, col)` layout,
//! row-major with the column index fastest. Every operation here is a pure
//! function: inputs are never mutated and identical inputs produce
//! bit-identical outputs regardless of the worker-thread cap, because each
//! output element is accumulated in one fixed order by exactly one worker.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TafeError};

/// Global cap on worker threads used by the convolution kernels.
/// 1 (the default) keeps everything on the calling thread.
static MAX_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps the number of worker threads used by tensor kernels.
///
/// Results are bit-identical for every cap; this only trades wall-clock
/// time. Set once at startup (the CLI wires `--threads` / `TAFE_THREADS`
/// here).
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn max_threads() -> usize {
    MAX_THREADS.load(Ordering::Relaxed).max(1)
}

/// Dense rank-4 tensor: shape `(n, c, h, w)`, flat row-major `f64` storage
/// with `w` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the shape/data contract: every dimension
    /// at least 1, `data.len() == n*c*h*w`, and all elements finite.
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(TafeError::Shape(format!(
                "all dimensions must be >= 1, got ({n},{c},{h},{w})"
            )));
        }
        let expect = n * c * h * w;
        if data.len() != expect {
            return Err(TafeError::Shape(format!(
                "data length {} does not match shape ({n},{c},{h},{w}) = {expect}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(TafeError::Data(format!(
                "non-finite element {bad} in tensor data"
            )));
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Internal constructor for values produced by kernels that preserve
    /// finiteness; skips the elementwise scan.
    pub(crate) fn from_parts(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * c * h * w);
        debug_assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1);
        Self {
            shape: [n, c, h, w],
            data,
        }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::from_parts(n, c, h, w, vec![0.0; n * c * h * w])
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: f64) -> Self {
        Self::from_parts(n, c, h, w, vec![v; n * c * h * w])
    }

    /// One scalar wrapped as a `(1,1,1,1)` tensor.
    pub fn scalar(v: f64) -> Self {
        Self::from_parts(1, 1, 1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let [n, c, h, w] = self.shape;
        (n, c, h, w)
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Reinterprets the flat storage under a new shape with the same element
    /// count. Pure metadata change; the element order is untouched.
    pub fn reshape(&self, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
        if n * c * h * w != self.numel() {
            return Err(TafeError::Shape(format!(
                "cannot reshape {} elements into ({n},{c},{h},{w})",
                self.numel()
            )));
        }
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(TafeError::Shape("reshape to zero-sized dimension".into()));
        }
        Ok(Tensor::from_parts(n, c, h, w, self.data.clone()))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Convolution weights `(c_out, c_in, kh, kw)` plus an optional per-output-
/// channel bias stored as a `(1, c_out, 1, 1)` tensor. Kernel extents must
/// be odd so "same" padding stays symmetric; even extents are rejected
/// outright.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (c_out, _c_in, kh, kw) = weights.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TafeError::Config(format!(
                "kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != (1, c_out, 1, 1) {
                return Err(TafeError::Shape(format!(
                    "bias shape {:?} must be (1,{c_out},1,1)",
                    b.shape()
                )));
            }
        }
        Ok(Self { weights, bias })
    }

    /// Convenience constructor taking the bias as a plain per-channel list.
    pub fn with_bias_vec(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        let c_out = weights.n();
        let b = Tensor::new(1, c_out, 1, 1, bias)?;
        Self::new(weights, Some(b))
    }

    pub fn c_out(&self) -> usize {
        self.weights.n()
    }
    pub fn c_in(&self) -> usize {
        self.weights.c()
    }
    pub fn kh(&self) -> usize {
        self.weights.h()
    }
    pub fn kw(&self) -> usize {
        self.weights.w()
    }

    /// A strip kernel spans a single row or a single column.
    pub fn is_strip(&self) -> bool {
        self.kh() == 1 || self.kw() == 1
    }
}

/// Spatial padding mode for convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad by `(k-1)/2` per side; stride-1 output keeps the input extent.
    Same,
    /// No padding; output shrinks by `k-1`.
    Valid,
}

fn conv_out_extent(input: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// 2-D cross-correlation (no kernel flip), arbitrary stride.
pub fn conv2d_strided(
    input: &Tensor,
    kernel: &ConvKernel,
    padding: Padding,
    stride: usize,
) -> Result<Tensor> {
    conv2d_raw(
        input,
        &kernel.weights,
        kernel.bias.as_ref().map(|b| b.data()),
        padding,
        stride,
    )
}

/// Convolution core over raw weight/bias views, shared with the
/// differentiation tape.
///
/// The accumulation order for each output element is fixed
/// (`c_in`, then `kh`, then `kw`), so results are bit-identical across runs
/// and worker-thread caps.
pub(crate) fn conv2d_raw(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f64]>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(TafeError::Config("stride must be >= 1".into()));
    }
    let (n, c, h, w) = input.shape();
    let (c_out, c_in, kh, kw) = weights.shape();
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TafeError::Config(format!(
            "kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if c != c_in {
        return Err(TafeError::Shape(format!(
            "input channels {c} do not match kernel c_in {c_in}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(TafeError::Shape(format!(
                "bias length {} does not match c_out {c_out}",
                b.len()
            )));
        }
    }
    let (ph, pw) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => (0, 0),
    };
    let oh = conv_out_extent(h, kh, ph, stride).ok_or_else(|| {
        TafeError::Shape(format!("kernel height {kh} exceeds padded input height"))
    })?;
    let ow = conv_out_extent(w, kw, pw, stride)
        .ok_or_else(|| TafeError::Shape(format!("kernel width {kw} exceeds padded input width")))?;

    let mut out = vec![0.0f64; n * c_out * oh * ow];
    let in_data = input.data();
    let w_data = weights.data();

    // One task per (batch, out-channel) output plane; planes are disjoint.
    let planes = n * c_out;
    let compute_plane = |plane: usize, out_plane: &mut [f64]| {
        let bn = plane / c_out;
        let oc = plane % c_out;
        for ic in 0..c_in {
            let in_chan = &in_data[(bn * c + ic) * h * w..(bn * c + ic + 1) * h * w];
            let w_base = ((oc * c_in + ic) * kh) * kw;
            for dkh in 0..kh {
                for dkw in 0..kw {
                    let wv = w_data[w_base + dkh * kw + dkw];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + dkh) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_chan[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + dkw) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                out_row[ox] += wv * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let b = bias[oc];
            if b != 0.0 {
                for v in out_plane.iter_mut() {
                    *v += b;
                }
            }
        }
    };

    let threads = max_threads().min(planes);
    if threads <= 1 {
        for (plane, chunk) in out.chunks_mut(oh * ow).enumerate() {
            compute_plane(plane, chunk);
        }
    } else {
        std::thread::scope(|scope| {
            let mut rest = out.as_mut_slice();
            let mut plane = 0usize;
            let per = planes.div_ceil(threads);
            while !rest.is_empty() {
                let take = per.min(rest.len() / (oh * ow));
                let (head, tail) = rest.split_at_mut(take * oh * ow);
                let first = plane;
                scope.spawn(move || {
                    for (i, chunk) in head.chunks_mut(oh * ow).enumerate() {
                        compute_plane(first + i, chunk);
                    }
                });
                plane += take;
                rest = tail;
            }
        });
    }

    Ok(Tensor::from_parts(n, c_out, oh, ow, out))
}

/// Stride-1 2-D cross-correlation with "same" or "valid" zero padding.
pub fn conv2d(input: &Tensor, kernel: &ConvKernel, padding: Padding) -> Result<Tensor> {
    conv2d_strided(input, kernel, padding, 1)
}

/// Elementwise sum; shapes must match exactly.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise(a, b, "add", |x, y| x + y)
}

/// Elementwise (Hadamard) product; shapes must match exactly.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise(a, b, "mul", |x, y| x * y)
}

fn zip_elementwise(
    a: &Tensor,
    b: &Tensor,
    what: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(TafeError::Shape(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| f(*x, *y))
        .collect();
    let (n, c, h, w) = a.shape();
    Ok(Tensor::from_parts(n, c, h, w, data))
}

pub(crate) fn scale(a: &Tensor, s: f64) -> Tensor {
    let (n, c, h, w) = a.shape();
    Tensor::from_parts(n, c, h, w, a.data().iter().map(|v| v * s).collect())
}

/// Row-wise softmax: the tensor is viewed as rows along `w`, one row per
/// `(n, c, h)` triple. Computed with max-subtraction so finite input always
/// yields rows that are nonnegative and sum to 1.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(n, c, h, w, out)
}

/// Per-token layer normalization over the channel dimension.
///
/// A token is one `(n, h, w)` site; its feature vector runs along `c`.
/// `gamma`/`beta` have length `c`. Uses population variance, so before the
/// affine map each token has mean 0 and variance 1 (up to `eps`).
pub fn layernorm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    if gamma.len() != c || beta.len() != c {
        return Err(TafeError::Shape(format!(
            "layernorm parameter length {}/{} does not match {} channels",
            gamma.len(),
            beta.len(),
            c
        )));
    }
    let hw = h * w;
    let mut out = vec![0.0; x.numel()];
    let data = x.data();
    for bn in 0..n {
        for s in 0..hw {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += data[(bn * c + ch) * hw + s];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = data[(bn * c + ch) * hw + s] - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ch in 0..c {
                let i = (bn * c + ch) * hw + s;
                out[i] = gamma[ch] * ((data[i] - mean) * inv) + beta[ch];
            }
        }
    }
    Ok(Tensor::from_parts(n, c, h, w, out))
}

/// Align-corners bilinear upsampling: source coordinate for destination
/// index `d` is `d * (S-1) / (D-1)`; a size-1 source axis fills with its
/// constant value. Corner pixels are reproduced exactly. Downscaling is
/// rejected.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    if out_h < h || out_w < w {
        return Err(TafeError::Config(format!(
            "upsample target ({out_h},{out_w}) smaller than input ({h},{w})"
        )));
    }
    let mut out = vec![0.0; n * c * out_h * out_w];
    let data = x.data();
    let coords = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        if src_len == 1 || dst_len == 1 {
            return (0, 0, 0.0);
        }
        let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    for plane in 0..n * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coords(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coords(ox, w, out_w);
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(Tensor::from_parts(n, c, out_h, out_w, out))
}

/// Rectified linear unit.
pub fn relu(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    Tensor::from_parts(n, c, h, w, x.data().iter().map(|v| v.max(0.0)).collect())
}

/// GELU, tanh approximation. Smooth everywhere, which keeps the
/// finite-difference gradient oracle well behaved.
pub fn gelu(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    Tensor::from_parts(n, c, h, w, x.data().iter().map(|v| gelu_scalar(*v)).collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
