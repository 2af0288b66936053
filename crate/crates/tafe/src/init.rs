//! Seeded parameter initialization. Weight scales are chosen per role so the
//! freshly constructed network neither attenuates nor amplifies its signal:
//! convolutions feeding a rectifier draw from a gain-2 fan-in normal (He
//! initialization), purely linear convolutions draw from a gain-1 fan-in
//! normal (Xavier initialization) so residual branches add unit-scale
//! contributions, multiplicative gates start at zero so enhancement grows by
//! gradient instead of compounding variance stage over stage, and the final
//! classifier starts near zero so training opens at the uniform-prediction
//! loss. Biases start at zero and normalization scales at one, and every
//! draw happens in a fixed construction order, so a seed fully determines a
//! model.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ConvKernel, Tensor};

/// Standard deviation of embedding-style parameters (positional embedding)
/// and of the near-zero classifier head.
pub const EMBED_STD: f64 = 0.02;

/// A `(n,c,h,w)` tensor of N(0, `std`²) draws.
pub fn normal_tensor<R: Rng>(
    rng: &mut R,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    std: f64,
) -> Tensor {
    let normal = Normal::new(0.0, std).expect("constant std is valid");
    let data = (0..n * c * h * w).map(|_| normal.sample(rng)).collect();
    Tensor::new(n, c, h, w, data).expect("normal draws are finite")
}

/// A `(n,c,h,w)` tensor of N(0, `EMBED_STD`²) draws.
pub fn embed_tensor<R: Rng>(rng: &mut R, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    normal_tensor(rng, n, c, h, w, EMBED_STD)
}

/// He standard deviation for a kernel with the given fan-in: gain 2
/// compensates the half of the variance a following rectifier discards.
pub fn he_std(c_in: usize, kh: usize, kw: usize) -> f64 {
    (2.0 / (c_in * kh * kw) as f64).sqrt()
}

/// Xavier standard deviation for a kernel with the given fan-in: gain 1
/// preserves variance through a convolution with no nonlinearity after it.
pub fn xavier_std(c_in: usize, kh: usize, kw: usize) -> f64 {
    (1.0 / (c_in * kh * kw) as f64).sqrt()
}

/// A convolution kernel with N(0, 2/fan_in) weights and, when `bias` is
/// set, a zero bias vector. Use for convolutions whose output feeds a
/// rectifier (ReLU or GELU).
pub fn conv_kernel<R: Rng>(
    rng: &mut R,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    bias: bool,
) -> ConvKernel {
    let weights = normal_tensor(rng, c_out, c_in, kh, kw, he_std(c_in, kh, kw));
    let bias = bias.then(|| Tensor::zeros(1, c_out, 1, 1));
    ConvKernel::new(weights, bias).expect("odd-extent kernels by construction")
}

/// A convolution kernel with N(0, 1/fan_in) weights and, when `bias` is
/// set, a zero bias vector. Use for convolutions with no nonlinearity
/// after them — projections, attention maps, strip convolutions, and
/// residual-branch outputs — where gain 2 would double variance at every
/// application.
pub fn linear_conv_kernel<R: Rng>(
    rng: &mut R,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    bias: bool,
) -> ConvKernel {
    let weights = normal_tensor(rng, c_out, c_in, kh, kw, xavier_std(c_in, kh, kw));
    let bias = bias.then(|| Tensor::zeros(1, c_out, 1, 1));
    ConvKernel::new(weights, bias).expect("odd-extent kernels by construction")
}

/// A 1×1 kernel with N(0, `EMBED_STD`²) weights and a zero bias: the
/// classifier head starts near zero so initial logits are almost uniform
/// and the first loss sits at ln(classes) regardless of network width.
pub fn logit_conv_kernel<R: Rng>(rng: &mut R, c_out: usize, c_in: usize) -> ConvKernel {
    let weights = normal_tensor(rng, c_out, c_in, 1, 1, EMBED_STD);
    ConvKernel::new(weights, Some(Tensor::zeros(1, c_out, 1, 1)))
        .expect("odd-extent kernels by construction")
}

/// An all-zero kernel. Branches that multiply into the main signal path
/// start here so the network opens at identity scale and the branch grows
/// by gradient instead of compounding variance stage over stage.
pub fn zero_conv_kernel(c_out: usize, c_in: usize, kh: usize, kw: usize, bias: bool) -> ConvKernel {
    let weights = Tensor::zeros(c_out, c_in, kh, kw);
    let bias = bias.then(|| Tensor::zeros(1, c_out, 1, 1));
    ConvKernel::new(weights, bias).expect("odd-extent kernels by construction")
}
