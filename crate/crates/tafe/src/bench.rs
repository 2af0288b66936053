//! Convolution-topology micro-benchmark: dense `k×k` against the cascaded
//! strip pair (`1×k` then `k×1`) and the parallel summed pair, on identical
//! inputs, with an analytic multiply-accumulate cost model and a built-in
//! correctness guard (a cascade must reproduce its rank-1 dense kernel).
//!
//! Wall-clock numbers are the one deliberately nondeterministic output in
//! the whole crate; everything else in a report is a pure function of the
//! benchmark arguments.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, TafeError};
use crate::tensor::{add, conv2d, ConvKernel, Padding, Tensor};

/// Largest acceptable guard residual; rank-1 agreement is exact up to f64
/// rounding, so anything above this signals a broken kernel.
pub const GUARD_TOL: f64 = 1e-10;

const STRIP_SIZES: [usize; 3] = [3, 5, 7];

/// One of the three timed convolution layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// One full `k×k` kernel.
    Dense,
    /// `1×k` followed by `k×1`.
    Cascade,
    /// `1×k` and `k×1` applied side by side and summed.
    Parallel,
}

impl Topology {
    pub const ALL: [Topology; 3] = [Topology::Dense, Topology::Cascade, Topology::Parallel];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Dense => "dense",
            Topology::Cascade => "cascade",
            Topology::Parallel => "parallel",
        }
    }

    /// Multiply-accumulates per output element per input channel.
    pub fn macs_per_output_per_channel(self, k: usize) -> usize {
        match self {
            Topology::Dense => k * k,
            Topology::Cascade | Topology::Parallel => 2 * k,
        }
    }
}

impl FromStr for Topology {
    type Err = TafeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Topology::Dense),
            "cascade" => Ok(Topology::Cascade),
            "parallel" => Ok(Topology::Parallel),
            other => Err(TafeError::Usage(format!(
                "unknown kernel {other:?}; expected dense, cascade, or parallel"
            ))),
        }
    }
}

/// What to benchmark.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    /// Topologies to time; all three when empty.
    pub kernels: Vec<Topology>,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            kernels: Vec::new(),
            k: 7,
            h: 64,
            w: 64,
            channels: 8,
            reps: 10,
            seed: 0,
        }
    }
}

/// Nondeterministic wall-clock measurements, labeled as such.
#[derive(Clone, Debug, Serialize)]
pub struct WallClock {
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Fixed reminder that these two numbers vary run to run.
    pub note: &'static str,
}

/// Timing and cost for one topology.
#[derive(Clone, Debug, Serialize)]
pub struct KernelTiming {
    pub kernel: Topology,
    /// Multiply-accumulates per output element (the per-channel count times
    /// the channel width).
    pub macs_per_output: u64,
    /// Total multiply-accumulates for one pass over the input.
    pub total_macs: u64,
    pub wall_clock: WallClock,
    /// Sum of the output tensor; a pure function of the seed, for
    /// cross-run comparison.
    pub output_checksum: f64,
}

/// The JSON document `bench` prints.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub reps: usize,
    /// Analytic cost ratio of the cascaded pair against the dense kernel:
    /// `2k / k²`.
    pub mac_ratio_cascade_over_dense: f64,
    /// Largest |cascade − rank-1 dense| over the guard input.
    pub guard_max_abs_diff: f64,
    pub guard_pass: bool,
    pub kernels: Vec<KernelTiming>,
}

fn rand_t(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * c * h * w)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    Tensor::new(n, c, h, w, data).unwrap()
}

fn strip_kernel(rng: &mut ChaCha8Rng, c: usize, kh: usize, kw: usize) -> ConvKernel {
    ConvKernel::new(rand_t(rng, c, c, kh, kw), None).unwrap()
}

/// Runs the cascade on a single-channel input and compares it against the
/// dense kernel formed by the outer product of the same two strips.
fn rank1_guard(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Result<f64> {
    let x = rand_t(rng, 1, 1, h, w);
    let row = rand_t(rng, 1, 1, 1, k);
    let col = rand_t(rng, 1, 1, k, 1);
    let outer: Vec<f64> = col
        .data()
        .iter()
        .flat_map(|&v| row.data().iter().map(move |&u| v * u))
        .collect();
    let dense = ConvKernel::new(Tensor::new(1, 1, k, k, outer)?, None)?;
    let row_k = ConvKernel::new(row, None)?;
    let col_k = ConvKernel::new(col, None)?;

    let cascaded = conv2d(&conv2d(&x, &row_k, Padding::Same)?, &col_k, Padding::Same)?;
    let reference = conv2d(&x, &dense, Padding::Same)?;
    let max_abs = cascaded
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(max_abs)
}

fn time_topology(
    topology: Topology,
    spec: &BenchSpec,
    input: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<KernelTiming> {
    let (k, c) = (spec.k, spec.channels);
    let dense = strip_kernel(rng, c, k, k);
    let row = strip_kernel(rng, c, 1, k);
    let col = strip_kernel(rng, c, k, 1);

    let run = |input: &Tensor| -> Result<Tensor> {
        match topology {
            Topology::Dense => conv2d(input, &dense, Padding::Same),
            Topology::Cascade => conv2d(&conv2d(input, &row, Padding::Same)?, &col, Padding::Same),
            Topology::Parallel => {
                let r = conv2d(input, &row, Padding::Same)?;
                let s = conv2d(input, &col, Padding::Same)?;
                add(&r, &s)
            }
        }
    };

    // Warm-up pass doubles as the checksum source.
    let output = run(input)?;
    let output_checksum = output.data().iter().sum();

    let mut times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let t = Instant::now();
        let out = run(input)?;
        times.push(t.elapsed().as_secs_f64());
        debug_assert_eq!(out.shape(), output.shape());
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;

    let per_output = (topology.macs_per_output_per_channel(k) * c) as u64;
    let outputs = (c * spec.h * spec.w) as u64;
    Ok(KernelTiming {
        kernel: topology,
        macs_per_output: per_output,
        total_macs: per_output * outputs,
        wall_clock: WallClock {
            mean_seconds: mean,
            std_seconds: var.sqrt(),
            note: "wall-clock timings vary run to run; all other fields are deterministic",
        },
        output_checksum,
    })
}

/// Times the requested topologies on one shared input and returns the full
/// report, guard included.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    if !STRIP_SIZES.contains(&spec.k) {
        return Err(TafeError::Usage(format!(
            "k must be one of {STRIP_SIZES:?}, got {}",
            spec.k
        )));
    }
    if spec.h < spec.k || spec.w < spec.k {
        return Err(TafeError::Usage(format!(
            "input {}x{} is smaller than the kernel ({})",
            spec.h, spec.w, spec.k
        )));
    }
    if spec.channels == 0 || spec.reps == 0 {
        return Err(TafeError::Usage("channels and reps must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let input = rand_t(&mut rng, 1, spec.channels, spec.h, spec.w);
    let guard_max_abs_diff = rank1_guard(&mut rng, spec.k, spec.h, spec.w)?;

    let topologies: &[Topology] = if spec.kernels.is_empty() {
        &Topology::ALL
    } else {
        &spec.kernels
    };
    let kernels = topologies
        .iter()
        .map(|&t| time_topology(t, spec, &input, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    Ok(BenchReport {
        k: spec.k,
        h: spec.h,
        w: spec.w,
        channels: spec.channels,
        reps: spec.reps,
        mac_ratio_cascade_over_dense: (2 * spec.k) as f64 / ((spec.k * spec.k) as f64),
        guard_max_abs_diff,
        guard_pass: guard_max_abs_diff < GUARD_TOL,
        kernels,
    })
}
