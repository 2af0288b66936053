//! Asymmetric feature enhancement: per pyramid layer, a 5×5 aggregation
//! followed by two strip-convolution blocks whose attention maps are summed.
//!
//! The anatomy block cascades each strip pair (a 1×k row conv feeding a k×1
//! column conv), which is algebraically a dense k×k convolution with a
//! rank-1 kernel; its wide effective footprint suits large organ-like
//! regions. The instrument block applies the k×1 and 1×k convs in parallel
//! and sums them, a cross-shaped footprint that responds preferentially to
//! thin elongated structures. Each block fuses its three branch outputs
//! (k ∈ {3, 5, 7}) with the aggregated map through a 1×1 conv and gates the
//! aggregated map elementwise with the result.
//!
//! Strip convs are bias-free and activation-free, which keeps the block
//! algebra exactly testable: the cascade equals one dense conv with the
//! outer-product kernel, and zero strips reduce a block to a pure
//! self-gating of the aggregated features.

use rand::Rng;

use crate::autodiff::{Binder, ConvNodes, Graph, NodeId};
use crate::error::{Result, TafeError};
use crate::init;
use crate::pyramid::FeaturePyramid;
use crate::tensor::{add, conv2d, mul, relu, ConvKernel, Padding, Tensor};

/// The three strip extents every block carries, in branch order.
pub const STRIP_SIZES: [usize; 3] = [3, 5, 7];

/// One branch's pair of strip kernels: `row` spans `1×k`, `col` spans `k×1`.
/// Both are bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct StripPair {
    pub row: ConvKernel,
    pub col: ConvKernel,
}

/// Which enhancement block a computation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    /// Cascaded strips (wide rank-1 footprint).
    Anatomy,
    /// Parallel summed strips (cross footprint).
    Instrument,
}

/// Parameters of one enhancement module instance (one pyramid layer, one
/// stage).
#[derive(Clone, Debug, PartialEq)]
pub struct AfeParams {
    /// 5×5 aggregation conv (`d → d`, bias allowed), shared by both blocks
    /// unless `aggregate_instrument` is present.
    pub aggregate: ConvKernel,
    /// Separate instrument-block aggregation when aggregation sharing is
    /// disabled.
    pub aggregate_instrument: Option<ConvKernel>,
    /// Cascade strip pairs, k = 3, 5, 7.
    pub anatomy: Vec<StripPair>,
    /// Parallel strip pairs, k = 3, 5, 7.
    pub instrument: Vec<StripPair>,
    /// 1×1 fusion conv of the anatomy block (`d → d`, bias allowed).
    pub fuse_anatomy: ConvKernel,
    /// 1×1 fusion conv of the instrument block.
    pub fuse_instrument: ConvKernel,
}

impl AfeParams {
    /// Seeded initialization: gain-2 fan-in weights on the rectified
    /// aggregation, gain-1 (variance-preserving) weights on the linear
    /// strips (bias-free), zero biases, and zero fusion kernels so the
    /// enhancement starts inactive.
    pub fn init<R: Rng>(rng: &mut R, d: usize, share_aggregation: bool) -> Self {
        let aggregate = init::conv_kernel(rng, d, d, 5, 5, true);
        let aggregate_instrument =
            (!share_aggregation).then(|| init::conv_kernel(rng, d, d, 5, 5, true));
        let strip_pairs = |rng: &mut R| -> Vec<StripPair> {
            STRIP_SIZES
                .iter()
                .map(|&k| StripPair {
                    row: init::linear_conv_kernel(rng, d, d, 1, k, false),
                    col: init::linear_conv_kernel(rng, d, d, k, 1, false),
                })
                .collect()
        };
        let anatomy = strip_pairs(rng);
        let instrument = strip_pairs(rng);
        Self {
            aggregate,
            aggregate_instrument,
            anatomy,
            instrument,
            // The fusion convs gate the enhancement into both streams
            // multiplicatively; starting them at zero keeps the opening
            // forward pass at encoder scale and lets the enhancement grow
            // by gradient.
            fuse_anatomy: init::zero_conv_kernel(d, d, 1, 1, true),
            fuse_instrument: init::zero_conv_kernel(d, d, 1, 1, true),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let conv = |k: &ConvKernel, kh: usize, kw: usize, what: &str| -> Result<()> {
            if k.c_out() != d || k.c_in() != d || k.kh() != kh || k.kw() != kw {
                return Err(TafeError::Config(format!(
                    "{what} must be ({d},{d},{kh},{kw}), got ({},{},{},{})",
                    k.c_out(),
                    k.c_in(),
                    k.kh(),
                    k.kw()
                )));
            }
            Ok(())
        };
        conv(&self.aggregate, 5, 5, "aggregate")?;
        if let Some(agg) = &self.aggregate_instrument {
            conv(agg, 5, 5, "aggregate_instrument")?;
        }
        for (block, pairs) in [("anatomy", &self.anatomy), ("instrument", &self.instrument)] {
            if pairs.len() != STRIP_SIZES.len() {
                return Err(TafeError::Config(format!(
                    "{block} block needs {} strip pairs, got {}",
                    STRIP_SIZES.len(),
                    pairs.len()
                )));
            }
            for (pair, &k) in pairs.iter().zip(STRIP_SIZES.iter()) {
                conv(&pair.row, 1, k, &format!("{block} row strip k={k}"))?;
                conv(&pair.col, k, 1, &format!("{block} col strip k={k}"))?;
                if pair.row.bias.is_some() || pair.col.bias.is_some() {
                    return Err(TafeError::Config(format!(
                        "{block} strip kernels must be bias-free"
                    )));
                }
            }
        }
        conv(&self.fuse_anatomy, 1, 1, "fuse_anatomy")?;
        conv(&self.fuse_instrument, 1, 1, "fuse_instrument")?;
        Ok(())
    }

    fn aggregation_for(&self, block: Block) -> &ConvKernel {
        match block {
            Block::Anatomy => &self.aggregate,
            Block::Instrument => self.aggregate_instrument.as_ref().unwrap_or(&self.aggregate),
        }
    }
}

/// Structural aggregation: 5×5 same-padded conv then ReLU. Both blocks read
/// the result.
pub fn aggregate(c_l: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    Ok(relu(&conv2d(c_l, kernel, Padding::Same)?))
}

/// Cascaded strip pair of branch `m`: row conv `1×k`, then column conv
/// `k×1`.
pub fn anatomy_branch(c_agg: &Tensor, params: &AfeParams, m: usize) -> Result<Tensor> {
    let pair = &params.anatomy[m];
    conv2d(&conv2d(c_agg, &pair.row, Padding::Same)?, &pair.col, Padding::Same)
}

/// Parallel strip pair of branch `m`: column conv plus row conv of the same
/// input.
pub fn instrument_branch(c_agg: &Tensor, params: &AfeParams, m: usize) -> Result<Tensor> {
    let pair = &params.instrument[m];
    add(
        &conv2d(c_agg, &pair.col, Padding::Same)?,
        &conv2d(c_agg, &pair.row, Padding::Same)?,
    )
}

/// One enhancement block: aggregate, sum the three strip branches with the
/// aggregated shortcut, fuse through 1×1, gate the aggregated map.
pub fn enhance_block(c_l: &Tensor, params: &AfeParams, block: Block) -> Result<Tensor> {
    let c_agg = aggregate(c_l, params.aggregation_for(block))?;
    let mut acc = match block {
        Block::Anatomy => anatomy_branch(&c_agg, params, 0)?,
        Block::Instrument => instrument_branch(&c_agg, params, 0)?,
    };
    for m in 1..STRIP_SIZES.len() {
        let s = match block {
            Block::Anatomy => anatomy_branch(&c_agg, params, m)?,
            Block::Instrument => instrument_branch(&c_agg, params, m)?,
        };
        acc = add(&acc, &s)?;
    }
    acc = add(&acc, &c_agg)?;
    let fuse = match block {
        Block::Anatomy => &params.fuse_anatomy,
        Block::Instrument => &params.fuse_instrument,
    };
    let fused = conv2d(&acc, fuse, Padding::Same)?;
    mul(&fused, &c_agg)
}

/// Enhancement of a whole pyramid: per layer, the sum of both blocks'
/// attention maps. Output layers keep their input shapes.
pub fn afe_forward(p: &FeaturePyramid, params: &[AfeParams]) -> Result<FeaturePyramid> {
    if params.len() != p.layers().len() {
        return Err(TafeError::Config(format!(
            "need one parameter set per pyramid layer: {} vs {}",
            params.len(),
            p.layers().len()
        )));
    }
    let enhanced = p
        .layers()
        .iter()
        .zip(params.iter())
        .map(|(c_l, pr)| {
            let a = enhance_block(c_l, pr, Block::Anatomy)?;
            let i = enhance_block(c_l, pr, Block::Instrument)?;
            add(&a, &i)
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(enhanced)
}

/// Tape-bound mirror of [`StripPair`].
#[derive(Clone, Copy, Debug)]
pub struct StripPairNodes {
    pub row: ConvNodes,
    pub col: ConvNodes,
}

/// Tape-bound mirror of [`AfeParams`].
#[derive(Clone, Debug)]
pub struct AfeNodes {
    pub aggregate: ConvNodes,
    pub aggregate_instrument: Option<ConvNodes>,
    pub anatomy: Vec<StripPairNodes>,
    pub instrument: Vec<StripPairNodes>,
    pub fuse_anatomy: ConvNodes,
    pub fuse_instrument: ConvNodes,
}

/// Binds every parameter under `{prefix}.…` in the canonical order.
pub fn bind_afe(b: &mut Binder, prefix: &str, p: &AfeParams) -> AfeNodes {
    let aggregate = b.conv(&format!("{prefix}.aggregate"), &p.aggregate);
    let aggregate_instrument = p
        .aggregate_instrument
        .as_ref()
        .map(|k| b.conv(&format!("{prefix}.aggregate_instrument"), k));
    let bind_pairs = |b: &mut Binder, block: &str, pairs: &[StripPair]| -> Vec<StripPairNodes> {
        pairs
            .iter()
            .zip(STRIP_SIZES.iter())
            .map(|(pair, k)| StripPairNodes {
                row: b.conv(&format!("{prefix}.{block}.k{k}.row"), &pair.row),
                col: b.conv(&format!("{prefix}.{block}.k{k}.col"), &pair.col),
            })
            .collect()
    };
    let anatomy = bind_pairs(b, "anatomy", &p.anatomy);
    let instrument = bind_pairs(b, "instrument", &p.instrument);
    let fuse_anatomy = b.conv(&format!("{prefix}.fuse_anatomy"), &p.fuse_anatomy);
    let fuse_instrument = b.conv(&format!("{prefix}.fuse_instrument"), &p.fuse_instrument);
    AfeNodes {
        aggregate,
        aggregate_instrument,
        anatomy,
        instrument,
        fuse_anatomy,
        fuse_instrument,
    }
}

fn conv_same(g: &mut Graph, x: NodeId, k: &ConvNodes) -> Result<NodeId> {
    g.conv2d(x, k.weights, k.bias, Padding::Same, 1)
}

/// Taped version of [`enhance_block`]; gradients flow into every bound
/// kernel.
pub fn enhance_block_graph(
    g: &mut Graph,
    c_l: NodeId,
    nodes: &AfeNodes,
    block: Block,
) -> Result<NodeId> {
    let agg_kernel = match block {
        Block::Anatomy => &nodes.aggregate,
        Block::Instrument => nodes.aggregate_instrument.as_ref().unwrap_or(&nodes.aggregate),
    };
    let pre = conv_same(g, c_l, agg_kernel)?;
    let c_agg = g.relu(pre);
    let pairs = match block {
        Block::Anatomy => &nodes.anatomy,
        Block::Instrument => &nodes.instrument,
    };
    let mut acc: Option<NodeId> = None;
    for pair in pairs {
        let s = match block {
            Block::Anatomy => {
                let row = conv_same(g, c_agg, &pair.row)?;
                conv_same(g, row, &pair.col)?
            }
            Block::Instrument => {
                let col = conv_same(g, c_agg, &pair.col)?;
                let row = conv_same(g, c_agg, &pair.row)?;
                g.add(col, row)?
            }
        };
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let summed = g.add(acc.expect("three branches always present"), c_agg)?;
    let fuse = match block {
        Block::Anatomy => &nodes.fuse_anatomy,
        Block::Instrument => &nodes.fuse_instrument,
    };
    let fused = conv_same(g, summed, fuse)?;
    g.mul(fused, c_agg)
}

/// Taped version of [`afe_forward`] over already-bound per-layer nodes.
pub fn afe_forward_graph(
    g: &mut Graph,
    layers: &[NodeId],
    nodes: &[AfeNodes],
) -> Result<Vec<NodeId>> {
    if layers.len() != nodes.len() {
        return Err(TafeError::Config(format!(
            "need one bound parameter set per layer: {} vs {}",
            nodes.len(),
            layers.len()
        )));
    }
    layers
        .iter()
        .zip(nodes.iter())
        .map(|(c_l, n)| {
            let a = enhance_block_graph(g, *c_l, n, Block::Anatomy)?;
            let i = enhance_block_graph(g, *c_l, n, Block::Instrument)?;
            g.add(a, i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Tensor::new(n, c, h, w, data).unwrap()
    }

    /// Per-channel delta kernel: identity under same-padded convolution.
    fn delta_kernel(d: usize, kh: usize, kw: usize, bias: bool) -> ConvKernel {
        let mut w = Tensor::zeros(d, d, kh, kw);
        for ch in 0..d {
            w.set(ch, ch, kh / 2, kw / 2, 1.0);
        }
        ConvKernel::new(w, bias.then(|| Tensor::zeros(1, d, 1, 1))).unwrap()
    }

    fn zero_strip(d: usize, k: usize) -> StripPair {
        StripPair {
            row: ConvKernel::new(Tensor::zeros(d, d, 1, k), None).unwrap(),
            col: ConvKernel::new(Tensor::zeros(d, d, k, 1), None).unwrap(),
        }
    }

    fn fixture_params(d: usize) -> AfeParams {
        AfeParams {
            aggregate: delta_kernel(d, 5, 5, true),
            aggregate_instrument: None,
            anatomy: STRIP_SIZES.iter().map(|&k| zero_strip(d, k)).collect(),
            instrument: STRIP_SIZES.iter().map(|&k| zero_strip(d, k)).collect(),
            fuse_anatomy: delta_kernel(d, 1, 1, true),
            fuse_instrument: delta_kernel(d, 1, 1, true),
        }
    }

    #[test]
    fn aggregate_delta_kernel_is_activation_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = rand_t(&mut rng, 1, 2, 6, 6);
        let out = aggregate(&c, &delta_kernel(2, 5, 5, true)).unwrap();
        assert_eq!(out, relu(&c));
        assert_eq!(out.shape(), c.shape());
    }

    #[test]
    fn aggregate_zero_input_zero_bias_is_zero() {
        let c = Tensor::zeros(1, 3, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut k = delta_kernel(3, 5, 5, true);
        k.weights = rand_t(&mut rng, 3, 3, 5, 5);
        let out = aggregate(&c, &k).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn anatomy_delta_cascade_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = rand_t(&mut rng, 1, 2, 5, 5);
        let mut params = fixture_params(2);
        params.anatomy[1] = StripPair {
            row: delta_kernel(2, 1, 5, false),
            col: delta_kernel(2, 5, 1, false),
        };
        let out = anatomy_branch(&c, &params, 1).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn anatomy_cascade_equals_outer_product_dense_conv() {
        // u = (1,2,1)^T after v = (1,0,-1): cascade == dense conv with u·v^T
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = rand_t(&mut rng, 1, 1, 7, 7);
        let mut params = fixture_params(1);
        let v = [1.0, 0.0, -1.0];
        let u = [1.0, 2.0, 1.0];
        params.anatomy[0] = StripPair {
            row: ConvKernel::new(Tensor::new(1, 1, 1, 3, v.to_vec()).unwrap(), None).unwrap(),
            col: ConvKernel::new(Tensor::new(1, 1, 3, 1, u.to_vec()).unwrap(), None).unwrap(),
        };
        let cascade = anatomy_branch(&c, &params, 0).unwrap();

        let mut dense = Tensor::zeros(1, 1, 3, 3);
        for (i, uv) in u.iter().enumerate() {
            for (j, vv) in v.iter().enumerate() {
                dense.set(0, 0, i, j, uv * vv);
            }
        }
        let dense_out = conv2d(&c, &ConvKernel::new(dense, None).unwrap(), Padding::Same).unwrap();
        assert!(
            cascade.max_abs_diff(&dense_out) < 1e-10,
            "max diff {}",
            cascade.max_abs_diff(&dense_out)
        );
    }

    #[test]
    fn separability_holds_for_all_strip_sizes_and_seeds() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for &k in &STRIP_SIZES {
                let c = rand_t(&mut rng, 1, 1, 9, 9);
                let u: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let row = ConvKernel::new(Tensor::new(1, 1, 1, k, v.clone()).unwrap(), None).unwrap();
                let col = ConvKernel::new(Tensor::new(1, 1, k, 1, u.clone()).unwrap(), None).unwrap();
                let cascade =
                    conv2d(&conv2d(&c, &row, Padding::Same).unwrap(), &col, Padding::Same).unwrap();

                let mut outer = Tensor::zeros(1, 1, k, k);
                for i in 0..k {
                    for j in 0..k {
                        outer.set(0, 0, i, j, u[i] * v[j]);
                    }
                }
                let dense =
                    conv2d(&c, &ConvKernel::new(outer, None).unwrap(), Padding::Same).unwrap();
                let diff = cascade.max_abs_diff(&dense);
                assert!(diff < 1e-10, "seed {seed} k {k}: diff {diff}");
            }
        }
    }

    #[test]
    fn instrument_delta_pair_doubles_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = rand_t(&mut rng, 1, 2, 4, 4);
        let mut params = fixture_params(2);
        params.instrument[2] = StripPair {
            row: delta_kernel(2, 1, 7, false),
            col: delta_kernel(2, 7, 1, false),
        };
        let out = instrument_branch(&c, &params, 2).unwrap();
        let doubled = add(&c, &c).unwrap();
        assert_eq!(out, doubled);
    }

    #[test]
    fn instrument_zero_column_leaves_row_conv_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = rand_t(&mut rng, 1, 1, 5, 5);
        let mut params = fixture_params(1);
        let row = ConvKernel::new(rand_t(&mut rng, 1, 1, 1, 3), None).unwrap();
        params.instrument[0] = StripPair {
            row: row.clone(),
            col: zero_strip(1, 3).col,
        };
        let out = instrument_branch(&c, &params, 0).unwrap();
        assert_eq!(out, conv2d(&c, &row, Padding::Same).unwrap());
    }

    #[test]
    fn instrument_branch_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = fixture_params(1);
        params.instrument[1] = StripPair {
            row: ConvKernel::new(rand_t(&mut rng, 1, 1, 1, 5), None).unwrap(),
            col: ConvKernel::new(rand_t(&mut rng, 1, 1, 5, 1), None).unwrap(),
        };
        let a = rand_t(&mut rng, 1, 1, 6, 6);
        let b = rand_t(&mut rng, 1, 1, 6, 6);
        let joint = instrument_branch(&add(&a, &b).unwrap(), &params, 1).unwrap();
        let split = add(
            &instrument_branch(&a, &params, 1).unwrap(),
            &instrument_branch(&b, &params, 1).unwrap(),
        )
        .unwrap();
        assert!(joint.max_abs_diff(&split) < 1e-12);
    }

    #[test]
    fn enhance_block_zero_input_zero_bias_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = AfeParams::init(&mut rng, 4, true);
        let c = Tensor::zeros(1, 4, 6, 6);
        for block in [Block::Anatomy, Block::Instrument] {
            let e = enhance_block(&c, &params, block).unwrap();
            assert!(e.data().iter().all(|v| *v == 0.0), "{block:?}");
        }
    }

    #[test]
    fn enhance_block_with_zero_strips_is_self_gating() {
        // S == 0 and identity fusion: E = C_agg ⊗ C_agg; with a delta
        // aggregation and nonnegative input, C_agg == C.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..32).map(|_| rng.random::<f64>() + 0.05).collect();
        let c = Tensor::new(1, 2, 4, 4, data).unwrap();
        let params = fixture_params(2);
        for block in [Block::Anatomy, Block::Instrument] {
            let e = enhance_block(&c, &params, block).unwrap();
            let gated = mul(&c, &c).unwrap();
            assert!(
                e.max_abs_diff(&gated) < 1e-12,
                "{block:?}: diff {}",
                e.max_abs_diff(&gated)
            );
        }
    }

    #[test]
    fn afe_forward_preserves_shapes_and_zero_propagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 4;
        let params: Vec<AfeParams> = (0..4).map(|_| AfeParams::init(&mut rng, d, true)).collect();
        let layers = vec![
            Tensor::zeros(2, d, 8, 8),
            Tensor::zeros(2, d, 4, 4),
            Tensor::zeros(2, d, 2, 2),
            Tensor::zeros(2, d, 1, 1),
        ];
        let shapes: Vec<_> = layers.iter().map(|t| t.shape()).collect();
        let p = FeaturePyramid::new(layers).unwrap();
        let e = afe_forward(&p, &params).unwrap();
        let out_shapes: Vec<_> = e.layers().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, out_shapes);
        for layer in e.layers() {
            assert!(layer.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn disabling_one_block_leaves_the_other() {
        // additive structure: E = anatomy + instrument, so zeroing the
        // instrument side's fusion output reduces to the anatomy block
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let mut params = AfeParams::init(&mut rng, d, true);
        params.fuse_instrument = ConvKernel::new(
            Tensor::zeros(d, d, 1, 1),
            Some(Tensor::zeros(1, d, 1, 1)),
        )
        .unwrap();
        let c = rand_t(&mut rng, 1, d, 6, 6);
        let anatomy_only = enhance_block(&c, &params, Block::Anatomy).unwrap();
        let both = add(
            &anatomy_only,
            &enhance_block(&c, &params, Block::Instrument).unwrap(),
        )
        .unwrap();
        assert_eq!(both, anatomy_only);
    }

    /// Mean branch-sum response over the pixels of a shape, with all-ones
    /// strip weights.
    fn mean_block_response(canvas: &Tensor, params: &AfeParams, block: Block) -> f64 {
        let mut acc = Tensor::zeros(1, 1, canvas.h(), canvas.w());
        for m in 0..STRIP_SIZES.len() {
            let s = match block {
                Block::Anatomy => anatomy_branch(canvas, params, m).unwrap(),
                Block::Instrument => instrument_branch(canvas, params, m).unwrap(),
            };
            acc = add(&acc, &s).unwrap();
        }
        let mut total = 0.0;
        let mut count = 0.0;
        for y in 0..canvas.h() {
            for x in 0..canvas.w() {
                if canvas.at(0, 0, y, x) > 0.0 {
                    total += acc.at(0, 0, y, x);
                    count += 1.0;
                }
            }
        }
        total / count
    }

    fn ones_strip_params() -> AfeParams {
        let ones_pair = |k: usize| StripPair {
            row: ConvKernel::new(Tensor::filled(1, 1, 1, k, 1.0), None).unwrap(),
            col: ConvKernel::new(Tensor::filled(1, 1, k, 1, 1.0), None).unwrap(),
        };
        AfeParams {
            aggregate: delta_kernel(1, 5, 5, false),
            aggregate_instrument: None,
            anatomy: STRIP_SIZES.iter().map(|&k| ones_pair(k)).collect(),
            instrument: STRIP_SIZES.iter().map(|&k| ones_pair(k)).collect(),
            fuse_anatomy: delta_kernel(1, 1, 1, false),
            fuse_instrument: delta_kernel(1, 1, 1, false),
        }
    }

    #[test]
    fn thin_bars_favor_the_parallel_block_and_disks_the_cascade() {
        let params = ones_strip_params();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);

            // 1-pixel-thick horizontal bar
            let mut bar = Tensor::zeros(1, 1, 20, 20);
            let y = rng.random_range(4..16);
            let x0 = rng.random_range(0..4);
            for x in x0..x0 + 14 {
                bar.set(0, 0, y, x, 1.0);
            }
            let inst = mean_block_response(&bar, &params, Block::Instrument);
            let anat = mean_block_response(&bar, &params, Block::Anatomy);
            assert!(
                inst > anat,
                "seed {seed}: bar instrument {inst} vs anatomy {anat}"
            );

            // filled disk of radius 6
            let mut disk = Tensor::zeros(1, 1, 20, 20);
            let (cy, cx) = (rng.random_range(8..12) as f64, rng.random_range(8..12) as f64);
            for y in 0..20 {
                for x in 0..20 {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if (dy * dy + dx * dx).sqrt() <= 6.0 {
                        disk.set(0, 0, y, x, 1.0);
                    }
                }
            }
            let inst = mean_block_response(&disk, &params, Block::Instrument);
            let anat = mean_block_response(&disk, &params, Block::Anatomy);
            assert!(
                anat > inst,
                "seed {seed}: disk anatomy {anat} vs instrument {inst}"
            );
        }
    }

    #[test]
    fn bar_max_activation_exceeds_isotropic_blob_under_row_strip() {
        // same-area comparison at k=7 with all-ones weights: a 1×14 bar vs
        // a 4×4-ish blob of 14 pixels (rows of 4,4,4,2)
        let row7 = ConvKernel::new(Tensor::filled(1, 1, 1, 7, 1.0), None).unwrap();
        let mut bar = Tensor::zeros(1, 1, 16, 16);
        for x in 1..15 {
            bar.set(0, 0, 8, x, 1.0);
        }
        let mut blob = Tensor::zeros(1, 1, 16, 16);
        let mut left = 14;
        for (dy, cap) in [(0, 4), (1, 4), (2, 4), (3, 4)] {
            for dx in 0..cap.min(left) {
                blob.set(0, 0, 6 + dy, 6 + dx, 1.0);
            }
            left -= cap.min(left);
        }
        let max_of = |t: &Tensor| {
            conv2d(t, &row7, Padding::Same)
                .unwrap()
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        };
        assert!(max_of(&bar) > max_of(&blob));
    }

    #[test]
    fn taped_block_matches_pure_block_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 3;
        for share in [true, false] {
            let params = AfeParams::init(&mut rng, d, share);
            let c = rand_t(&mut rng, 2, d, 5, 5);
            let pure_a = enhance_block(&c, &params, Block::Anatomy).unwrap();
            let pure_i = enhance_block(&c, &params, Block::Instrument).unwrap();
            let pure = add(&pure_a, &pure_i).unwrap();

            let mut g = Graph::new();
            let mut b = Binder::new(&mut g);
            let nodes = bind_afe(&mut b, "afe", &params);
            let c_node = g.input(c.clone());
            let outs = afe_forward_graph(&mut g, &[c_node], &[nodes]).unwrap();
            assert_eq!(g.value(outs[0]), &pure);
        }
    }

    #[test]
    fn afe_gradients_pass_the_oracle() {
        use crate::autodiff::{grad_check, GradCheckSpec};
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 2;
        let params = AfeParams::init(&mut rng, d, true);
        let c = rand_t(&mut rng, 1, d, 5, 5);
        // flatten all parameter tensors in bind order for the check
        let mut g_probe = Graph::new();
        let mut b = Binder::new(&mut g_probe);
        bind_afe(&mut b, "afe", &params);
        let names: Vec<String> = b.bound().iter().map(|(n, _)| n.clone()).collect();
        drop(b);
        let tensors: Vec<Tensor> = {
            let mut g = Graph::new();
            let mut b = Binder::new(&mut g);
            bind_afe(&mut b, "afe", &params);
            let pairs = b.into_bound();
            pairs.iter().map(|(_, id)| g.value(*id).clone()).collect()
        };
        assert_eq!(names.len(), tensors.len());

        let report = grad_check(
            &GradCheckSpec::new("afe-block").with_probes(160),
            &tensors,
            |g, ids| {
                // rebuild an AfeNodes view over the supplied leaves
                let mut cursor = 0usize;
                let mut next = || {
                    let id = ids[cursor];
                    cursor += 1;
                    id
                };
                let conv_with_bias = |next: &mut dyn FnMut() -> NodeId| ConvNodes {
                    weights: next(),
                    bias: Some(next()),
                };
                let conv_no_bias = |next: &mut dyn FnMut() -> NodeId| ConvNodes {
                    weights: next(),
                    bias: None,
                };
                let aggregate = conv_with_bias(&mut next);
                let pairs = |next: &mut dyn FnMut() -> NodeId| -> Vec<StripPairNodes> {
                    (0..3)
                        .map(|_| StripPairNodes {
                            row: conv_no_bias(next),
                            col: conv_no_bias(next),
                        })
                        .collect()
                };
                let anatomy = pairs(&mut next);
                let instrument = pairs(&mut next);
                let fuse_anatomy = conv_with_bias(&mut next);
                let fuse_instrument = conv_with_bias(&mut next);
                let nodes = AfeNodes {
                    aggregate,
                    aggregate_instrument: None,
                    anatomy,
                    instrument,
                    fuse_anatomy,
                    fuse_instrument,
                };
                let c_node = g.input(c.clone());
                let outs = afe_forward_graph(g, &[c_node], &[nodes])?;
                let sq = g.mul(outs[0], outs[0])?;
                Ok(g.sum(sq))
            },
        )
        .unwrap();
        assert!(report.pass, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn validate_rejects_biased_strips_and_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = AfeParams::init(&mut rng, 3, true);
        assert!(params.validate(3).is_ok());
        params.anatomy[0].row.bias = Some(Tensor::zeros(1, 3, 1, 1));
        assert!(matches!(params.validate(3), Err(TafeError::Config(_))));
        let params = AfeParams::init(&mut rng, 3, true);
        assert!(matches!(params.validate(4), Err(TafeError::Config(_))));
    }
}
