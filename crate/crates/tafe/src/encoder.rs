//! Plain pre-norm transformer encoder blocks over the multi-scale token
//! sequence: residual multi-head self-attention, then a residual GELU
//! feed-forward, both behind per-token layer normalization. Token geometry
//! passes through untouched.
//!
//! The pure entry points ([`mhsa`], [`encoder_block`]) evaluate through an
//! ephemeral tape, so they are bit-identical to the training path by
//! construction.

use rand::Rng;

use crate::autodiff::{Binder, ConvNodes, Graph, NodeId};
use crate::error::{Result, TafeError};
use crate::init;
use crate::pyramid::TokenSequence;
use crate::tensor::{ConvKernel, Padding, Tensor};

/// FFN hidden width as a multiple of the token width.
pub const FFN_EXPANSION: usize = 4;

/// Weights of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub heads: usize,
    /// Query/key/value/output projections: 1×1 convs `d → d`, bias-free.
    pub wq: ConvKernel,
    pub wk: ConvKernel,
    pub wv: ConvKernel,
    pub wo: ConvKernel,
    /// Feed-forward: 1×1 convs `d → 4d` and `4d → d`, with bias.
    pub ffn1: ConvKernel,
    pub ffn2: ConvKernel,
    /// Per-channel normalization parameters, `(1,d,1,1)` each.
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl EncoderParams {
    /// Seeded initialization: variance-preserving (gain-1) weights on the
    /// linear projections, gain-2 weights on the rectified feed-forward
    /// expansion, zero biases, unit normalization scales.
    pub fn init<R: Rng>(rng: &mut R, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TafeError::Config(format!(
                "token width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            wq: init::linear_conv_kernel(rng, d, d, 1, 1, false),
            wk: init::linear_conv_kernel(rng, d, d, 1, 1, false),
            wv: init::linear_conv_kernel(rng, d, d, 1, 1, false),
            wo: init::linear_conv_kernel(rng, d, d, 1, 1, false),
            ffn1: init::conv_kernel(rng, FFN_EXPANSION * d, d, 1, 1, true),
            ffn2: init::linear_conv_kernel(rng, d, FFN_EXPANSION * d, 1, 1, true),
            ln1_gamma: Tensor::filled(1, d, 1, 1, 1.0),
            ln1_beta: Tensor::zeros(1, d, 1, 1),
            ln2_gamma: Tensor::filled(1, d, 1, 1, 1.0),
            ln2_beta: Tensor::zeros(1, d, 1, 1),
        })
    }

    pub fn width(&self) -> usize {
        self.wq.c_in()
    }
}

/// Tape-bound mirror of [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub heads: usize,
    pub wq: ConvNodes,
    pub wk: ConvNodes,
    pub wv: ConvNodes,
    pub wo: ConvNodes,
    pub ffn1: ConvNodes,
    pub ffn2: ConvNodes,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
}

/// Binds every block parameter under `{prefix}.…` in the canonical order.
pub fn bind_encoder(b: &mut Binder, prefix: &str, p: &EncoderParams) -> EncoderNodes {
    EncoderNodes {
        heads: p.heads,
        wq: b.conv(&format!("{prefix}.wq"), &p.wq),
        wk: b.conv(&format!("{prefix}.wk"), &p.wk),
        wv: b.conv(&format!("{prefix}.wv"), &p.wv),
        wo: b.conv(&format!("{prefix}.wo"), &p.wo),
        ffn1: b.conv(&format!("{prefix}.ffn1"), &p.ffn1),
        ffn2: b.conv(&format!("{prefix}.ffn2"), &p.ffn2),
        ln1_gamma: b.tensor(format!("{prefix}.ln1.gamma"), &p.ln1_gamma),
        ln1_beta: b.tensor(format!("{prefix}.ln1.beta"), &p.ln1_beta),
        ln2_gamma: b.tensor(format!("{prefix}.ln2.gamma"), &p.ln2_gamma),
        ln2_beta: b.tensor(format!("{prefix}.ln2.beta"), &p.ln2_beta),
    }
}

fn proj(g: &mut Graph, x: NodeId, k: &ConvNodes) -> Result<NodeId> {
    g.conv2d(x, k.weights, k.bias, Padding::Same, 1)
}

/// Residual multi-head self-attention: `F + W_O · Attn(LN(F))`.
pub fn mhsa_graph(g: &mut Graph, tokens: NodeId, nodes: &EncoderNodes) -> Result<NodeId> {
    let normed = g.layernorm(tokens, nodes.ln1_gamma, nodes.ln1_beta)?;
    let q = proj(g, normed, &nodes.wq)?;
    let k = proj(g, normed, &nodes.wk)?;
    let v = proj(g, normed, &nodes.wv)?;
    let attn = g.attention(q, k, v, nodes.heads)?;
    let out = proj(g, attn, &nodes.wo)?;
    g.add(tokens, out)
}

/// One full encoder block: attention sublayer, then `X + FFN(LN(X))` with a
/// GELU between the feed-forward convs.
pub fn encoder_block_graph(g: &mut Graph, tokens: NodeId, nodes: &EncoderNodes) -> Result<NodeId> {
    let x = mhsa_graph(g, tokens, nodes)?;
    let normed = g.layernorm(x, nodes.ln2_gamma, nodes.ln2_beta)?;
    let hidden = proj(g, normed, &nodes.ffn1)?;
    let act = g.gelu(hidden);
    let ffn = proj(g, act, &nodes.ffn2)?;
    g.add(x, ffn)
}

fn run_pure(
    tokens: &TokenSequence,
    params: &EncoderParams,
    f: impl Fn(&mut Graph, NodeId, &EncoderNodes) -> Result<NodeId>,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g);
    let nodes = bind_encoder(&mut b, "enc", params);
    let input = g.input(tokens.tokens.clone());
    let out = f(&mut g, input, &nodes)?;
    TokenSequence::new(g.value(out).clone(), tokens.geometry.clone())
}

/// Pure attention sublayer over a token sequence; geometry is untouched.
pub fn mhsa(tokens: &TokenSequence, params: &EncoderParams) -> Result<TokenSequence> {
    run_pure(tokens, params, mhsa_graph)
}

/// Pure full encoder block over a token sequence; geometry is untouched.
pub fn encoder_block(tokens: &TokenSequence, params: &EncoderParams) -> Result<TokenSequence> {
    run_pure(tokens, params, encoder_block_graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::PyramidGeometry;
    use crate::tensor::{conv2d, layernorm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize, t: usize) -> TokenSequence {
        let data = (0..n * d * t).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let tokens = Tensor::new(n, d, t, 1, data).unwrap();
        let geometry = PyramidGeometry::new(&[(t, 1)]).unwrap();
        TokenSequence::new(tokens, geometry).unwrap()
    }

    fn zero_params(d: usize, heads: usize) -> EncoderParams {
        let zk = |c_out: usize, c_in: usize, bias: bool| {
            ConvKernel::new(
                Tensor::zeros(c_out, c_in, 1, 1),
                bias.then(|| Tensor::zeros(1, c_out, 1, 1)),
            )
            .unwrap()
        };
        EncoderParams {
            heads,
            wq: zk(d, d, false),
            wk: zk(d, d, false),
            wv: zk(d, d, false),
            wo: zk(d, d, false),
            ffn1: zk(FFN_EXPANSION * d, d, true),
            ffn2: zk(d, FFN_EXPANSION * d, true),
            ln1_gamma: Tensor::filled(1, d, 1, 1, 1.0),
            ln1_beta: Tensor::zeros(1, d, 1, 1),
            ln2_gamma: Tensor::filled(1, d, 1, 1, 1.0),
            ln2_beta: Tensor::zeros(1, d, 1, 1),
        }
    }

    #[test]
    fn zero_projections_make_the_block_an_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = rand_tokens(&mut rng, 2, 4, 6);
        let params = zero_params(4, 2);
        let out = mhsa(&tokens, &params).unwrap();
        assert_eq!(out.tokens, tokens.tokens);
        let out = encoder_block(&tokens, &params).unwrap();
        assert_eq!(out.tokens, tokens.tokens);
        assert_eq!(out.geometry, tokens.geometry);
    }

    #[test]
    fn single_token_attention_reduces_to_projected_norm() {
        // T = 1: softmax over one key is 1, so
        // mhsa(F) = F + W_O · W_V · LN(F)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let params = EncoderParams::init(&mut rng, d, 2).unwrap();
        let tokens = rand_tokens(&mut rng, 1, d, 1);
        let out = mhsa(&tokens, &params).unwrap();

        let ln = layernorm(
            &tokens.tokens,
            params.ln1_gamma.data(),
            params.ln1_beta.data(),
            crate::autodiff::LAYERNORM_EPS,
        )
        .unwrap();
        let v = conv2d(&ln, &params.wv, Padding::Same).unwrap();
        let o = conv2d(&v, &params.wo, Padding::Same).unwrap();
        let expect = crate::tensor::add(&tokens.tokens, &o).unwrap();
        assert!(out.tokens.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn block_preserves_shape_and_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::init(&mut rng, 8, 4).unwrap();
        let tokens = rand_tokens(&mut rng, 2, 8, 10);
        let out = encoder_block(&tokens, &params).unwrap();
        assert_eq!(out.tokens.shape(), tokens.tokens.shape());
        assert_eq!(out.geometry, tokens.geometry);
    }

    #[test]
    fn block_commutes_with_token_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let t = 7;
        let params = EncoderParams::init(&mut rng, d, 2).unwrap();
        let tokens = rand_tokens(&mut rng, 1, d, t);

        let mut perm: Vec<usize> = (0..t).collect();
        // Fisher-Yates with the seeded rng
        for i in (1..t).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let permute = |x: &Tensor| -> Tensor {
            let mut out = Tensor::zeros(1, d, t, 1);
            for c in 0..d {
                for (dst, src) in perm.iter().enumerate() {
                    out.set(0, c, dst, 0, x.at(0, c, *src, 0));
                }
            }
            out
        };

        let straight = encoder_block(&tokens, &params).unwrap();
        let permuted_in = TokenSequence::new(permute(&tokens.tokens), tokens.geometry.clone()).unwrap();
        let permuted_out = encoder_block(&permuted_in, &params).unwrap();
        let expect = permute(&straight.tokens);
        assert!(
            permuted_out.tokens.max_abs_diff(&expect) < 1e-10,
            "equivariance drift {}",
            permuted_out.tokens.max_abs_diff(&expect)
        );
    }

    #[test]
    fn block_gradients_pass_the_oracle() {
        use crate::autodiff::{grad_check, GradCheckSpec};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let params = EncoderParams::init(&mut rng, d, 2).unwrap();
        let tokens = rand_tokens(&mut rng, 1, d, 5);

        // parameter tensors in canonical bind order
        let tensors: Vec<Tensor> = {
            let mut g = Graph::new();
            let mut b = Binder::new(&mut g);
            bind_encoder(&mut b, "enc", &params);
            let bound = b.into_bound();
            bound.iter().map(|(_, id)| g.value(*id).clone()).collect()
        };

        let report = grad_check(
            &GradCheckSpec::new("encoder-block").with_probes(150),
            &tensors,
            |g, ids| {
                let mut it = ids.iter().copied();
                let mut conv = |bias: bool| ConvNodes {
                    weights: it.next().unwrap(),
                    bias: bias.then(|| it.next().unwrap()),
                };
                let nodes = EncoderNodes {
                    heads: 2,
                    wq: conv(false),
                    wk: conv(false),
                    wv: conv(false),
                    wo: conv(false),
                    ffn1: conv(true),
                    ffn2: conv(true),
                    ln1_gamma: it.next().unwrap(),
                    ln1_beta: it.next().unwrap(),
                    ln2_gamma: it.next().unwrap(),
                    ln2_beta: it.next().unwrap(),
                };
                let input = g.input(tokens.tokens.clone());
                let out = encoder_block_graph(g, input, &nodes)?;
                let sq = g.mul(out, out)?;
                Ok(g.sum(sq))
            },
        )
        .unwrap();
        assert!(report.pass, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(matches!(
            EncoderParams::init(&mut rng, 6, 4),
            Err(TafeError::Config(_))
        ));
    }
}
