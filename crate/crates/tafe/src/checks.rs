//! Named gradient-check suites: per-operation checks, composite-block
//! checks, and the end-to-end model check. The CLI's `gradcheck` command and
//! the acceptance suite both run these.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::afe::{self, AfeNodes, AfeParams, StripPairNodes};
use crate::autodiff::{grad_check, Binder, ConvNodes, Graph, GradCheckSpec, GradReport, NodeId};
use crate::encoder::{EncoderNodes, EncoderParams};
use crate::error::{Result, TafeError};
use crate::model::{
    forward_graph, BackboneNodes, HeadNodes, ModelNodes, StageNodes, TafeConfig, TafeModel,
};
use crate::pyramid::PyramidGeometry;
use crate::synthdata::{gen_scene, SceneSpec};
use crate::tensor::{ConvKernel, Padding, Tensor};

/// Which checks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Model,
    All,
}

impl FromStr for Scope {
    type Err = TafeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            other => Err(TafeError::Usage(format!(
                "unknown scope {other:?}; expected ops, blocks, model, or all"
            ))),
        }
    }
}

/// The JSON document `gradcheck` prints.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<GradReport>,
    pub pass: bool,
}

impl SuiteReport {
    fn from_checks(checks: Vec<GradReport>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self { checks, pass }
    }

    pub fn merge(reports: impl IntoIterator<Item = SuiteReport>) -> Self {
        let checks: Vec<GradReport> = reports.into_iter().flat_map(|r| r.checks).collect();
        Self::from_checks(checks)
    }
}

fn rand_t(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * c * h * w)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    Tensor::new(n, c, h, w, data).unwrap()
}

/// Values with magnitude in [0.3, 1.3]: safe distance from the ReLU kink
/// for a 1e-6 finite-difference step.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * c * h * w)
        .map(|_| {
            let mag = 0.3 + rng.random::<f64>();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(n, c, h, w, data).unwrap()
}

/// Scalarizes a node as sum(x ⊙ x), so every output coordinate influences
/// the loss nonlinearly.
fn sum_sq(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let sq = g.mul(x, x)?;
    Ok(g.sum(sq))
}

/// Reads node ids off a flat list in the canonical bind order, rebuilding
/// the structured node handles the graph builders expect.
struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(ids: &'a [NodeId]) -> Self {
        Self { ids, pos: 0 }
    }

    fn take(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }

    fn conv(&mut self, k: &ConvKernel) -> ConvNodes {
        ConvNodes {
            weights: self.take(),
            bias: k.bias.as_ref().map(|_| self.take()),
        }
    }

    fn encoder(&mut self, p: &EncoderParams) -> EncoderNodes {
        EncoderNodes {
            heads: p.heads,
            wq: self.conv(&p.wq),
            wk: self.conv(&p.wk),
            wv: self.conv(&p.wv),
            wo: self.conv(&p.wo),
            ffn1: self.conv(&p.ffn1),
            ffn2: self.conv(&p.ffn2),
            ln1_gamma: self.take(),
            ln1_beta: self.take(),
            ln2_gamma: self.take(),
            ln2_beta: self.take(),
        }
    }

    fn afe(&mut self, p: &AfeParams) -> AfeNodes {
        let aggregate = self.conv(&p.aggregate);
        let aggregate_instrument = p.aggregate_instrument.as_ref().map(|k| self.conv(k));
        let pairs = |c: &mut Self, pairs: &[afe::StripPair]| -> Vec<StripPairNodes> {
            pairs
                .iter()
                .map(|pair| StripPairNodes {
                    row: c.conv(&pair.row),
                    col: c.conv(&pair.col),
                })
                .collect()
        };
        let anatomy = pairs(self, &p.anatomy);
        let instrument = pairs(self, &p.instrument);
        AfeNodes {
            aggregate,
            aggregate_instrument,
            anatomy,
            instrument,
            fuse_anatomy: self.conv(&p.fuse_anatomy),
            fuse_instrument: self.conv(&p.fuse_instrument),
        }
    }

    fn backbone(&mut self, b: &crate::pyramid::BackboneParams) -> BackboneNodes {
        BackboneNodes {
            stem: b.stem.iter().map(|k| self.conv(k)).collect(),
            down: b.down.iter().map(|k| self.conv(k)).collect(),
            proj: b.proj.iter().map(|k| self.conv(k)).collect(),
        }
    }

    fn model(&mut self, m: &TafeModel) -> ModelNodes {
        ModelNodes {
            backbone: self.backbone(&m.backbone),
            pos_embed: self.take(),
            stages: m
                .stages
                .iter()
                .map(|s| StageNodes {
                    encoder: self.encoder(&s.encoder),
                    afe: s.afe.iter().map(|a| self.afe(a)).collect(),
                })
                .collect(),
            head: HeadNodes {
                fuse: m.head.fuse.iter().map(|k| self.conv(k)).collect(),
                classify: self.conv(&m.head.classify),
            },
        }
    }

    fn finish(self) -> Result<()> {
        if self.pos == self.ids.len() {
            Ok(())
        } else {
            Err(TafeError::Usage(format!(
                "parameter cursor consumed {} of {} leaves",
                self.pos,
                self.ids.len()
            )))
        }
    }
}

/// Parameter tensors of a binder run, in bind order.
fn bound_tensors(bind: impl FnOnce(&mut Binder)) -> Vec<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g);
    bind(&mut b);
    let bound = b.into_bound();
    bound
        .into_iter()
        .map(|(_, id)| g.value(id).clone())
        .collect()
}

/// One gradient check per differentiable operation.
pub fn ops_suite() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut checks = Vec::new();

    // dense conv with bias, input and weights both checked
    {
        let params = vec![
            rand_t(&mut rng, 1, 2, 5, 5),
            rand_t(&mut rng, 3, 2, 3, 3),
            rand_t(&mut rng, 1, 3, 1, 1),
        ];
        checks.push(grad_check(&GradCheckSpec::new("conv2d-dense"), &params, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), Padding::Same, 1)?;
            sum_sq(g, y)
        })?);
    }
    // strided conv
    {
        let params = vec![
            rand_t(&mut rng, 1, 2, 6, 6),
            rand_t(&mut rng, 2, 2, 3, 3),
            rand_t(&mut rng, 1, 2, 1, 1),
        ];
        checks.push(grad_check(&GradCheckSpec::new("conv2d-strided"), &params, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), Padding::Same, 2)?;
            sum_sq(g, y)
        })?);
    }
    // cascaded strip pair
    {
        let params = vec![
            rand_t(&mut rng, 1, 2, 6, 6),
            rand_t(&mut rng, 2, 2, 1, 5),
            rand_t(&mut rng, 2, 2, 5, 1),
        ];
        checks.push(grad_check(&GradCheckSpec::new("conv2d-strip-cascade"), &params, |g, ids| {
            let row = g.conv2d(ids[0], ids[1], None, Padding::Same, 1)?;
            let col = g.conv2d(row, ids[2], None, Padding::Same, 1)?;
            sum_sq(g, col)
        })?);
    }
    // elementwise add
    {
        let params = vec![rand_t(&mut rng, 2, 2, 3, 3), rand_t(&mut rng, 2, 2, 3, 3)];
        checks.push(grad_check(&GradCheckSpec::new("add"), &params, |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            sum_sq(g, y)
        })?);
    }
    // broadcast add over the batch
    {
        let params = vec![rand_t(&mut rng, 3, 2, 4, 1), rand_t(&mut rng, 1, 2, 4, 1)];
        checks.push(grad_check(&GradCheckSpec::new("add-batch-broadcast"), &params, |g, ids| {
            let y = g.add_batch_broadcast(ids[0], ids[1])?;
            sum_sq(g, y)
        })?);
    }
    // elementwise multiply
    {
        let params = vec![rand_t(&mut rng, 1, 3, 3, 3), rand_t(&mut rng, 1, 3, 3, 3)];
        checks.push(grad_check(&GradCheckSpec::new("mul"), &params, |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            sum_sq(g, y)
        })?);
    }
    // scalar scale
    {
        let params = vec![rand_t(&mut rng, 1, 2, 4, 4)];
        checks.push(grad_check(&GradCheckSpec::new("scale"), &params, |g, ids| {
            let y = g.scale(ids[0], 1.37);
            sum_sq(g, y)
        })?);
    }
    // relu, inputs held away from the kink
    {
        let params = vec![rand_away_from_zero(&mut rng, 2, 3, 4, 4)];
        checks.push(grad_check(&GradCheckSpec::new("relu"), &params, |g, ids| {
            let y = g.relu(ids[0]);
            sum_sq(g, y)
        })?);
    }
    // gelu (smooth everywhere)
    {
        let params = vec![rand_t(&mut rng, 2, 3, 4, 4)];
        checks.push(grad_check(&GradCheckSpec::new("gelu"), &params, |g, ids| {
            let y = g.gelu(ids[0]);
            sum_sq(g, y)
        })?);
    }
    // layer normalization with learned scale and shift
    {
        let params = vec![
            rand_t(&mut rng, 2, 4, 3, 1),
            rand_t(&mut rng, 1, 4, 1, 1),
            rand_t(&mut rng, 1, 4, 1, 1),
        ];
        checks.push(grad_check(&GradCheckSpec::new("layernorm"), &params, |g, ids| {
            let y = g.layernorm(ids[0], ids[1], ids[2])?;
            sum_sq(g, y)
        })?);
    }
    // multi-head attention over q, k, v
    {
        let params = vec![
            rand_t(&mut rng, 1, 4, 6, 1),
            rand_t(&mut rng, 1, 4, 6, 1),
            rand_t(&mut rng, 1, 4, 6, 1),
        ];
        checks.push(grad_check(&GradCheckSpec::new("attention"), &params, |g, ids| {
            let y = g.attention(ids[0], ids[1], ids[2], 2)?;
            sum_sq(g, y)
        })?);
    }
    // bilinear upsampling
    {
        let params = vec![rand_t(&mut rng, 1, 2, 3, 3)];
        checks.push(grad_check(&GradCheckSpec::new("upsample-bilinear"), &params, |g, ids| {
            let y = g.upsample_bilinear(ids[0], 6, 6)?;
            sum_sq(g, y)
        })?);
    }
    // flatten and per-layer extraction round trip
    {
        let params = vec![rand_t(&mut rng, 1, 2, 2, 2), rand_t(&mut rng, 1, 2, 1, 1)];
        let geometry = PyramidGeometry::new(&[(2, 2), (1, 1)])?;
        checks.push(grad_check(&GradCheckSpec::new("flatten-extract"), &params, move |g, ids| {
            let tokens = g.flatten_layers(&[ids[0], ids[1]])?;
            let l0 = g.extract_layer(tokens, &geometry, 0)?;
            let l1 = g.extract_layer(tokens, &geometry, 1)?;
            let s0 = sum_sq(g, l0)?;
            let s1 = sum_sq(g, l1)?;
            g.add(s0, s1)
        })?);
    }
    // softmax cross-entropy over class logits
    {
        let params = vec![rand_t(&mut rng, 2, 3, 2, 2)];
        let mask: Vec<u8> = vec![0, 1, 2, 0, 1, 2, 0, 1];
        checks.push(grad_check(&GradCheckSpec::new("ce-loss"), &params, move |g, ids| {
            g.ce_loss(ids[0], &mask)
        })?);
    }
    // class-weighted cross-entropy, nonuniform weights
    {
        let params = vec![rand_t(&mut rng, 2, 3, 2, 2)];
        let mask: Vec<u8> = vec![2, 1, 2, 0, 1, 2, 0, 1];
        let weights = [0.3, 1.0, 4.5];
        checks.push(grad_check(
            &GradCheckSpec::new("ce-loss-weighted"),
            &params,
            move |g, ids| g.ce_loss_weighted(ids[0], &mask, &weights),
        )?);
    }

    Ok(SuiteReport::from_checks(checks))
}

fn randomize_fuse(rng: &mut ChaCha8Rng, p: &mut AfeParams) {
    let d = p.fuse_anatomy.c_out();
    p.fuse_anatomy.weights = rand_t(rng, d, d, 1, 1);
    p.fuse_instrument.weights = rand_t(rng, d, d, 1, 1);
}

/// Gradient checks through the composite blocks.
pub fn blocks_suite() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB10C);
    let mut checks = Vec::new();

    // encoder block: tokens plus every weight
    {
        let p = EncoderParams::init(&mut rng, 4, 2)?;
        let tokens = rand_t(&mut rng, 1, 4, 5, 1);
        let mut params = vec![tokens];
        params.extend(bound_tensors(|b| {
            crate::encoder::bind_encoder(b, "enc", &p);
        }));
        let p2 = p.clone();
        checks.push(grad_check(
            &GradCheckSpec::new("encoder-block").with_probes(150),
            &params,
            move |g, ids| {
                let mut cur = Cursor::new(&ids[1..]);
                let nodes = cur.encoder(&p2);
                cur.finish()?;
                let y = crate::encoder::encoder_block_graph(g, ids[0], &nodes)?;
                sum_sq(g, y)
            },
        )?);
    }
    // enhancement over one layer, shared and split aggregation; fusion
    // kernels are re-randomized (they initialize to zero, which would turn
    // the strip gradients into vacuous 0-vs-0 comparisons)
    for (name, share) in [("afe-shared-aggregation", true), ("afe-split-aggregation", false)] {
        let mut p = AfeParams::init(&mut rng, 3, share);
        randomize_fuse(&mut rng, &mut p);
        let layer = rand_t(&mut rng, 1, 3, 6, 6);
        let mut params = vec![layer];
        params.extend(bound_tensors(|b| {
            afe::bind_afe(b, "afe", &p);
        }));
        let p2 = p.clone();
        checks.push(grad_check(
            &GradCheckSpec::new(name).with_probes(200),
            &params,
            move |g, ids| {
                let mut cur = Cursor::new(&ids[1..]);
                let nodes = cur.afe(&p2);
                cur.finish()?;
                let e = afe::afe_forward_graph(g, &ids[..1], std::slice::from_ref(&nodes))?;
                sum_sq(g, e[0])
            },
        )?);
    }
    // backbone: image through the strided trunk and projections
    {
        let cfg = TafeConfig {
            d: 4,
            m: 0,
            heads: 2,
            classes: 2,
            h: 32,
            w: 32,
            ..TafeConfig::default()
        };
        let model = TafeModel::init(&cfg)?;
        let image = rand_t(&mut rng, 1, 3, 32, 32);
        let mut params = vec![image];
        params.extend(bound_tensors(|b| {
            for (i, k) in model.backbone.stem.iter().enumerate() {
                b.conv(&format!("backbone.stem{i}"), k);
            }
            for (i, k) in model.backbone.down.iter().enumerate() {
                b.conv(&format!("backbone.down{i}"), k);
            }
            for (i, k) in model.backbone.proj.iter().enumerate() {
                b.conv(&format!("backbone.proj{i}"), k);
            }
        }));
        let m2 = model.clone();
        checks.push(grad_check(
            &GradCheckSpec::new("backbone").with_probes(300),
            &params,
            move |g, ids| {
                let mut cur = Cursor::new(&ids[1..]);
                let nodes = cur.backbone(&m2.backbone);
                cur.finish()?;
                let layers = crate::model::backbone_graph(g, ids[0], &nodes)?;
                let mut acc: Option<NodeId> = None;
                for l in layers {
                    let s = sum_sq(g, l)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s)?,
                    });
                }
                Ok(acc.expect("four layers"))
            },
        )?);
    }
    // one full interaction stage over a small pyramid
    {
        let d = 4;
        let enc = EncoderParams::init(&mut rng, d, 2)?;
        let afes: Vec<AfeParams> = (0..4)
            .map(|_| {
                let mut p = AfeParams::init(&mut rng, d, true);
                randomize_fuse(&mut rng, &mut p);
                p
            })
            .collect();
        let dims = [(8, 8), (4, 4), (2, 2), (1, 1)];
        let geometry = PyramidGeometry::new(&dims)?;
        let tokens = rand_t(&mut rng, 1, d, geometry.total_tokens(), 1);
        let layers: Vec<Tensor> = dims.iter().map(|&(h, w)| rand_t(&mut rng, 1, d, h, w)).collect();

        let mut params = vec![tokens];
        params.extend(layers);
        params.extend(bound_tensors(|b| {
            crate::encoder::bind_encoder(b, "enc", &enc);
            for (l, a) in afes.iter().enumerate() {
                afe::bind_afe(b, &format!("afe{l}"), a);
            }
        }));
        let enc2 = enc.clone();
        let afes2 = afes.clone();
        checks.push(grad_check(
            &GradCheckSpec::new("stage-interact").with_probes(300),
            &params,
            move |g, ids| {
                let mut cur = Cursor::new(&ids[5..]);
                let stage = StageNodes {
                    encoder: cur.encoder(&enc2),
                    afe: afes2.iter().map(|a| cur.afe(a)).collect(),
                };
                cur.finish()?;
                let (t, layers) = crate::model::stage_interact_graph(
                    g, ids[0], &ids[1..5], &geometry, &stage, true,
                )?;
                let mut acc = sum_sq(g, t)?;
                for l in layers {
                    let s = sum_sq(g, l)?;
                    acc = g.add(acc, s)?;
                }
                Ok(acc)
            },
        )?);
    }
    // segmentation head over a pyramid
    {
        let cfg = TafeConfig {
            d: 4,
            m: 0,
            heads: 2,
            classes: 3,
            h: 32,
            w: 32,
            ..TafeConfig::default()
        };
        let model = TafeModel::init(&cfg)?;
        let dims = [(8, 8), (4, 4), (2, 2), (1, 1)];
        let layers: Vec<Tensor> = dims.iter().map(|&(h, w)| rand_t(&mut rng, 1, 4, h, w)).collect();
        let mut params = layers;
        params.extend(bound_tensors(|b| {
            for (l, k) in model.head.fuse.iter().enumerate() {
                b.conv(&format!("head.fuse{l}"), k);
            }
            b.conv("head.classify", &model.head.classify);
        }));
        let m2 = model.clone();
        checks.push(grad_check(
            &GradCheckSpec::new("segmentation-head").with_probes(300),
            &params,
            move |g, ids| {
                let mut cur = Cursor::new(&ids[4..]);
                let head = HeadNodes {
                    fuse: m2.head.fuse.iter().map(|k| cur.conv(k)).collect(),
                    classify: cur.conv(&m2.head.classify),
                };
                cur.finish()?;
                let logits = crate::model::head_graph(g, &ids[..4], &head, 32, 32)?;
                sum_sq(g, logits)
            },
        )?);
    }

    Ok(SuiteReport::from_checks(checks))
}

/// The end-to-end check: a 32×32 scene through the full model into the
/// cross-entropy loss, probed at evenly spread coordinates.
pub fn model_suite() -> Result<SuiteReport> {
    let cfg = TafeConfig {
        d: 8,
        m: 1,
        heads: 2,
        classes: 4,
        h: 32,
        w: 32,
        ..TafeConfig::default()
    };
    let mut model = TafeModel::init(&cfg)?;
    // Fusion kernels initialize to zero, which silences the strip-kernel
    // gradients; fill every all-zero weight with noise so the check probes
    // a general point of the full parameter space.
    let mut noise = ChaCha8Rng::seed_from_u64(0x906);
    model.for_each_param_mut(|name, t| {
        if name.ends_with(".weight") && t.data().iter().all(|&v| v == 0.0) {
            let (n, c, h, w) = t.shape();
            *t = rand_t(&mut noise, n, c, h, w);
        }
    });
    let scene = gen_scene(&SceneSpec { h: 32, w: 32, seed: 77 })?;
    let labels = scene.labels();

    let params = bound_tensors(|b| {
        crate::model::bind_model(b, &model);
    });
    let m2 = model.clone();
    let image = scene.image.clone();
    let check = grad_check(
        &GradCheckSpec::new("full-model").with_probes(256),
        &params,
        move |g, ids| {
            let mut cur = Cursor::new(ids);
            let nodes = cur.model(&m2);
            cur.finish()?;
            let input = g.input(image.clone());
            let logits = forward_graph(g, input, &nodes, &m2.config)?;
            g.ce_loss(logits, &labels)
        },
    )?;
    Ok(SuiteReport::from_checks(vec![check]))
}

/// Runs the selected scope.
pub fn run_scope(scope: Scope) -> Result<SuiteReport> {
    match scope {
        Scope::Ops => ops_suite(),
        Scope::Blocks => blocks_suite(),
        Scope::Model => model_suite(),
        Scope::All => Ok(SuiteReport::merge([ops_suite()?, blocks_suite()?, model_suite()?])),
    }
}

/// Negative control: an operation whose hand-coded backward rule is wrong
/// on purpose. A healthy harness must fail this check.
pub fn corrupted_control() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBAD);
    let params = vec![rand_t(&mut rng, 1, 2, 3, 3)];
    let check = grad_check(
        &GradCheckSpec::new("corrupted-scale-control"),
        &params,
        |g, ids| {
            let y = g.corrupted_scale(ids[0], 1.7);
            sum_sq(g, y)
        },
    )?;
    Ok(SuiteReport::from_checks(vec![check]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_check_passes() {
        let report = ops_suite().unwrap();
        for c in &report.checks {
            assert!(c.pass, "{} failed with rel err {}", c.name, c.max_rel_err);
        }
        assert!(report.pass);
        assert_eq!(report.checks.len(), 15);
    }

    #[test]
    fn every_block_check_passes() {
        let report = blocks_suite().unwrap();
        for c in &report.checks {
            assert!(c.pass, "{} failed with rel err {}", c.name, c.max_rel_err);
        }
        assert!(report.pass);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let report = corrupted_control().unwrap();
        assert!(!report.pass, "the deliberately wrong rule must fail its check");
        assert!(report.checks[0].max_rel_err > 1e-2);
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("ops".parse::<Scope>().unwrap(), Scope::Ops);
        assert_eq!("all".parse::<Scope>().unwrap(), Scope::All);
        assert!("network".parse::<Scope>().is_err());
    }
}
