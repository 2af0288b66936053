//! Model assembly: configuration, seeded parameter construction, the
//! per-stage interaction between encoder tokens and the enhanced pyramid,
//! the segmentation head, and checkpoint serialization.
//!
//! The forward pass runs M stages. Each stage sends the token sequence
//! through one encoder block, enhances the incoming pyramid, and exchanges
//! the results: the next pyramid is the unflattened tokens plus the
//! enhancement, the next token sequence is the encoded tokens plus the
//! flattened enhancement. The head fuses the final pyramid at 1/4 scale and
//! classifies per pixel.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afe::{self, AfeNodes, AfeParams};
use crate::autodiff::{Binder, ConvNodes, Graph, NodeId};
use crate::encoder::{self, EncoderNodes, EncoderParams};
use crate::error::{Result, TafeError};
use crate::init;
use crate::io;
use crate::pyramid::{
    BackboneParams, FeaturePyramid, PyramidGeometry, TokenSequence, NUM_LAYERS,
};
use crate::tensor::{ConvKernel, Padding, Tensor};

/// Run configuration; JSON configs reject unknown keys, and omitted keys
/// Per-iteration learning-rate shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr` at every iteration.
    Constant,
    /// Half-cosine decay from `lr` at iteration 0 toward zero at the end;
    /// large early steps for fast descent, small late steps to settle.
    Cosine,
}

/// take these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TafeConfig {
    /// shared feature width
    pub d: usize,
    /// number of interaction stages (0 = pure backbone + head)
    pub m: usize,
    pub heads: usize,
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub lr: f64,
    /// SGD momentum coefficient in `[0, 1)`; 0 disables momentum
    pub momentum: f64,
    /// global gradient-norm ceiling; 0 disables clipping
    pub clip_norm: f64,
    /// per-iteration learning-rate shape: constant, or cosine decay to zero
    pub lr_schedule: LrSchedule,
    /// weight the loss by inverse class frequency (median-frequency
    /// balancing over the training set) so rare classes pull as hard as
    /// common ones
    pub class_balance: bool,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// ablation switch: when false, stages run the encoder only
    pub afe_enabled: bool,
    /// share one aggregation conv between the two enhancement blocks
    pub share_aggregation: bool,
}

impl Default for TafeConfig {
    fn default() -> Self {
        Self {
            d: 16,
            m: 2,
            heads: 4,
            classes: 4,
            h: 64,
            w: 64,
            lr: 0.1,
            momentum: 0.9,
            clip_norm: 1.0,
            lr_schedule: LrSchedule::Cosine,
            class_balance: true,
            iterations: 200,
            batch_size: 8,
            seed: 0,
            afe_enabled: true,
            share_aggregation: true,
        }
    }
}

impl TafeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h % 32 != 0 || self.w % 32 != 0 || self.h == 0 || self.w == 0 {
            return Err(TafeError::Config(format!(
                "input extents must be positive multiples of 32, got {}x{}",
                self.h, self.w
            )));
        }
        if self.classes < 2 {
            return Err(TafeError::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(TafeError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.batch_size == 0 {
            return Err(TafeError::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TafeError::Config(format!("learning rate {} unusable", self.lr)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(TafeError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(TafeError::Config(format!(
                "gradient-norm ceiling {} unusable",
                self.clip_norm
            )));
        }
        Ok(())
    }

    /// Token geometry of the 4-level pyramid this config produces.
    pub fn token_geometry(&self) -> Result<PyramidGeometry> {
        PyramidGeometry::new(&[
            (self.h / 4, self.w / 4),
            (self.h / 8, self.w / 8),
            (self.h / 16, self.w / 16),
            (self.h / 32, self.w / 32),
        ])
    }
}

/// Weights of one interaction stage: an encoder block plus one enhancement
/// parameter set per pyramid layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub encoder: EncoderParams,
    pub afe: Vec<AfeParams>,
}

/// Head weights: per-layer 3×3 fusion convs and the 1×1 classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub fuse: Vec<ConvKernel>,
    pub classify: ConvKernel,
}

/// The complete model.
#[derive(Clone, Debug, PartialEq)]
pub struct TafeModel {
    pub config: TafeConfig,
    pub backbone: BackboneParams,
    /// `(1, d, T, 1)`, broadcast-added to the tokens once, before stage 1
    pub pos_embed: Tensor,
    pub stages: Vec<StageParams>,
    pub head: HeadParams,
}

impl TafeModel {
    /// Seeded construction. Every weight draws from N(0, 0.02²) in a fixed
    /// order; biases start at zero, normalization scales at one. All
    /// parameters exist regardless of `afe_enabled`, so the two ablation
    /// arms share identical encoder initialization at equal seeds.
    pub fn init(config: &TafeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let backbone = BackboneParams {
            stem: vec![
                init::conv_kernel(&mut rng, d, 3, 3, 3, true),
                init::conv_kernel(&mut rng, d, d, 3, 3, true),
            ],
            down: (0..3)
                .map(|_| init::conv_kernel(&mut rng, d, d, 3, 3, true))
                .collect(),
            proj: (0..NUM_LAYERS)
                .map(|_| init::linear_conv_kernel(&mut rng, d, d, 1, 1, true))
                .collect(),
        };
        let tokens = config.token_geometry()?.total_tokens();
        let pos_embed = init::embed_tensor(&mut rng, 1, d, tokens, 1);
        let stages = (0..config.m)
            .map(|_| {
                Ok(StageParams {
                    encoder: EncoderParams::init(&mut rng, d, config.heads)?,
                    afe: (0..NUM_LAYERS)
                        .map(|_| AfeParams::init(&mut rng, d, config.share_aggregation))
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = HeadParams {
            fuse: (0..NUM_LAYERS)
                .map(|_| init::linear_conv_kernel(&mut rng, d, d, 3, 3, true))
                .collect(),
            classify: init::logit_conv_kernel(&mut rng, config.classes, d),
        };
        Ok(Self {
            config: config.clone(),
            backbone,
            pos_embed,
            stages,
            head,
        })
    }

    /// Visits every parameter tensor mutably, in the canonical (bind) order,
    /// with its canonical name. The checkpoint loader and the optimizer both
    /// walk through here.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        fn conv(name: String, k: &mut ConvKernel, f: &mut dyn FnMut(String, &mut Tensor)) {
            f(format!("{name}.weight"), &mut k.weights);
            if let Some(b) = k.bias.as_mut() {
                f(format!("{name}.bias"), b);
            }
        }
        let f = &mut f;
        for (i, k) in self.backbone.stem.iter_mut().enumerate() {
            conv(format!("backbone.stem{i}"), k, f);
        }
        for (i, k) in self.backbone.down.iter_mut().enumerate() {
            conv(format!("backbone.down{i}"), k, f);
        }
        for (i, k) in self.backbone.proj.iter_mut().enumerate() {
            conv(format!("backbone.proj{i}"), k, f);
        }
        f("pos_embed".into(), &mut self.pos_embed);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let enc = format!("stage{s}.encoder");
            let e = &mut stage.encoder;
            conv(format!("{enc}.wq"), &mut e.wq, f);
            conv(format!("{enc}.wk"), &mut e.wk, f);
            conv(format!("{enc}.wv"), &mut e.wv, f);
            conv(format!("{enc}.wo"), &mut e.wo, f);
            conv(format!("{enc}.ffn1"), &mut e.ffn1, f);
            conv(format!("{enc}.ffn2"), &mut e.ffn2, f);
            f(format!("{enc}.ln1.gamma"), &mut e.ln1_gamma);
            f(format!("{enc}.ln1.beta"), &mut e.ln1_beta);
            f(format!("{enc}.ln2.gamma"), &mut e.ln2_gamma);
            f(format!("{enc}.ln2.beta"), &mut e.ln2_beta);
            for (l, a) in stage.afe.iter_mut().enumerate() {
                let p = format!("stage{s}.afe{l}");
                conv(format!("{p}.aggregate"), &mut a.aggregate, f);
                if let Some(k) = a.aggregate_instrument.as_mut() {
                    conv(format!("{p}.aggregate_instrument"), k, f);
                }
                for (pair, ksize) in a.anatomy.iter_mut().zip(afe::STRIP_SIZES) {
                    conv(format!("{p}.anatomy.k{ksize}.row"), &mut pair.row, f);
                    conv(format!("{p}.anatomy.k{ksize}.col"), &mut pair.col, f);
                }
                for (pair, ksize) in a.instrument.iter_mut().zip(afe::STRIP_SIZES) {
                    conv(format!("{p}.instrument.k{ksize}.row"), &mut pair.row, f);
                    conv(format!("{p}.instrument.k{ksize}.col"), &mut pair.col, f);
                }
                conv(format!("{p}.fuse_anatomy"), &mut a.fuse_anatomy, f);
                conv(format!("{p}.fuse_instrument"), &mut a.fuse_instrument, f);
            }
        }
        for (l, k) in self.head.fuse.iter_mut().enumerate() {
            conv(format!("head.fuse{l}"), k, f);
        }
        conv("head.classify".into(), &mut self.head.classify, f);
    }

    /// Named parameter values in canonical order, derived from the binder so
    /// the names provably match the training tape.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g);
        bind_model(&mut b, self);
        b.into_bound()
            .into_iter()
            .map(|(name, id)| (name, g.value(id).clone()))
            .collect()
    }
}

/// Tape-bound backbone weights.
#[derive(Clone, Debug)]
pub struct BackboneNodes {
    pub stem: Vec<ConvNodes>,
    pub down: Vec<ConvNodes>,
    pub proj: Vec<ConvNodes>,
}

/// Tape-bound weights of one stage.
#[derive(Clone, Debug)]
pub struct StageNodes {
    pub encoder: EncoderNodes,
    pub afe: Vec<AfeNodes>,
}

/// Tape-bound head weights.
#[derive(Clone, Debug)]
pub struct HeadNodes {
    pub fuse: Vec<ConvNodes>,
    pub classify: ConvNodes,
}

/// The whole model on the tape.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub backbone: BackboneNodes,
    pub pos_embed: NodeId,
    pub stages: Vec<StageNodes>,
    pub head: HeadNodes,
}

/// Binds every model parameter in the canonical order.
pub fn bind_model(b: &mut Binder, m: &TafeModel) -> ModelNodes {
    let backbone = BackboneNodes {
        stem: m
            .backbone
            .stem
            .iter()
            .enumerate()
            .map(|(i, k)| b.conv(&format!("backbone.stem{i}"), k))
            .collect(),
        down: m
            .backbone
            .down
            .iter()
            .enumerate()
            .map(|(i, k)| b.conv(&format!("backbone.down{i}"), k))
            .collect(),
        proj: m
            .backbone
            .proj
            .iter()
            .enumerate()
            .map(|(i, k)| b.conv(&format!("backbone.proj{i}"), k))
            .collect(),
    };
    let pos_embed = b.tensor("pos_embed", &m.pos_embed);
    let stages = m
        .stages
        .iter()
        .enumerate()
        .map(|(s, stage)| StageNodes {
            encoder: encoder::bind_encoder(b, &format!("stage{s}.encoder"), &stage.encoder),
            afe: stage
                .afe
                .iter()
                .enumerate()
                .map(|(l, a)| afe::bind_afe(b, &format!("stage{s}.afe{l}"), a))
                .collect(),
        })
        .collect();
    let head = HeadNodes {
        fuse: m
            .head
            .fuse
            .iter()
            .enumerate()
            .map(|(l, k)| b.conv(&format!("head.fuse{l}"), k))
            .collect(),
        classify: b.conv("head.classify", &m.head.classify),
    };
    ModelNodes {
        backbone,
        pos_embed,
        stages,
        head,
    }
}

fn conv_node(g: &mut Graph, x: NodeId, k: &ConvNodes, stride: usize) -> Result<NodeId> {
    g.conv2d(x, k.weights, k.bias, Padding::Same, stride)
}

/// Taped backbone: strided conv+ReLU trunk, then per-level projections.
pub fn backbone_graph(g: &mut Graph, image: NodeId, nodes: &BackboneNodes) -> Result<Vec<NodeId>> {
    let mut x = conv_node(g, image, &nodes.stem[0], 2)?;
    x = g.relu(x);
    x = conv_node(g, x, &nodes.stem[1], 2)?;
    x = g.relu(x);
    let mut trunk = vec![x];
    for k in &nodes.down {
        let c = conv_node(g, *trunk.last().unwrap(), k, 2)?;
        trunk.push(g.relu(c));
    }
    trunk
        .iter()
        .zip(&nodes.proj)
        .map(|(t, p)| conv_node(g, *t, p, 1))
        .collect()
}

/// One taped interaction stage over bound inputs.
///
/// Returns `(tokens_out, layers_out)`:
/// `tokens_out = enc(F) + flatten(E)`, `layers_out[l] = unflatten(enc(F))[l] + E_l`.
/// With enhancement disabled both additions drop away.
pub fn stage_interact_graph(
    g: &mut Graph,
    tokens: NodeId,
    layers: &[NodeId],
    geometry: &PyramidGeometry,
    stage: &StageNodes,
    afe_enabled: bool,
) -> Result<(NodeId, Vec<NodeId>)> {
    let encoded = encoder::encoder_block_graph(g, tokens, &stage.encoder)?;
    let unflat = (0..geometry.num_layers())
        .map(|l| g.extract_layer(encoded, geometry, l))
        .collect::<Result<Vec<_>>>()?;
    if !afe_enabled {
        return Ok((encoded, unflat));
    }
    let enhanced = afe::afe_forward_graph(g, layers, &stage.afe)?;
    let layers_out = unflat
        .iter()
        .zip(&enhanced)
        .map(|(u, e)| g.add(*u, *e))
        .collect::<Result<Vec<_>>>()?;
    let enhanced_tokens = g.flatten_layers(&enhanced)?;
    let tokens_out = g.add(encoded, enhanced_tokens)?;
    Ok((tokens_out, layers_out))
}

/// Taped head: per-layer 3×3 fusion, bilinear upsampling of layers 2–4 to
/// 1/4 scale, summation, 1×1 classification, upsampling to full resolution.
pub fn head_graph(
    g: &mut Graph,
    layers: &[NodeId],
    head: &HeadNodes,
    h: usize,
    w: usize,
) -> Result<NodeId> {
    let (h4, w4) = (h / 4, w / 4);
    let mut acc: Option<NodeId> = None;
    for (l, (layer, fuse)) in layers.iter().zip(&head.fuse).enumerate() {
        let fused = conv_node(g, *layer, fuse, 1)?;
        let up = if l == 0 {
            fused
        } else {
            g.upsample_bilinear(fused, h4, w4)?
        };
        acc = Some(match acc {
            None => up,
            Some(a) => g.add(a, up)?,
        });
    }
    let summed = acc.expect("four pyramid layers");
    let logits = conv_node(g, summed, &head.classify, 1)?;
    g.upsample_bilinear(logits, h, w)
}

/// The full taped forward pass: image node in, `(n, K, H, W)` logits out.
pub fn forward_graph(
    g: &mut Graph,
    image: NodeId,
    nodes: &ModelNodes,
    config: &TafeConfig,
) -> Result<NodeId> {
    let (_, c, h, w) = g.value(image).shape();
    if c != 3 || h != config.h || w != config.w {
        return Err(TafeError::Shape(format!(
            "input must be (n,3,{},{}), got (_,{c},{h},{w})",
            config.h, config.w
        )));
    }
    let geometry = config.token_geometry()?;
    let layers0 = backbone_graph(g, image, &nodes.backbone)?;
    let flat = g.flatten_layers(&layers0)?;
    let mut tokens = g.add_batch_broadcast(flat, nodes.pos_embed)?;
    let mut layers = layers0;
    for stage in &nodes.stages {
        let (t, l) = stage_interact_graph(g, tokens, &layers, &geometry, stage, config.afe_enabled)?;
        tokens = t;
        layers = l;
    }
    head_graph(g, &layers, &nodes.head, config.h, config.w)
}

/// Pure forward pass over an owned model; runs an ephemeral tape so the
/// result is bit-identical to the training path.
pub fn forward(model: &TafeModel, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g);
    let nodes = bind_model(&mut b, model);
    let input = g.input(image.clone());
    let out = forward_graph(&mut g, input, &nodes, &model.config)?;
    Ok(g.value(out).clone())
}

/// Pure single-stage interaction, for inspection and tests.
pub fn stage_interact(
    tokens: &TokenSequence,
    pyramid: &FeaturePyramid,
    stage: &StageParams,
    afe_enabled: bool,
) -> Result<(TokenSequence, FeaturePyramid)> {
    let geometry = pyramid.geometry();
    if tokens.geometry != geometry {
        return Err(TafeError::Shape(
            "token geometry does not match the pyramid".into(),
        ));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g);
    let stage_nodes = StageNodes {
        encoder: encoder::bind_encoder(&mut b, "stage.encoder", &stage.encoder),
        afe: stage
            .afe
            .iter()
            .enumerate()
            .map(|(l, a)| afe::bind_afe(&mut b, &format!("stage.afe{l}"), a))
            .collect(),
    };
    let token_node = g.input(tokens.tokens.clone());
    let layer_nodes: Vec<NodeId> = pyramid
        .layers()
        .iter()
        .map(|l| g.input(l.clone()))
        .collect();
    let (t, l) = stage_interact_graph(&mut g, token_node, &layer_nodes, &geometry, &stage_nodes, afe_enabled)?;
    let tokens_out = TokenSequence::new(g.value(t).clone(), geometry)?;
    let layers_out = FeaturePyramid::new(l.iter().map(|id| g.value(*id).clone()).collect())?;
    Ok((tokens_out, layers_out))
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: TafeConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
}

/// Writes `manifest.json` plus one tensor file per parameter into `dir`.
pub fn save_checkpoint(model: &TafeModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, tensor) in model.named_params() {
        let file = format!("{name}.t1");
        io::write_tensor(&dir.join(&file), &tensor)?;
        entries.push(ParamEntry { name, file });
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        params: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| TafeError::Format(e.to_string()))?;
    io::write_atomic(&dir.join("manifest.json"), &json)
}

/// Rebuilds a model from a checkpoint directory, verifying that the stored
/// parameters cover the configuration exactly.
pub fn load_checkpoint(dir: &Path) -> Result<TafeModel> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path)
        .map_err(|e| TafeError::Data(format!("reading {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)
        .map_err(|e| TafeError::Format(format!("checkpoint manifest: {e}")))?;
    let mut stored = std::collections::HashMap::new();
    for entry in &manifest.params {
        let t = io::read_tensor(&dir.join(&entry.file))?;
        if stored.insert(entry.name.clone(), t).is_some() {
            return Err(TafeError::Format(format!(
                "duplicate parameter {} in checkpoint",
                entry.name
            )));
        }
    }
    let mut model = TafeModel::init(&manifest.config)?;
    let mut problem: Option<String> = None;
    model.for_each_param_mut(|name, slot| {
        if problem.is_some() {
            return;
        }
        match stored.remove(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                problem = Some(format!(
                    "parameter {name}: stored shape {:?} vs expected {:?}",
                    t.shape(),
                    slot.shape()
                ))
            }
            None => problem = Some(format!("parameter {name} missing from checkpoint")),
        }
    });
    if let Some(p) = problem {
        return Err(TafeError::Format(p));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(TafeError::Format(format!(
            "checkpoint holds unknown parameter {extra}"
        )));
    }
    Ok(model)
}
