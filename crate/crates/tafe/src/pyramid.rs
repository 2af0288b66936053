//! The multi-scale feature pyramid and its exact bijection with a flat
//! token sequence.
//!
//! A pyramid layer holds a `(n, d, h_l, w_l)` feature map. Flattening lays
//! the layers out end to end in one `(n, d, T, 1)` tensor with
//! `T = Σ_l h_l·w_l`. Within a layer, tokens are ordered column-major: for
//! 1-based row `i` and column `j`, the 1-based token index is
//!
//! ```text
//! index(l, i, j) = offset_l + i + (j - 1) · h_l,   offset_l = Σ_{k<l} h_k·w_k
//! ```
//!
//! so the row index varies fastest within a column, and layer 1 starts at
//! token 1 (the offset sum is empty there). Both directions are pure
//! permutations and exact inverses of each other.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TafeError};
use crate::tensor::{conv2d, conv2d_strided, relu, ConvKernel, Padding, Tensor};

/// Number of pyramid levels the model works with (1/4 … 1/32 resolution).
pub const NUM_LAYERS: usize = 4;

/// Shape and token offset of one pyramid layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub h: usize,
    pub w: usize,
    /// 0-based token index where this layer's block begins.
    #[serde(skip)]
    pub offset: usize,
}

/// Geometry of a whole pyramid: per-layer extents plus cumulative offsets.
/// Supports any layer count ≥ 1 and non-square layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidGeometry {
    layers: Vec<LayerGeometry>,
    total: usize,
}

impl PyramidGeometry {
    pub fn new(dims: &[(usize, usize)]) -> Result<Self> {
        if dims.is_empty() {
            return Err(TafeError::Shape("pyramid needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut offset = 0usize;
        for &(h, w) in dims {
            if h == 0 || w == 0 {
                return Err(TafeError::Shape("pyramid layer with zero extent".into()));
            }
            layers.push(LayerGeometry { h, w, offset });
            offset += h * w;
        }
        Ok(Self {
            layers,
            total: offset,
        })
    }

    pub fn layers(&self) -> &[LayerGeometry] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.total
    }

    /// 0-based flat token index for layer `l` (0-based) at 0-based `(row, col)`.
    #[inline]
    pub fn token_index(&self, l: usize, row: usize, col: usize) -> usize {
        let g = &self.layers[l];
        debug_assert!(row < g.h && col < g.w);
        g.offset + col * g.h + row
    }

    /// The formula exactly as written: 1-based layer, row `i`, column `j`
    /// in, 1-based token index out.
    pub fn token_index_1based(&self, l: usize, i: usize, j: usize) -> usize {
        self.token_index(l - 1, i - 1, j - 1) + 1
    }

    fn to_sidecar(&self) -> GeometrySidecar {
        GeometrySidecar {
            layers: self.layers.clone(),
        }
    }
}

/// JSON sidecar shape: `{"layers":[{"h":..,"w":..},...]}`. Offsets are
/// recomputed on load, never stored.
#[derive(Serialize, Deserialize)]
struct GeometrySidecar {
    layers: Vec<LayerGeometry>,
}

pub fn geometry_to_json(g: &PyramidGeometry) -> String {
    serde_json::to_string(&g.to_sidecar()).expect("geometry serialization cannot fail")
}

pub fn geometry_from_json(s: &str) -> Result<PyramidGeometry> {
    let side: GeometrySidecar = serde_json::from_str(s)
        .map_err(|e| TafeError::Format(format!("bad geometry JSON: {e}")))?;
    let dims: Vec<(usize, usize)> = side.layers.iter().map(|l| (l.h, l.w)).collect();
    PyramidGeometry::new(&dims)
}

/// The 4-level feature pyramid: layer `l` holds a `(n, d, h_l, w_l)` map at
/// 1/4, 1/8, 1/16, 1/32 of the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    layers: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Validates the pyramid contract: exactly 4 layers, shared `(n, d)`,
    /// each successive layer exactly halving both spatial extents.
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.len() != NUM_LAYERS {
            return Err(TafeError::Shape(format!(
                "feature pyramid must have exactly {NUM_LAYERS} layers, got {}",
                layers.len()
            )));
        }
        let (n, d, _, _) = layers[0].shape();
        for pair in layers.windows(2) {
            let (an, ad, ah, aw) = pair[0].shape();
            let (bn, bd, bh, bw) = pair[1].shape();
            if an != n || bn != n || ad != d || bd != d {
                return Err(TafeError::Shape(
                    "pyramid layers must share batch and channel width".into(),
                ));
            }
            if ah != bh * 2 || aw != bw * 2 {
                return Err(TafeError::Shape(format!(
                    "pyramid layers must halve: ({ah},{aw}) then ({bh},{bw})"
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l]
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }

    pub fn geometry(&self) -> PyramidGeometry {
        geometry_of(&self.layers).expect("validated pyramid always has a geometry")
    }

    pub fn batch(&self) -> usize {
        self.layers[0].n()
    }

    pub fn width(&self) -> usize {
        self.layers[0].c()
    }

    pub fn flatten(&self) -> TokenSequence {
        flatten_layers(&self.layers).expect("validated pyramid always flattens")
    }
}

/// The pyramid flattened to `(n, d, T, 1)` plus the geometry needed to
/// invert the flattening without guessing shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub geometry: PyramidGeometry,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, geometry: PyramidGeometry) -> Result<Self> {
        let (_, _, t, one) = tokens.shape();
        if one != 1 || t != geometry.total_tokens() {
            return Err(TafeError::Shape(format!(
                "token tensor ({t},{one}) does not match geometry total {}",
                geometry.total_tokens()
            )));
        }
        Ok(Self { tokens, geometry })
    }
}

pub fn geometry_of(layers: &[Tensor]) -> Result<PyramidGeometry> {
    let dims: Vec<(usize, usize)> = layers.iter().map(|t| (t.h(), t.w())).collect();
    PyramidGeometry::new(&dims)
}

/// Flattens a stack of layers into one token sequence. Works for any layer
/// count and any (possibly non-square) extents; all layers must share
/// `(n, d)`.
pub fn flatten_layers(layers: &[Tensor]) -> Result<TokenSequence> {
    let geometry = geometry_of(layers)?;
    let (n, d, _, _) = layers[0].shape();
    for t in layers {
        if t.n() != n || t.c() != d {
            return Err(TafeError::Shape(
                "all layers must share batch and channel width to flatten".into(),
            ));
        }
    }
    let total = geometry.total_tokens();
    let mut out = vec![0.0; n * d * total];
    for (l, t) in layers.iter().enumerate() {
        let g = geometry.layers()[l];
        for bn in 0..n {
            for ch in 0..d {
                let dst_base = (bn * d + ch) * total + g.offset;
                for j in 0..g.w {
                    for i in 0..g.h {
                        out[dst_base + j * g.h + i] = t.at(bn, ch, i, j);
                    }
                }
            }
        }
    }
    let tokens = Tensor::from_parts(n, d, total, 1, out);
    Ok(TokenSequence { tokens, geometry })
}

/// Inverts `flatten_layers`, reading each layer's block back out of the
/// token sequence.
pub fn unflatten_tokens(seq: &TokenSequence) -> Result<Vec<Tensor>> {
    (0..seq.geometry.num_layers())
        .map(|l| extract_layer(&seq.tokens, &seq.geometry, l))
        .collect()
}

/// Reads a single layer `(n, d, h_l, w_l)` out of a token tensor.
pub fn extract_layer(tokens: &Tensor, geometry: &PyramidGeometry, l: usize) -> Result<Tensor> {
    let (n, d, t, one) = tokens.shape();
    if one != 1 || t != geometry.total_tokens() {
        return Err(TafeError::Shape(format!(
            "token tensor ({t},{one}) does not match geometry total {}",
            geometry.total_tokens()
        )));
    }
    if l >= geometry.num_layers() {
        return Err(TafeError::Shape(format!(
            "layer {l} out of range for {}-layer geometry",
            geometry.num_layers()
        )));
    }
    let g = geometry.layers()[l];
    let data = tokens.data();
    let mut out = vec![0.0; n * d * g.h * g.w];
    for bn in 0..n {
        for ch in 0..d {
            let src_base = (bn * d + ch) * t + g.offset;
            let dst_base = (bn * d + ch) * g.h * g.w;
            for j in 0..g.w {
                for i in 0..g.h {
                    out[dst_base + i * g.w + j] = data[src_base + j * g.h + i];
                }
            }
        }
    }
    Ok(Tensor::from_parts(n, d, g.h, g.w, out))
}

/// Scatters a layer back into a zero token tensor: the adjoint of
/// `extract_layer` and the building block of the flatten adjoint.
pub fn scatter_layer(
    layer: &Tensor,
    geometry: &PyramidGeometry,
    l: usize,
    into: &mut Tensor,
) -> Result<()> {
    let (n, d, t, _) = into.shape();
    let g = geometry.layers()[l];
    if layer.shape() != (n, d, g.h, g.w) {
        return Err(TafeError::Shape(format!(
            "layer shape {:?} does not match geometry layer {l} ({},{})",
            layer.shape(),
            g.h,
            g.w
        )));
    }
    let dst = into.data_mut();
    for bn in 0..n {
        for ch in 0..d {
            let dst_base = (bn * d + ch) * t + g.offset;
            for j in 0..g.w {
                for i in 0..g.h {
                    dst[dst_base + j * g.h + i] += layer.at(bn, ch, i, j);
                }
            }
        }
    }
    Ok(())
}

/// Backbone weights: a strided 3×3 conv stack (two stride-2 convs reach 1/4
/// resolution, one more per subsequent level), each conv followed by ReLU,
/// then a linear 1×1 projection per level onto the shared width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    /// Two stride-2 3×3 convs: `3 → d`, then `d → d`. Output is the 1/4 map.
    pub stem: Vec<ConvKernel>,
    /// Three stride-2 3×3 convs `d → d`, producing the 1/8, 1/16, 1/32 maps.
    pub down: Vec<ConvKernel>,
    /// Four linear 1×1 convs `d → d`, one per pyramid level.
    pub proj: Vec<ConvKernel>,
}

impl BackboneParams {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.stem.len() != 2 || self.down.len() != 3 || self.proj.len() != 4 {
            return Err(TafeError::Config(
                "backbone needs 2 stem, 3 down, 4 projection kernels".into(),
            ));
        }
        let check = |k: &ConvKernel, c_in, kh, kw, what: &str| -> Result<()> {
            if k.c_in() != c_in || k.c_out() != d || k.kh() != kh || k.kw() != kw {
                return Err(TafeError::Config(format!(
                    "{what} kernel must be ({d},{c_in},{kh},{kw}), got ({},{},{},{})",
                    k.c_out(),
                    k.c_in(),
                    k.kh(),
                    k.kw()
                )));
            }
            Ok(())
        };
        check(&self.stem[0], 3, 3, 3, "stem[0]")?;
        check(&self.stem[1], d, 3, 3, "stem[1]")?;
        for (i, k) in self.down.iter().enumerate() {
            check(k, d, 3, 3, &format!("down[{i}]"))?;
        }
        for (i, k) in self.proj.iter().enumerate() {
            check(k, d, 1, 1, &format!("proj[{i}]"))?;
        }
        Ok(())
    }
}

/// Runs the backbone on an image `(n, 3, H, W)` with `H, W` divisible
/// by 32, producing the 4-level pyramid at 1/4, 1/8, 1/16, 1/32.
pub fn extract_pyramid(image: &Tensor, params: &BackboneParams) -> Result<FeaturePyramid> {
    let (_, c, h, w) = image.shape();
    if c != 3 {
        return Err(TafeError::Shape(format!(
            "backbone expects a 3-channel image, got {c} channels"
        )));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(TafeError::Config(format!(
            "image extents must be divisible by 32, got {h}x{w}"
        )));
    }
    let d = params.stem[0].c_out();
    params.validate(d)?;

    let mut x = relu(&conv2d_strided(image, &params.stem[0], Padding::Same, 2)?);
    x = relu(&conv2d_strided(&x, &params.stem[1], Padding::Same, 2)?);
    let mut trunk = vec![x];
    for k in &params.down {
        let next = relu(&conv2d_strided(trunk.last().unwrap(), k, Padding::Same, 2)?);
        trunk.push(next);
    }
    let layers = trunk
        .iter()
        .zip(params.proj.iter())
        .map(|(t, p)| conv2d(t, p, Padding::Same))
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(layers)
}
