//! Vision transformer with domain-conditioned self-attention.
//!
//! The backbone is a standard pre-norm ViT over single-channel images. In
//! conditioned mode each layer generates three d-vectors (query/key/value
//! conditioners) from its class token and appends them as an extra row to the
//! projected Q, K, V matrices before the per-head attention; the conditioner's
//! own output row is discarded so the token count stays fixed across layers.
//!
//! Parameters are partitioned into three disjoint sets: the frozen backbone,
//! the layer-norm affine parameters, and the conditioner parameters. The two
//! latter sets are the only ones updated during test-time adaptation.

use serde::{Deserialize, Serialize};

use crate::conditioners;
use crate::error::{DctError, DctResult};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-6;

/// Additive pre-softmax penalty used to force an attention score to zero
/// weight. exp(-1e30 - rowmax) underflows to exactly 0.
const MASK_NEG: f32 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Image side in pixels (square, single channel).
    pub image_size: usize,
    /// Patch side in pixels; must divide `image_size`.
    pub patch_size: usize,
    /// Token embedding width d; must be divisible by `num_heads`.
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Number of transformer blocks. Zero is tolerated for degenerate test
    /// configurations.
    pub depth: usize,
    pub mlp_ratio: f32,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> DctResult<()> {
        let fail = |message: String| Err(DctError::Config { message });
        if self.image_size == 0 || self.patch_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return fail("embed_dim and num_heads must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Patch grid side g = image_size / patch_size.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens N = g².
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Sequence length n = N + 1 (class token included).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f32 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Flattened pixels per patch (single channel).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Which of the three disjoint parameter sets a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Frozen backbone weights; never adapted.
    Backbone,
    /// Layer-norm gammas and betas (adaptable).
    LayerNorm,
    /// Conditioner generators, or static conditioner vectors in the
    /// ablation variant (adaptable).
    Conditioner,
}

/// How the per-layer conditioners are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionerSource {
    /// Generated from the class token by a per-layer affine map.
    Generator,
    /// Directly learnable per-layer vectors (ablation arm).
    Static,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// All model weights in a fixed canonical order; the checkpoint manifest uses
/// the same order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    cond_source: ConditionerSource,
    entries: Vec<ParamEntry>,
}

// Canonical entry indices.
const IDX_PATCH_W: usize = 0;
const IDX_PATCH_B: usize = 1;
const IDX_POS: usize = 2;
const IDX_CLS: usize = 3;
const PER_LAYER: usize = 12;

fn layer_base(l: usize) -> usize {
    4 + l * PER_LAYER
}

fn tail_base(depth: usize) -> usize {
    4 + depth * PER_LAYER
}

fn cond_base(depth: usize) -> usize {
    tail_base(depth) + 4
}

/// Expected (name, kind, shape) list for a config and conditioner source.
fn expected_entries(
    config: &ModelConfig,
    source: ConditionerSource,
) -> Vec<(String, ParamKind, Vec<usize>)> {
    let d = config.embed_dim;
    let h = config.mlp_hidden();
    let n = config.seq_len();
    let mut out: Vec<(String, ParamKind, Vec<usize>)> = vec![
        ("patch.weight".into(), ParamKind::Backbone, vec![config.patch_dim(), d]),
        ("patch.bias".into(), ParamKind::Backbone, vec![d]),
        ("pos_embed".into(), ParamKind::Backbone, vec![n, d]),
        ("cls_token".into(), ParamKind::Backbone, vec![1, d]),
    ];
    for l in 0..config.depth {
        out.push((format!("layers.{l}.ln1.gamma"), ParamKind::LayerNorm, vec![d]));
        out.push((format!("layers.{l}.ln1.beta"), ParamKind::LayerNorm, vec![d]));
        out.push((format!("layers.{l}.attn.wq"), ParamKind::Backbone, vec![d, d]));
        out.push((format!("layers.{l}.attn.wk"), ParamKind::Backbone, vec![d, d]));
        out.push((format!("layers.{l}.attn.wv"), ParamKind::Backbone, vec![d, d]));
        out.push((format!("layers.{l}.attn.wo"), ParamKind::Backbone, vec![d, d]));
        out.push((format!("layers.{l}.ln2.gamma"), ParamKind::LayerNorm, vec![d]));
        out.push((format!("layers.{l}.ln2.beta"), ParamKind::LayerNorm, vec![d]));
        out.push((format!("layers.{l}.mlp.w1"), ParamKind::Backbone, vec![d, h]));
        out.push((format!("layers.{l}.mlp.b1"), ParamKind::Backbone, vec![h]));
        out.push((format!("layers.{l}.mlp.w2"), ParamKind::Backbone, vec![h, d]));
        out.push((format!("layers.{l}.mlp.b2"), ParamKind::Backbone, vec![d]));
    }
    out.push(("final_ln.gamma".into(), ParamKind::LayerNorm, vec![d]));
    out.push(("final_ln.beta".into(), ParamKind::LayerNorm, vec![d]));
    out.push(("head.weight".into(), ParamKind::Backbone, vec![d, config.num_classes]));
    out.push(("head.bias".into(), ParamKind::Backbone, vec![config.num_classes]));
    for l in 0..config.depth {
        match source {
            ConditionerSource::Generator => {
                out.push((format!("gen.{l}.weight"), ParamKind::Conditioner, vec![d, 3 * d]));
                out.push((format!("gen.{l}.bias"), ParamKind::Conditioner, vec![3 * d]));
            }
            ConditionerSource::Static => {
                out.push((format!("static.{l}.q"), ParamKind::Conditioner, vec![1, d]));
                out.push((format!("static.{l}.k"), ParamKind::Conditioner, vec![1, d]));
                out.push((format!("static.{l}.v"), ParamKind::Conditioner, vec![1, d]));
            }
        }
    }
    out
}

impl ModelParams {
    /// Freshly initialized source model: Xavier-uniform weight matrices,
    /// zero biases, unit layer-norm gains, N(0, 0.02) position and class
    /// embeddings, and zero conditioner generators.
    pub fn init_source(config: &ModelConfig, seed: u64) -> DctResult<Self> {
        use rand::{Rng, SeedableRng};
        config.validate()?;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let spec = expected_entries(config, ConditionerSource::Generator);
        let mut entries = Vec::with_capacity(spec.len());
        for (name, kind, shape) in spec {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = if name.starts_with("gen.") {
                vec![0.0; numel]
            } else if name.ends_with(".gamma") {
                vec![1.0; numel]
            } else if name.ends_with(".beta") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                vec![0.0; numel]
            } else if name == "pos_embed" || name == "cls_token" {
                (0..numel).map(|_| sample_normal(&mut rng, 0.02)).collect()
            } else {
                // 2-D weight matrix: Xavier-uniform
                let fan_in = shape[0] as f64;
                let fan_out = shape[1] as f64;
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                (0..numel)
                    .map(|_| (rng.gen_range(-limit..limit)) as f32)
                    .collect()
            };
            entries.push(ParamEntry { name, kind, tensor: Tensor::from_parts(shape, data) });
        }
        Ok(ModelParams {
            config: config.clone(),
            cond_source: ConditionerSource::Generator,
            entries,
        })
    }

    /// Rebuild from raw tensors (checkpoint load). Validates names, order,
    /// and shapes against the canonical layout.
    pub fn from_entries(
        config: ModelConfig,
        source: ConditionerSource,
        tensors: Vec<(String, Tensor)>,
    ) -> DctResult<Self> {
        config.validate()?;
        let spec = expected_entries(&config, source);
        if tensors.len() != spec.len() {
            return Err(DctError::CheckpointMismatch {
                message: format!("expected {} tensors, got {}", spec.len(), tensors.len()),
            });
        }
        let mut entries = Vec::with_capacity(spec.len());
        for ((name, kind, shape), (got_name, tensor)) in spec.into_iter().zip(tensors) {
            if got_name != name {
                return Err(DctError::TensorMismatch {
                    name: got_name,
                    message: format!("expected tensor {name:?} at this position"),
                });
            }
            if tensor.shape() != shape.as_slice() {
                return Err(DctError::TensorMismatch {
                    name,
                    message: format!("shape {:?} does not match expected {:?}", tensor.shape(), shape),
                });
            }
            entries.push(ParamEntry { name, kind, tensor });
        }
        Ok(ModelParams { config, cond_source: source, entries })
    }

    pub fn conditioner_source(&self) -> ConditionerSource {
        self.cond_source
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    /// Replace the conditioner generators with zero-initialized static
    /// per-layer (q, k, v) vectors — the generator-free ablation arm.
    pub fn with_static_conditioners(&self) -> ModelParams {
        let d = self.config.embed_dim;
        let mut entries: Vec<ParamEntry> =
            self.entries[..cond_base(self.config.depth)].to_vec();
        for l in 0..self.config.depth {
            for suffix in ["q", "k", "v"] {
                entries.push(ParamEntry {
                    name: format!("static.{l}.{suffix}"),
                    kind: ParamKind::Conditioner,
                    tensor: Tensor::zeros(vec![1, d]),
                });
            }
        }
        ModelParams {
            config: self.config.clone(),
            cond_source: ConditionerSource::Static,
            entries,
        }
    }

    // ── canonical indices ────────────────────────────────────────────

    pub fn idx_patch_w(&self) -> usize {
        IDX_PATCH_W
    }
    pub fn idx_patch_b(&self) -> usize {
        IDX_PATCH_B
    }
    pub fn idx_pos(&self) -> usize {
        IDX_POS
    }
    pub fn idx_cls(&self) -> usize {
        IDX_CLS
    }
    pub fn idx_ln1(&self, l: usize) -> (usize, usize) {
        (layer_base(l), layer_base(l) + 1)
    }
    pub fn idx_wq(&self, l: usize) -> usize {
        layer_base(l) + 2
    }
    pub fn idx_wk(&self, l: usize) -> usize {
        layer_base(l) + 3
    }
    pub fn idx_wv(&self, l: usize) -> usize {
        layer_base(l) + 4
    }
    pub fn idx_wo(&self, l: usize) -> usize {
        layer_base(l) + 5
    }
    pub fn idx_ln2(&self, l: usize) -> (usize, usize) {
        (layer_base(l) + 6, layer_base(l) + 7)
    }
    pub fn idx_mlp(&self, l: usize) -> (usize, usize, usize, usize) {
        let b = layer_base(l);
        (b + 8, b + 9, b + 10, b + 11)
    }
    pub fn idx_final_ln(&self) -> (usize, usize) {
        let b = tail_base(self.config.depth);
        (b, b + 1)
    }
    pub fn idx_head(&self) -> (usize, usize) {
        let b = tail_base(self.config.depth);
        (b + 2, b + 3)
    }
    pub fn idx_generator(&self, l: usize) -> DctResult<(usize, usize)> {
        if self.cond_source != ConditionerSource::Generator {
            return Err(DctError::InvalidMode {
                message: "model carries static conditioners, not a generator".into(),
            });
        }
        let b = cond_base(self.config.depth) + 2 * l;
        Ok((b, b + 1))
    }
    pub fn idx_static(&self, l: usize) -> DctResult<(usize, usize, usize)> {
        if self.cond_source != ConditionerSource::Static {
            return Err(DctError::InvalidMode {
                message: "static conditioners requested outside the ablation variant".into(),
            });
        }
        let b = cond_base(self.config.depth) + 3 * l;
        Ok((b, b + 1, b + 2))
    }
}

fn sample_normal(rng: &mut rand::rngs::StdRng, std: f64) -> f32 {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, std).expect("valid std");
    normal.sample(rng) as f32
}

// ── graph binding ────────────────────────────────────────────────────

/// Model parameters registered as graph leaves for one forward/backward pass.
pub struct BoundParams<'a> {
    pub params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Register every parameter as a leaf; `trainable[i]` aligns with the
/// canonical entry order.
pub fn bind_params<'a>(
    g: &mut Graph,
    params: &'a ModelParams,
    trainable: &[bool],
) -> BoundParams<'a> {
    debug_assert_eq!(trainable.len(), params.num_entries());
    let vars = params
        .entries()
        .iter()
        .zip(trainable)
        .map(|(e, &t)| g.leaf(e.tensor.clone(), t))
        .collect();
    BoundParams { params, vars }
}

/// Bind with every parameter frozen (inference).
pub fn bind_frozen<'a>(g: &mut Graph, params: &'a ModelParams) -> BoundParams<'a> {
    let flags = vec![false; params.num_entries()];
    bind_params(g, params, &flags)
}

// ── attention primitives ─────────────────────────────────────────────

/// Raw correlation matrix Q·Kᵀ (unscaled; the 1/sqrt(d_head) factor is
/// applied by the attention wrappers).
pub fn attention_scores(g: &mut Graph, q: Var, k: Var) -> DctResult<Var> {
    let kt = g.transpose(k)?;
    g.matmul(q, kt)
}

/// Append one conditioner row to each of Q, K, V.
pub fn augment_qkv(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    cq: Var,
    ck: Var,
    cv: Var,
) -> DctResult<(Var, Var, Var)> {
    let qa = g.concat_rows(&[q, cq])?;
    let ka = g.concat_rows(&[k, ck])?;
    let va = g.concat_rows(&[v, cv])?;
    Ok((qa, ka, va))
}

/// One attention head's outputs plus the recorded weight/score nodes.
pub struct AttnOut {
    /// Attention output rows for the real tokens, `[n, d_head]`.
    pub out: Var,
    /// Row-stochastic weight matrix (augmented when conditioned).
    pub weights: Var,
    /// Unscaled scores Q·Kᵀ feeding the softmax.
    pub scores: Var,
}

/// Plain single-head attention softmax(QKᵀ·scale)·V.
pub fn plain_attention(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> DctResult<AttnOut> {
    let scores = attention_scores(g, q, k)?;
    let scaled = g.scale(scores, scale)?;
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok(AttnOut { out, weights, scores })
}

/// Single-head attention over augmented `[n+1, d_head]` inputs. The returned
/// `out` holds only the first `n_real` rows; the conditioner's own output row
/// is computed and discarded. With `mask_conditioner` set, the conditioner
/// key column is pushed to -inf before the softmax, which makes the result
/// equal plain attention over the first `n_real` rows.
pub fn conditioned_attention(
    g: &mut Graph,
    q_aug: Var,
    k_aug: Var,
    v_aug: Var,
    n_real: usize,
    scale: f64,
    mask_conditioner: bool,
) -> DctResult<AttnOut> {
    let m = g.value(q_aug).rows();
    if m != n_real + 1 {
        return Err(DctError::DimMismatch {
            op: "conditioned_attention",
            detail: format!("expected {} augmented rows, got {m}", n_real + 1),
        });
    }
    let scores = attention_scores(g, q_aug, k_aug)?;
    let mut scaled = g.scale(scores, scale)?;
    if mask_conditioner {
        let mut mask = vec![0.0f32; m * m];
        for r in 0..m {
            mask[r * m + (m - 1)] = MASK_NEG;
        }
        let mask = g.constant(Tensor::from_parts(vec![m, m], mask));
        scaled = g.add(scaled, mask)?;
    }
    let weights = g.softmax_rows(scaled)?;
    let full = g.matmul(weights, v_aug)?;
    let out = g.slice_rows(full, 0, n_real)?;
    Ok(AttnOut { out, weights, scores })
}

// ── forward pass ─────────────────────────────────────────────────────

/// Attention variant used by a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Plain self-attention; no conditioner row.
    Baseline,
    /// Domain-conditioned attention.
    Conditioned,
    /// Conditioned attention with the conditioner key score forced to -inf
    /// for every query (diagnostic mode; equals baseline output).
    ConditionedMasked,
}

impl ForwardMode {
    fn uses_conditioners(self) -> bool {
        !matches!(self, ForwardMode::Baseline)
    }
}

/// Which per-sample intermediates a forward pass should capture.
#[derive(Clone, Copy, Debug, Default)]
pub struct TraceOptions {
    pub attention: bool,
    pub class_tokens: bool,
    pub conditioners: bool,
}

impl TraceOptions {
    pub fn none() -> Self {
        TraceOptions::default()
    }

    pub fn all() -> Self {
        TraceOptions { attention: true, class_tokens: true, conditioners: true }
    }
}

/// Patch-grid geometry tag carried by attention records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub side: usize,
    pub patch_size: usize,
}

pub struct HeadRecord {
    /// Row-stochastic attention weights; `(n+1)×(n+1)` when a conditioner row
    /// is present, `n×n` otherwise.
    pub weights: Tensor,
    /// Unscaled scores before the softmax.
    pub scores: Tensor,
}

pub struct AttentionRecord {
    pub layer: usize,
    pub heads: Vec<HeadRecord>,
    pub includes_conditioner: bool,
    pub grid: TokenGrid,
}

/// Values of one layer's conditioner triple for one sample.
#[derive(Clone, Debug)]
pub struct ConditionerSnapshot {
    pub cq: Tensor,
    pub ck: Tensor,
    pub cv: Tensor,
}

#[derive(Default)]
pub struct SampleTrace {
    /// One record per layer (when attention tracing is on).
    pub attention: Vec<AttentionRecord>,
    /// Class token after each block, `[d]` per layer.
    pub class_tokens: Vec<Tensor>,
    /// Conditioner triples per layer (conditioned modes only).
    pub conditioners: Vec<ConditionerSnapshot>,
}

pub struct ForwardResult {
    /// `[batch, num_classes]` logits node.
    pub logits: Var,
    pub traces: Vec<SampleTrace>,
}

/// Extract one sample's flattened patch matrix `[N, patch_size²]` from a
/// `[b, H, W, 1]` (or `[b, H, W]`) image tensor.
pub fn patch_matrix(images: &Tensor, sample: usize, config: &ModelConfig) -> DctResult<Tensor> {
    let shape = images.shape();
    if shape.len() < 3 || shape[1] != config.image_size || shape[2] != config.image_size {
        return Err(DctError::DimMismatch {
            op: "patch_matrix",
            detail: format!(
                "image tensor shape {:?} does not match image_size {}",
                shape, config.image_size
            ),
        });
    }
    if shape.len() > 3 && shape[3] != 1 {
        return Err(DctError::DimMismatch {
            op: "patch_matrix",
            detail: "only single-channel images are supported".into(),
        });
    }
    let side = config.image_size;
    let p = config.patch_size;
    let grid = config.grid_side();
    let img = &images.data()[sample * side * side..(sample + 1) * side * side];
    let mut data = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for pr in 0..grid {
        for pc in 0..grid {
            for y in 0..p {
                for x in 0..p {
                    data.push(img[(pr * p + y) * side + pc * p + x]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![config.num_patches(), config.patch_dim()], data))
}

/// Tokenize one sample: project patches, prepend the class token at slot 0,
/// add positional embeddings. Returns the `[n, d]` token node.
pub fn patch_embed(
    g: &mut Graph,
    images: &Tensor,
    sample: usize,
    bound: &BoundParams,
) -> DctResult<Var> {
    let p = bound.params;
    let patches = patch_matrix(images, sample, &p.config)?;
    let patches = g.constant(patches);
    let proj = g.matmul(patches, bound.var(p.idx_patch_w()))?;
    let proj = g.add(proj, bound.var(p.idx_patch_b()))?;
    let tokens = g.concat_rows(&[bound.var(p.idx_cls()), proj])?;
    g.add(tokens, bound.var(p.idx_pos()))
}

fn conditioner_triple(
    g: &mut Graph,
    x1: Var,
    bound: &BoundParams,
    layer: usize,
) -> DctResult<conditioners::ConditionerVars> {
    let p = bound.params;
    match p.conditioner_source() {
        ConditionerSource::Generator => {
            let cls = g.slice_rows(x1, 0, 1)?;
            let (w, b) = p.idx_generator(layer)?;
            conditioners::generate(g, cls, bound.var(w), bound.var(b))
        }
        ConditionerSource::Static => {
            let (q, k, v) = p.idx_static(layer)?;
            Ok(conditioners::ConditionerVars {
                cq: bound.var(q),
                ck: bound.var(k),
                cv: bound.var(v),
            })
        }
    }
}

/// One pre-norm transformer block for a single sample's `[n, d]` tokens.
pub fn block_forward(
    g: &mut Graph,
    tokens: Var,
    bound: &BoundParams,
    layer: usize,
    mode: ForwardMode,
    trace: TraceOptions,
) -> DctResult<(Var, Option<AttentionRecord>, Option<ConditionerSnapshot>)> {
    let p = bound.params;
    let cfg = &p.config;
    let n = g.value(tokens).rows();
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (g1, b1) = p.idx_ln1(layer);
    let x1 = g.layer_norm(tokens, bound.var(g1), bound.var(b1), LN_EPS)?;

    let cond = if mode.uses_conditioners() {
        Some(conditioner_triple(g, x1, bound, layer)?)
    } else {
        None
    };

    let q = g.matmul(x1, bound.var(p.idx_wq(layer)))?;
    let k = g.matmul(x1, bound.var(p.idx_wk(layer)))?;
    let v = g.matmul(x1, bound.var(p.idx_wv(layer)))?;

    let (q, k, v) = match &cond {
        Some(c) => augment_qkv(g, q, k, v, c.cq, c.ck, c.cv)?,
        None => (q, k, v),
    };

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_records = Vec::new();
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let attn = match mode {
            ForwardMode::Baseline => plain_attention(g, qh, kh, vh, scale)?,
            ForwardMode::Conditioned => conditioned_attention(g, qh, kh, vh, n, scale, false)?,
            ForwardMode::ConditionedMasked => conditioned_attention(g, qh, kh, vh, n, scale, true)?,
        };
        if trace.attention {
            head_records.push(HeadRecord {
                weights: g.value(attn.weights).clone(),
                scores: g.value(attn.scores).clone(),
            });
        }
        head_outs.push(attn.out);
    }
    let merged = g.concat_cols(&head_outs)?;
    debug_assert_eq!(g.value(merged).shape(), &[n, d]);
    let proj = g.matmul(merged, bound.var(p.idx_wo(layer)))?;
    let res1 = g.add(tokens, proj)?;

    let (g2, b2) = p.idx_ln2(layer);
    let x2 = g.layer_norm(res1, bound.var(g2), bound.var(b2), LN_EPS)?;
    let (w1, bi1, w2, bi2) = p.idx_mlp(layer);
    let h1 = g.matmul(x2, bound.var(w1))?;
    let h1 = g.add(h1, bound.var(bi1))?;
    let act = g.gelu(h1)?;
    let h2 = g.matmul(act, bound.var(w2))?;
    let h2 = g.add(h2, bound.var(bi2))?;
    let out = g.add(res1, h2)?;

    let record = trace.attention.then(|| AttentionRecord {
        layer,
        heads: head_records,
        includes_conditioner: mode.uses_conditioners(),
        grid: TokenGrid { side: cfg.grid_side(), patch_size: cfg.patch_size },
    });
    let snapshot = match (&cond, trace.conditioners) {
        (Some(c), true) => Some(ConditionerSnapshot {
            cq: g.value(c.cq).clone(),
            ck: g.value(c.ck).clone(),
            cv: g.value(c.cv).clone(),
        }),
        _ => None,
    };
    Ok((out, record, snapshot))
}

/// Full forward pass over a batch of images. Returns the `[b, C]` logits node
/// and one trace per sample.
pub fn model_forward(
    g: &mut Graph,
    images: &Tensor,
    bound: &BoundParams,
    mode: ForwardMode,
    trace: TraceOptions,
) -> DctResult<ForwardResult> {
    let p = bound.params;
    let cfg = &p.config;
    let batch = images.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(DctError::DimMismatch { op: "model_forward", detail: "empty batch".into() });
    }
    let mut sample_logits = Vec::with_capacity(batch);
    let mut traces = Vec::with_capacity(batch);
    for s in 0..batch {
        let mut tokens = patch_embed(g, images, s, bound)?;
        let mut trace_out = SampleTrace::default();
        for l in 0..cfg.depth {
            let (next, record, snapshot) = block_forward(g, tokens, bound, l, mode, trace)?;
            tokens = next;
            if let Some(r) = record {
                trace_out.attention.push(r);
            }
            if let Some(c) = snapshot {
                trace_out.conditioners.push(c);
            }
            if trace.class_tokens {
                let t = g.value(tokens);
                let row: Vec<f32> = t.data()[..cfg.embed_dim].to_vec();
                trace_out.class_tokens.push(Tensor::from_parts(vec![cfg.embed_dim], row));
            }
        }
        let cls = g.slice_rows(tokens, 0, 1)?;
        let (fg, fb) = p.idx_final_ln();
        let normed = g.layer_norm(cls, bound.var(fg), bound.var(fb), LN_EPS)?;
        let (hw, hb) = p.idx_head();
        let logit = g.matmul(normed, bound.var(hw))?;
        let logit = g.add(logit, bound.var(hb))?;
        sample_logits.push(logit);
        traces.push(trace_out);
    }
    let logits = g.concat_rows(&sample_logits)?;
    Ok(ForwardResult { logits, traces })
}

/// Frozen-parameter forward returning logits values only.
pub fn forward_logits(
    params: &ModelParams,
    images: &Tensor,
    mode: ForwardMode,
) -> DctResult<Tensor> {
    let mut g = Graph::new();
    let bound = bind_frozen(&mut g, params);
    let out = model_forward(&mut g, images, &bound, mode, TraceOptions::none())?;
    Ok(g.value(out.logits).clone())
}

/// Row argmax of a logits tensor.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (rows, cols) = (logits.rows(), logits.cols());
    (0..rows)
        .map(|r| {
            let mut best = 0;
            for c in 1..cols {
                if logits.get2(r, c) > logits.get2(r, best) {
                    best = c;
                }
            }
            best
        })
        .collect()
}
