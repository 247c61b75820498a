//! Parallel two-stream encoder–decoder.
//!
//! The content stream `h` starts at `patch_embed(x) + pos` and runs pre-norm
//! self-attention blocks under the content mask. The query stream `g` starts
//! at `pos` and runs pre-norm cross-attention blocks (queries from `g`,
//! keys/values from `h`) under the query mask. Decoder block `k` is paired
//! with encoder layer `depth - decoder_depth + k` and by default reads that
//! layer's *output*. A prediction head maps the final `g` to patch pixels.
//!
//! Linear weights are stored `in × out` and applied as `x·W + b`.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numerics::{Mask, NumericsError, Scalar, Tape, Tensor, Var, LAYERNORM_EPS};
use crate::objective::{loss_on_tape, LossKind};
use crate::patching::{sincos_table, PatchError, PatchSequence};
use crate::permutation::PermutationPlan;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {got} tokens, model expects {expected}")]
    TokenCount { expected: usize, got: usize },
    #[error("input patch dim {got} does not match model patch dim {expected}")]
    PatchDim { expected: usize, got: usize },
    #[error("layer {layer} out of range ({len} layers)")]
    Layer { layer: usize, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Mlp,
    Transformer,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Mlp => "mlp",
            HeadKind::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(HeadKind::Linear),
            "mlp" => Some(HeadKind::Mlp),
            "transformer" => Some(HeadKind::Transformer),
            _ => None,
        }
    }
}

/// Deliberate mask damage used as a negative control for leakage probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskCorruption {
    None,
    /// Query stream may attend to its own token's content.
    QueryDiagonal,
    /// Content stream sees every token regardless of order.
    ContentFull,
}

impl MaskCorruption {
    pub fn code(self) -> u32 {
        match self {
            MaskCorruption::None => 0,
            MaskCorruption::QueryDiagonal => 1,
            MaskCorruption::ContentFull => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(MaskCorruption::None),
            1 => Some(MaskCorruption::QueryDiagonal),
            2 => Some(MaskCorruption::ContentFull),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Encoder depth `M`.
    pub depth: usize,
    /// Number of decoder blocks, `1..=depth`.
    pub decoder_depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub head: HeadKind,
    pub head_hidden_dim: usize,
    /// Decoder blocks reuse the paired encoder block's parameters.
    pub share_weights: bool,
    /// Decoder block reads the paired encoder layer's input instead of its output.
    pub decoder_reads_previous_layer: bool,
    pub mask_corruption: MaskCorruption,
}

impl ModelConfig {
    /// 32×32 RGB, 4×4 patches, D=64, two layers, four heads.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            depth: 2,
            decoder_depth: 2,
            n_heads: 4,
            mlp_ratio: 4,
            head: HeadKind::Mlp,
            head_hidden_dim: 64,
            share_weights: false,
            decoder_reads_previous_layer: false,
            mask_corruption: MaskCorruption::None,
        }
    }

    /// Tiny configuration for finite-difference checks (D=8, M=2, 4 tokens).
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            decoder_depth: 2,
            n_heads: 2,
            mlp_ratio: 4,
            head: HeadKind::Mlp,
            head_hidden_dim: 8,
            share_weights: false,
            decoder_reads_previous_layer: false,
            mask_corruption: MaskCorruption::None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 {
            return err("channels must be positive".into());
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return err(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4) {
            return err(format!(
                "embed_dim {} must be a positive multiple of 4",
                self.embed_dim
            ));
        }
        if self.depth == 0 {
            return err("depth must be at least 1".into());
        }
        if self.decoder_depth == 0 || self.decoder_depth > self.depth {
            return err(format!(
                "decoder_depth {} must be in 1..={}",
                self.decoder_depth, self.depth
            ));
        }
        if self.mlp_ratio == 0 || self.head_hidden_dim == 0 {
            return err("mlp_ratio and head_hidden_dim must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Encoder layer paired with decoder block `k`.
    pub fn paired_layer(&self, k: usize) -> usize {
        self.depth - self.decoder_depth + k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub weight: P,
    pub bias: P,
}

/// Pre-norm transformer block. `qkv` is `D × 3D`; cross-attention uses its
/// first `D` columns for queries and the rest for keys/values.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub norm1: Norm<P>,
    pub qkv: P,
    pub proj: Linear<P>,
    pub norm2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head<P> {
    Linear {
        norm: Norm<P>,
        out: Linear<P>,
    },
    Mlp {
        norm: Norm<P>,
        fc1: Linear<P>,
        fc2: Linear<P>,
    },
    Transformer {
        blocks: Vec<Block<P>>,
        norm: Norm<P>,
        out: Linear<P>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<P> {
    pub patch_embed: Linear<P>,
    pub encoder: Vec<Block<P>>,
    /// Empty when weights are shared with the encoder.
    pub decoder: Vec<Block<P>>,
    pub head: Head<P>,
}

type MapFn<'f, P, Q> = dyn FnMut(&str, &P) -> Q + 'f;
type VisitFn<'f, P> = dyn FnMut(&str, &mut P) + 'f;

impl<P> Linear<P> {
    fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Linear<Q> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitFn<'_, P>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> Norm<P> {
    fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Norm<Q> {
        Norm {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitFn<'_, P>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> Block<P> {
    fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Block<Q> {
        Block {
            norm1: self.norm1.map(&format!("{prefix}.norm1"), f),
            qkv: f(&format!("{prefix}.attn.qkv.weight"), &self.qkv),
            proj: self.proj.map(&format!("{prefix}.attn.proj"), f),
            norm2: self.norm2.map(&format!("{prefix}.norm2"), f),
            fc1: self.fc1.map(&format!("{prefix}.mlp.fc1"), f),
            fc2: self.fc2.map(&format!("{prefix}.mlp.fc2"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitFn<'_, P>) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        f(&format!("{prefix}.attn.qkv.weight"), &mut self.qkv);
        self.proj.visit_mut(&format!("{prefix}.attn.proj"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        self.fc1.visit_mut(&format!("{prefix}.mlp.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.mlp.fc2"), f);
    }
}

impl<P> Head<P> {
    fn map<Q>(&self, f: &mut MapFn<'_, P, Q>) -> Head<Q> {
        match self {
            Head::Linear { norm, out } => Head::Linear {
                norm: norm.map("head.norm", f),
                out: out.map("head.out", f),
            },
            Head::Mlp { norm, fc1, fc2 } => Head::Mlp {
                norm: norm.map("head.norm", f),
                fc1: fc1.map("head.fc1", f),
                fc2: fc2.map("head.fc2", f),
            },
            Head::Transformer { blocks, norm, out } => Head::Transformer {
                blocks: blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.map(&format!("head.blocks.{i}"), f))
                    .collect(),
                norm: norm.map("head.norm", f),
                out: out.map("head.out", f),
            },
        }
    }

    fn visit_mut(&mut self, f: &mut VisitFn<'_, P>) {
        match self {
            Head::Linear { norm, out } => {
                norm.visit_mut("head.norm", f);
                out.visit_mut("head.out", f);
            }
            Head::Mlp { norm, fc1, fc2 } => {
                norm.visit_mut("head.norm", f);
                fc1.visit_mut("head.fc1", f);
                fc2.visit_mut("head.fc2", f);
            }
            Head::Transformer { blocks, norm, out } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&format!("head.blocks.{i}"), f);
                }
                norm.visit_mut("head.norm", f);
                out.visit_mut("head.out", f);
            }
        }
    }
}

impl<P> Weights<P> {
    /// Rebuild with every leaf transformed, visiting in canonical order.
    pub fn map<Q>(&self, f: &mut MapFn<'_, P, Q>) -> Weights<Q> {
        Weights {
            patch_embed: self.patch_embed.map("patch_embed", f),
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("enc.{i}"), f))
                .collect(),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("dec.{i}"), f))
                .collect(),
            head: self.head.map(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut VisitFn<'_, P>) {
        self.patch_embed.visit_mut("patch_embed", f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&format!("enc.{i}"), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&format!("dec.{i}"), f);
        }
        self.head.visit_mut(f);
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<(String, &P)> {
        let mut names = Vec::new();
        self.map(&mut |name, _| names.push(name.to_string()));
        let mut refs: Vec<&P> = Vec::with_capacity(names.len());
        collect_refs(self, &mut refs);
        names.into_iter().zip(refs).collect()
    }

    /// Block used by decoder slot `k` (the paired encoder block when shared).
    pub fn decoder_block(&self, cfg: &ModelConfig, k: usize) -> &Block<P> {
        if cfg.share_weights {
            &self.encoder[cfg.paired_layer(k)]
        } else {
            &self.decoder[k]
        }
    }
}

fn collect_refs<'a, P>(w: &'a Weights<P>, out: &mut Vec<&'a P>) {
    fn lin<'a, P>(l: &'a Linear<P>, out: &mut Vec<&'a P>) {
        out.push(&l.weight);
        out.push(&l.bias);
    }
    fn norm<'a, P>(n: &'a Norm<P>, out: &mut Vec<&'a P>) {
        out.push(&n.weight);
        out.push(&n.bias);
    }
    fn block<'a, P>(b: &'a Block<P>, out: &mut Vec<&'a P>) {
        norm(&b.norm1, out);
        out.push(&b.qkv);
        lin(&b.proj, out);
        norm(&b.norm2, out);
        lin(&b.fc1, out);
        lin(&b.fc2, out);
    }
    lin(&w.patch_embed, out);
    w.encoder.iter().for_each(|b| block(b, out));
    w.decoder.iter().for_each(|b| block(b, out));
    match &w.head {
        Head::Linear { norm: n, out: o } => {
            norm(n, out);
            lin(o, out);
        }
        Head::Mlp { norm: n, fc1, fc2 } => {
            norm(n, out);
            lin(fc1, out);
            lin(fc2, out);
        }
        Head::Transformer {
            blocks,
            norm: n,
            out: o,
        } => {
            blocks.iter().for_each(|b| block(b, out));
            norm(n, out);
            lin(o, out);
        }
    }
}

/// Which part of the model a canonical tensor name belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Head,
    Fixed,
}

pub fn param_group(name: &str) -> Option<ParamGroup> {
    if name.starts_with("patch_embed.") || name.starts_with("enc.") {
        Some(ParamGroup::Encoder)
    } else if name.starts_with("dec.") {
        Some(ParamGroup::Decoder)
    } else if name.starts_with("head.") {
        Some(ParamGroup::Head)
    } else if name == POS_EMBED {
        Some(ParamGroup::Fixed)
    } else {
        None
    }
}

/// Canonical name of the fixed positional table.
pub const POS_EMBED: &str = "pos_embed";

/// Trainable weights plus the fixed positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub pos_embed: Tensor<T>,
    pub weights: Weights<Tensor<T>>,
}

/// Per-layer activations of both streams for one image.
#[derive(Clone, Debug)]
pub struct StreamState<T> {
    /// `h^(0) … h^(M)`.
    pub content: Vec<Tensor<T>>,
    /// `g^(0) … g^(K)` for `K` decoder blocks.
    pub query: Vec<Tensor<T>>,
}

fn trunc_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    Tensor::from_fn(shape, |_| loop {
        let v = normal.sample(rng);
        if v.abs() < 0.04 {
            break v;
        }
    })
}

/// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
fn xavier_uniform(rng: &mut impl Rng, i: usize, o: usize) -> Tensor<f32> {
    let b = (6.0 / (i + o) as f64).sqrt() as f32;
    Tensor::from_fn(&[i, o], |_| rng.random_range(-b..b))
}

fn init_linear(rng: &mut impl Rng, i: usize, o: usize) -> Linear<Tensor<f32>> {
    Linear {
        weight: trunc_normal(rng, &[i, o]),
        bias: Tensor::zeros(&[o]),
    }
}

fn init_norm(d: usize) -> Norm<Tensor<f32>> {
    Norm {
        weight: Tensor::full(&[d], 1.0),
        bias: Tensor::zeros(&[d]),
    }
}

fn init_block(rng: &mut impl Rng, cfg: &ModelConfig) -> Block<Tensor<f32>> {
    let d = cfg.embed_dim;
    Block {
        norm1: init_norm(d),
        qkv: trunc_normal(rng, &[d, 3 * d]),
        proj: init_linear(rng, d, d),
        norm2: init_norm(d),
        fc1: init_linear(rng, d, cfg.mlp_hidden()),
        fc2: init_linear(rng, cfg.mlp_hidden(), d),
    }
}

/// Fresh parameters: truncated-normal (std 0.02, cut at 2σ) linear weights,
/// zero biases, unit layer-norm gains. The patch projection is xavier-uniform
/// instead; at std 0.02 its output is swamped by the positional table after
/// the first layer norm and training stalls for many steps.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ModelParams<f32>, ModelError> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let patch_embed = Linear {
        weight: xavier_uniform(rng, cfg.patch_dim(), d),
        bias: Tensor::zeros(&[d]),
    };
    let encoder = (0..cfg.depth).map(|_| init_block(rng, cfg)).collect();
    let decoder = if cfg.share_weights {
        Vec::new()
    } else {
        (0..cfg.decoder_depth)
            .map(|_| init_block(rng, cfg))
            .collect()
    };
    let head = match cfg.head {
        HeadKind::Linear => Head::Linear {
            norm: init_norm(d),
            out: init_linear(rng, d, cfg.patch_dim()),
        },
        HeadKind::Mlp => Head::Mlp {
            norm: init_norm(d),
            fc1: init_linear(rng, d, cfg.head_hidden_dim),
            fc2: init_linear(rng, cfg.head_hidden_dim, cfg.patch_dim()),
        },
        HeadKind::Transformer => Head::Transformer {
            blocks: (0..2).map(|_| init_block(rng, cfg)).collect(),
            norm: init_norm(d),
            out: init_linear(rng, d, cfg.patch_dim()),
        },
    };
    let pos_embed = sincos_table(cfg.grid(), cfg.grid(), d)?.to_tensor();
    Ok(ModelParams {
        config: cfg.clone(),
        pos_embed,
        weights: Weights {
            patch_embed,
            encoder,
            decoder,
            head,
        },
    })
}

/// Builds the model graph on a tape.
struct Graph<'t, T: Scalar> {
    tape: &'t mut Tape<T>,
    cfg: &'t ModelConfig,
}

impl<T: Scalar> Graph<'_, T> {
    fn linear(&mut self, x: Var, l: &Linear<Var>) -> Result<Var, NumericsError> {
        let y = self.tape.matmul(x, l.weight)?;
        self.tape.add_row(y, l.bias)
    }

    fn norm(&mut self, x: Var, n: &Norm<Var>) -> Result<Var, NumericsError> {
        self.tape
            .layernorm(x, n.weight, n.bias, T::lit(LAYERNORM_EPS))
    }

    /// Multi-head attention of `q` over `k`/`v` (all `n × D`).
    fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Rc<Mask>,
        mut capture: Option<&mut Vec<Var>>,
    ) -> Result<Var, NumericsError> {
        let heads = self.cfg.n_heads;
        let dh = self.cfg.embed_dim / heads;
        let q = self.tape.scale(q, T::lit(1.0 / (dh as f64).sqrt()))?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let scores = self.tape.matmul_nt(qh, kh)?;
            let probs = self.tape.masked_softmax(scores, mask)?;
            if let Some(c) = capture.as_deref_mut() {
                c.push(probs);
            }
            outs.push(self.tape.matmul(probs, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            self.tape.concat_cols(&outs)
        }
    }

    fn mlp(&mut self, x: Var, b: &Block<Var>) -> Result<Var, NumericsError> {
        let m = self.norm(x, &b.norm2)?;
        let m = self.linear(m, &b.fc1)?;
        let m = self.tape.gelu(m)?;
        let m = self.linear(m, &b.fc2)?;
        self.tape.add(x, m)
    }

    fn self_block(
        &mut self,
        x: Var,
        mask: &Rc<Mask>,
        b: &Block<Var>,
        capture: Option<&mut Vec<Var>>,
    ) -> Result<Var, NumericsError> {
        let d = self.cfg.embed_dim;
        let a = self.norm(x, &b.norm1)?;
        let qkv = self.tape.matmul(a, b.qkv)?;
        let q = self.tape.slice_cols(qkv, 0, d)?;
        let k = self.tape.slice_cols(qkv, d, d)?;
        let v = self.tape.slice_cols(qkv, 2 * d, d)?;
        let o = self.attention(q, k, v, mask, capture)?;
        let o = self.linear(o, &b.proj)?;
        let x = self.tape.add(x, o)?;
        self.mlp(x, b)
    }

    fn cross_block(
        &mut self,
        g: Var,
        kv: Var,
        mask: &Rc<Mask>,
        b: &Block<Var>,
    ) -> Result<Var, NumericsError> {
        let d = self.cfg.embed_dim;
        let a = self.norm(g, &b.norm1)?;
        let c = self.norm(kv, &b.norm1)?;
        let wq = self.tape.slice_cols(b.qkv, 0, d)?;
        let wkv = self.tape.slice_cols(b.qkv, d, 2 * d)?;
        let q = self.tape.matmul(a, wq)?;
        let kvp = self.tape.matmul(c, wkv)?;
        let k = self.tape.slice_cols(kvp, 0, d)?;
        let v = self.tape.slice_cols(kvp, d, d)?;
        let o = self.attention(q, k, v, mask, None)?;
        let o = self.linear(o, &b.proj)?;
        let g = self.tape.add(g, o)?;
        self.mlp(g, b)
    }

    fn embed(&mut self, x: Var, pe: &Linear<Var>, pos: Var) -> Result<Var, NumericsError> {
        let e = self.linear(x, pe)?;
        self.tape.add(e, pos)
    }

    fn head(
        &mut self,
        g: Var,
        head: &Head<Var>,
        content_mask: &Rc<Mask>,
    ) -> Result<Var, NumericsError> {
        match head {
            Head::Linear { norm, out } => {
                let x = self.norm(g, norm)?;
                self.linear(x, out)
            }
            Head::Mlp { norm, fc1, fc2 } => {
                let x = self.norm(g, norm)?;
                let x = self.linear(x, fc1)?;
                let x = self.tape.gelu(x)?;
                self.linear(x, fc2)
            }
            Head::Transformer { blocks, norm, out } => {
                // a query row may read query rows at or before its own rank
                let mut x = g;
                for b in blocks {
                    x = self.self_block(x, content_mask, b, None)?;
                }
                let x = self.norm(x, norm)?;
                self.linear(x, out)
            }
        }
    }
}

/// Vars produced by [`forward_on_tape`].
pub struct ForwardVars {
    pub pred: Var,
    pub content: Vec<Var>,
    pub query: Vec<Var>,
}

pub(crate) fn plan_masks(cfg: &ModelConfig, plan: &PermutationPlan) -> (Rc<Mask>, Rc<Mask>) {
    let n = plan.n();
    match cfg.mask_corruption {
        MaskCorruption::None => (
            Rc::new(plan.content_mask.clone()),
            Rc::new(plan.query_mask.clone()),
        ),
        MaskCorruption::QueryDiagonal => {
            let mut q = plan.query_mask.clone();
            (0..n).for_each(|i| q.set(i, i, true));
            (Rc::new(plan.content_mask.clone()), Rc::new(q))
        }
        MaskCorruption::ContentFull => {
            (Rc::new(Mask::ones(n, n)), Rc::new(plan.query_mask.clone()))
        }
    }
}

/// Full two-stream forward for one image.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    pos: Var,
    patches: Var,
    plan: &PermutationPlan,
) -> Result<ForwardVars, ModelError> {
    let n = tape.value(patches).shape()[0];
    if plan.n() != n {
        return Err(ModelError::TokenCount {
            expected: n,
            got: plan.n(),
        });
    }
    let (content_mask, query_mask) = plan_masks(cfg, plan);
    let mut gr = Graph { tape, cfg };
    let mut h = gr.embed(patches, &w.patch_embed, pos)?;
    let mut g = pos;
    let mut content = vec![h];
    let mut query = vec![g];
    let first_paired = cfg.depth - cfg.decoder_depth;
    for (layer, block) in w.encoder.iter().enumerate() {
        let h_prev = h;
        h = gr.self_block(h, &content_mask, block, None)?;
        content.push(h);
        if layer >= first_paired {
            let k = layer - first_paired;
            let kv = if cfg.decoder_reads_previous_layer {
                h_prev
            } else {
                h
            };
            g = gr.cross_block(g, kv, &query_mask, w.decoder_block(cfg, k))?;
            query.push(g);
        }
    }
    let pred = gr.head(g, &w.head, &content_mask)?;
    Ok(ForwardVars {
        pred,
        content,
        query,
    })
}

/// Mask-free encoder forward; optionally captures per-head attention of the last layer.
fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    patch_embed: &Linear<Var>,
    blocks: &[Block<Var>],
    pos: Var,
    patches: Var,
    capture_last: Option<&mut Vec<Var>>,
) -> Result<Var, ModelError> {
    let n = tape.value(patches).shape()[0];
    let mask = Rc::new(Mask::ones(n, n));
    let mut gr = Graph { tape, cfg };
    let mut h = gr.embed(patches, patch_embed, pos)?;
    let last = blocks.len().saturating_sub(1);
    let mut capture_last = capture_last;
    for (i, b) in blocks.iter().enumerate() {
        let cap = if i == last {
            capture_last.as_deref_mut()
        } else {
            None
        };
        h = gr.self_block(h, &mask, b, cap)?;
    }
    Ok(h)
}

fn bind<T: Scalar>(tape: &mut Tape<T>, w: &Weights<Tensor<T>>, trainable: bool) -> Weights<Var> {
    w.map(&mut |_, t| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            pos_embed: self.pos_embed.cast(),
            weights: self.weights.map(&mut |_, t| t.cast()),
        }
    }

    /// Trainable tensors in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.weights.leaves()
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.weights.visit_mut(f);
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.named()
            .iter()
            .filter(|(n, _)| param_group(n) == Some(group))
            .map(|(_, t)| t.len())
            .sum()
    }

    fn input(&self, patches: &PatchSequence) -> Result<Tensor<T>, ModelError> {
        let cfg = &self.config;
        if patches.n_tokens() != cfg.n_tokens() {
            return Err(ModelError::TokenCount {
                expected: cfg.n_tokens(),
                got: patches.n_tokens(),
            });
        }
        if patches.patch_dim() != cfg.patch_dim() {
            return Err(ModelError::PatchDim {
                expected: cfg.patch_dim(),
                got: patches.patch_dim(),
            });
        }
        Ok(patches.to_tensor())
    }

    /// Predictions (`n_tokens × patch_dim`) and both streams' activations.
    pub fn forward_with_state(
        &self,
        patches: &PatchSequence,
        plan: &PermutationPlan,
    ) -> Result<(Tensor<T>, StreamState<T>), ModelError> {
        self.forward_tensor_with_state(&self.input(patches)?, plan)
    }

    pub fn forward(
        &self,
        patches: &PatchSequence,
        plan: &PermutationPlan,
    ) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward_with_state(patches, plan)?.0)
    }

    /// Forward over an already-built `n_tokens × patch_dim` input.
    pub fn forward_tensor_with_state(
        &self,
        x: &Tensor<T>,
        plan: &PermutationPlan,
    ) -> Result<(Tensor<T>, StreamState<T>), ModelError> {
        let mut tape = Tape::new();
        let w = bind(&mut tape, &self.weights, false);
        let pos = tape.constant(self.pos_embed.clone());
        let xv = tape.constant(x.clone());
        let out = forward_on_tape(&mut tape, &self.config, &w, pos, xv, plan)?;
        let state = StreamState {
            content: out.content.iter().map(|&v| tape.value(v).clone()).collect(),
            query: out.query.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        Ok((tape.value(out.pred).clone(), state))
    }

    /// Loss on one image and its gradient for every trainable tensor, in
    /// [`ModelParams::named`] order.
    pub fn loss_and_grads(
        &self,
        patches: &PatchSequence,
        plan: &PermutationPlan,
        target: &Tensor<T>,
        kind: LossKind,
    ) -> Result<(T, Vec<Tensor<T>>), ModelError> {
        let x = self.input(patches)?;
        let mut tape = Tape::new();
        let w = bind(&mut tape, &self.weights, true);
        let pos = tape.constant(self.pos_embed.clone());
        let xv = tape.constant(x);
        let out = forward_on_tape(&mut tape, &self.config, &w, pos, xv, plan)?;
        let loss = loss_on_tape(&mut tape, out.pred, target, kind)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let vars = w.leaves();
        let shapes = self.named();
        Ok((
            value,
            vars.iter()
                .zip(shapes)
                .map(|((_, &v), (_, t))| grads.take_or_zeros(v, t.shape()))
                .collect(),
        ))
    }

    /// Loss only (no gradient bookkeeping).
    pub fn loss(
        &self,
        patches: &PatchSequence,
        plan: &PermutationPlan,
        target: &Tensor<T>,
        kind: LossKind,
    ) -> Result<T, ModelError> {
        let pred = self.forward(patches, plan)?;
        let mut tape = Tape::new();
        let p = tape.constant(pred);
        let l = loss_on_tape(&mut tape, p, target, kind)?;
        Ok(tape.value(l).data()[0])
    }

    /// Single encoder layer `layer` applied to `h` under `mask`.
    pub fn encoder_layer(
        &self,
        layer: usize,
        h: &Tensor<T>,
        mask: &Mask,
    ) -> Result<Tensor<T>, ModelError> {
        let block = self.weights.encoder.get(layer).ok_or(ModelError::Layer {
            layer,
            len: self.config.depth,
        })?;
        let mut tape = Tape::new();
        let b = block.map("blk", &mut |_, t: &Tensor<T>| tape.constant(t.clone()));
        let x = tape.constant(h.clone());
        let mask = Rc::new(mask.clone());
        let mut gr = Graph {
            tape: &mut tape,
            cfg: &self.config,
        };
        let y = gr.self_block(x, &mask, &b, None)?;
        Ok(tape.value(y).clone())
    }

    /// Single decoder block `k`: queries from `g`, keys/values from `h_kv`.
    pub fn decoder_layer(
        &self,
        k: usize,
        g: &Tensor<T>,
        h_kv: &Tensor<T>,
        mask: &Mask,
    ) -> Result<Tensor<T>, ModelError> {
        if k >= self.config.decoder_depth {
            return Err(ModelError::Layer {
                layer: k,
                len: self.config.decoder_depth,
            });
        }
        if g.shape() != h_kv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "decoder_layer",
                left: g.shape().to_vec(),
                right: h_kv.shape().to_vec(),
            }
            .into());
        }
        let block = self.weights.decoder_block(&self.config, k);
        let mut tape = Tape::new();
        let b = block.map("blk", &mut |_, t: &Tensor<T>| tape.constant(t.clone()));
        let gv = tape.constant(g.clone());
        let hv = tape.constant(h_kv.clone());
        let mask = Rc::new(mask.clone());
        let mut gr = Graph {
            tape: &mut tape,
            cfg: &self.config,
        };
        let y = gr.cross_block(gv, hv, &mask, &b)?;
        Ok(tape.value(y).clone())
    }

    /// Mask-free encoder output `n_tokens × D` (last block).
    pub fn encoder_features(&self, patches: &PatchSequence) -> Result<Tensor<T>, ModelError> {
        self.export_encoder().features(patches)
    }

    /// Patch projection, positional table, and encoder blocks only.
    pub fn export_encoder(&self) -> ExportedEncoder<T> {
        ExportedEncoder {
            config: self.config.clone(),
            pos_embed: self.pos_embed.clone(),
            patch_embed: self.weights.patch_embed.clone(),
            blocks: self.weights.encoder.clone(),
        }
    }
}

/// Encoder weights for mask-free use (fine-tuning, probing).
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedEncoder<T = f32> {
    pub config: ModelConfig,
    pub pos_embed: Tensor<T>,
    pub patch_embed: Linear<Tensor<T>>,
    pub blocks: Vec<Block<Tensor<T>>>,
}

impl<T: Scalar> ExportedEncoder<T> {
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_embed.weight),
            ("patch_embed.bias".to_string(), &self.patch_embed.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut names = Vec::new();
            b.map(&format!("enc.{i}"), &mut |n, _| names.push(n.to_string()));
            let refs = [
                &b.norm1.weight,
                &b.norm1.bias,
                &b.qkv,
                &b.proj.weight,
                &b.proj.bias,
                &b.norm2.weight,
                &b.norm2.bias,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ];
            out.extend(names.into_iter().zip(refs));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn run(
        &self,
        patches: &PatchSequence,
        capture: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>, ModelError> {
        let cfg = &self.config;
        if patches.n_tokens() != cfg.n_tokens() {
            return Err(ModelError::TokenCount {
                expected: cfg.n_tokens(),
                got: patches.n_tokens(),
            });
        }
        if patches.patch_dim() != cfg.patch_dim() {
            return Err(ModelError::PatchDim {
                expected: cfg.patch_dim(),
                got: patches.patch_dim(),
            });
        }
        let mut tape = Tape::new();
        let pe = self
            .patch_embed
            .map("patch_embed", &mut |_, t: &Tensor<T>| {
                tape.constant(t.clone())
            });
        let blocks: Vec<Block<Var>> = self
            .blocks
            .iter()
            .map(|b| b.map("enc", &mut |_, t: &Tensor<T>| tape.constant(t.clone())))
            .collect();
        let pos = tape.constant(self.pos_embed.clone());
        let x = tape.constant(patches.to_tensor());
        let mut probs = Vec::new();
        let h = encode_on_tape(&mut tape, cfg, &pe, &blocks, pos, x, Some(&mut probs))?;
        if let Some(c) = capture {
            c.extend(probs.iter().map(|&p| tape.value(p).clone()));
        }
        Ok(tape.value(h).clone())
    }

    pub fn features(&self, patches: &PatchSequence) -> Result<Tensor<T>, ModelError> {
        self.run(patches, None)
    }

    /// Features plus the last layer's per-head attention probabilities.
    pub fn features_with_attention(
        &self,
        patches: &PatchSequence,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), ModelError> {
        let mut probs = Vec::new();
        let h = self.run(patches, Some(&mut probs))?;
        Ok((h, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permutation::{raster_plan, sample_plan};
    use crate::rng::seeded;

    fn random_patches(cfg: &ModelConfig, seed: u64) -> PatchSequence {
        let mut rng = seeded(seed);
        let g = cfg.grid();
        PatchSequence {
            grid_h: g,
            grid_w: g,
            patch_size: cfg.patch_size,
            channels: cfg.channels,
            values: (0..cfg.n_tokens() * cfg.patch_dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            embed_dim: 16,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = small();
        let a = init_params(&cfg, &mut seeded(3)).unwrap();
        let b = init_params(&cfg, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.named() {
            if name.contains("norm") && name.ends_with(".weight") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else if name == "patch_embed.weight" {
                let b = (6.0f32 / (cfg.patch_dim() + cfg.embed_dim) as f32).sqrt();
                assert!(t.data().iter().all(|&v| v.abs() < b), "{name}");
            } else {
                assert!(t.data().iter().all(|&v| v > -0.04 && v < 0.04), "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            n_heads: 3,
            ..small()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            decoder_depth: 3,
            ..small()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            depth: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn output_shape_for_all_heads() {
        for head in [HeadKind::Linear, HeadKind::Mlp, HeadKind::Transformer] {
            let cfg = ModelConfig { head, ..small() };
            let p = init_params(&cfg, &mut seeded(1)).unwrap();
            let x = random_patches(&cfg, 2);
            let plan = sample_plan(cfg.n_tokens(), &mut seeded(5)).unwrap();
            let y = p.forward(&x, &plan).unwrap();
            assert_eq!(y.shape(), &[cfg.n_tokens(), cfg.patch_dim()]);
        }
    }

    #[test]
    fn stream_initial_states() {
        let cfg = small();
        let p = init_params(&cfg, &mut seeded(1)).unwrap();
        let x = random_patches(&cfg, 2);
        let plan = sample_plan(cfg.n_tokens(), &mut seeded(5)).unwrap();
        let (_, state) = p.forward_with_state(&x, &plan).unwrap();
        assert_eq!(state.query[0], p.pos_embed);
        let mut s = crate::numerics::matmul(&x.to_tensor(), &p.weights.patch_embed.weight).unwrap();
        for (i, v) in s.data_mut().iter_mut().enumerate() {
            *v += p.weights.patch_embed.bias.data()[i % cfg.embed_dim] + p.pos_embed.data()[i];
        }
        assert!(state.content[0].max_abs_diff(&s) < 1e-6);
        assert_eq!(state.content.len(), cfg.depth + 1);
        assert_eq!(state.query.len(), cfg.decoder_depth + 1);
    }

    #[test]
    fn zeroed_output_projections_make_identity_layer() {
        let cfg = small();
        let mut p = init_params(&cfg, &mut seeded(1)).unwrap();
        for b in &mut p.weights.encoder {
            b.proj.weight = Tensor::zeros(b.proj.weight.shape());
            b.fc2.weight = Tensor::zeros(b.fc2.weight.shape());
        }
        let h = random_patches(&cfg, 7).to_tensor::<f32>();
        let h = Tensor::from_fn(&[cfg.n_tokens(), cfg.embed_dim], |i| h.data()[i % h.len()]);
        let mask = raster_plan(cfg.n_tokens()).unwrap().content_mask;
        assert_eq!(p.encoder_layer(0, &h, &mask).unwrap(), h);
    }

    #[test]
    fn share_weights_param_difference() {
        let cfg = small();
        let a = init_params(&cfg, &mut seeded(1)).unwrap();
        let b = init_params(
            &ModelConfig {
                share_weights: true,
                ..cfg.clone()
            },
            &mut seeded(1),
        )
        .unwrap();
        let per_block = {
            let mut n = 0;
            a.weights.encoder[0].map("b", &mut |_, t: &Tensor<f32>| n += t.len());
            n
        };
        assert_eq!(
            a.param_count() - b.param_count(),
            cfg.decoder_depth * per_block
        );
        assert_eq!(b.group_count(ParamGroup::Decoder), 0);
    }

    #[test]
    fn export_drops_decoder_and_head() {
        let cfg = small();
        let p = init_params(&cfg, &mut seeded(1)).unwrap();
        let e = p.export_encoder();
        assert_eq!(e.param_count(), p.group_count(ParamGroup::Encoder));
        let x = random_patches(&cfg, 9);
        assert_eq!(e.features(&x).unwrap(), p.encoder_features(&x).unwrap());
    }

    #[test]
    fn canonical_names_are_unique() {
        let cfg = ModelConfig {
            head: HeadKind::Transformer,
            ..small()
        };
        let p = init_params(&cfg, &mut seeded(1)).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.contains(&"enc.0.attn.qkv.weight".to_string()));
        assert!(names.iter().all(|n| param_group(n).is_some()));
    }
}
