//! Small ViT-style encoder with deep prompt insertion.
//!
//! Token layout in prompted mode is `[CLS, P_0 .. P_{K-1}, E_0 .. E_{m-1}]`.
//! After every encoder layer except the last, the `K` prompt-slot outputs
//! are dropped and the next layer's prompt is spliced in. Logits come from
//! the final-norm CLS row through a linear head.

mod checkpoint;
mod config;

pub use checkpoint::{BackboneCheckpoint, Provenance, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::BackboneConfig;

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::spiking::PromptStack;
use crate::tensor::{Tape, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-6;

/// Linear classification head `x W + b`, `W: [D, C]`, `b: [1, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn zeros(dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros(&[dim, classes])?,
            bias: Tensor::zeros(&[1, classes])?,
        })
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }
}

/// Per-layer token matrices and the resulting logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub per_layer: Vec<Tensor>,
    pub logits: Tensor,
}

impl Activations {
    pub fn predicted_class(&self) -> usize {
        argmax(self.logits.data())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub(crate) struct LayerVars {
    norm1_w: Var,
    norm1_b: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    norm2_w: Var,
    norm2_b: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
}

/// Checkpoint weights registered on a tape (borrowed, not copied).
pub struct BackboneVars {
    patch_w: Var,
    patch_b: Var,
    pos: Var,
    cls: Var,
    layers: Vec<LayerVars>,
    norm_w: Var,
    norm_b: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub(crate) ordered: Vec<Var>,
}

impl BackboneVars {
    /// Registers every checkpoint tensor; `ordered` follows checkpoint name order.
    pub fn register<'a>(tape: &mut Tape<'a>, ckpt: &'a BackboneCheckpoint) -> Self {
        let ids: BTreeMap<&str, Var> = ckpt.weights.iter().map(|(k, t)| (k.as_str(), tape.param(t))).collect();
        let w = |name: &str| *ids.get(name).unwrap_or_else(|| panic!("checkpoint has no tensor `{name}`"));
        let layers = (0..ckpt.config.layer_count)
            .map(|l| {
                let p = |s: &str| w(&format!("layers.{l}.{s}"));
                LayerVars {
                    norm1_w: p("norm1.weight"),
                    norm1_b: p("norm1.bias"),
                    qkv_w: p("attn.qkv.weight"),
                    qkv_b: p("attn.qkv.bias"),
                    proj_w: p("attn.proj.weight"),
                    proj_b: p("attn.proj.bias"),
                    norm2_w: p("norm2.weight"),
                    norm2_b: p("norm2.bias"),
                    fc1_w: p("mlp.fc1.weight"),
                    fc1_b: p("mlp.fc1.bias"),
                    fc2_w: p("mlp.fc2.weight"),
                    fc2_b: p("mlp.fc2.bias"),
                }
            })
            .collect();
        Self {
            patch_w: w("patch_embed.weight"),
            patch_b: w("patch_embed.bias"),
            pos: w("pos_embed"),
            cls: w("cls_token"),
            layers,
            norm_w: w("norm.weight"),
            norm_b: w("norm.bias"),
            head_w: w("head.weight"),
            head_b: w("head.bias"),
            ordered: ids.into_values().collect(),
        }
    }
}

/// Graph handles produced by a prompted forward.
pub struct ForwardVars {
    pub per_layer: Vec<Var>,
    pub cls: Var,
    pub logits: Var,
}

fn check_image(image: &Tensor, cfg: &BackboneConfig) -> Result<()> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != want {
        return Err(shape_err!("image shape {:?}, expected {want:?}", image.shape()));
    }
    Ok(())
}

/// Non-overlapping patches flattened as `(channel, dy, dx)`, one row per
/// patch in row-major patch order.
pub fn extract_patches(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    check_image(image, cfg)?;
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let per_side = s / p;
    let px = image.data();
    let mut out = Vec::with_capacity(cfg.patch_count() * cfg.patch_dim());
    for py in 0..per_side {
        for pxi in 0..per_side {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * s + py * p + dy) * s + pxi * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[cfg.patch_count(), cfg.patch_dim()], out)
}

pub(crate) fn patch_embed_tape<'a>(
    tape: &mut Tape<'a>,
    vars: &BackboneVars,
    image: &Tensor,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let patches = tape.constant(extract_patches(image, cfg)?);
    let proj = tape.matmul(patches, vars.patch_w)?;
    let biased = tape.add_row(proj, vars.patch_b)?;
    tape.add(biased, vars.pos)
}

fn affine_norm(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let n = tape.layernorm_rows(x, LAYERNORM_EPS)?;
    let scaled = tape.mul_row(n, w)?;
    tape.add_row(scaled, b)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub(crate) fn encoder_layer_tape(
    tape: &mut Tape<'_>,
    x: Var,
    lv: &LayerVars,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let h = affine_norm(tape, x, lv.norm1_w, lv.norm1_b)?;
    let qkv = linear(tape, h, lv.qkv_w, lv.qkv_b)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.head_count);
    for head in 0..cfg.head_count {
        let q = tape.slice_cols(qkv, head * dh, dh)?;
        let k = tape.slice_cols(qkv, d + head * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + head * dh, dh)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let att = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(att, v)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let attn_out = linear(tape, merged, lv.proj_w, lv.proj_b)?;
    let x = tape.add(x, attn_out)?;

    let h2 = affine_norm(tape, x, lv.norm2_w, lv.norm2_b)?;
    let hidden = linear(tape, h2, lv.fc1_w, lv.fc1_b)?;
    let hidden = tape.gelu(hidden)?;
    let mlp_out = linear(tape, hidden, lv.fc2_w, lv.fc2_b)?;
    tape.add(x, mlp_out)
}

fn check_prompts(tape: &Tape<'_>, prompts: &[Var], cfg: &BackboneConfig) -> Result<usize> {
    if prompts.is_empty() {
        return Ok(0);
    }
    let n = cfg.layer_count;
    if prompts.len() != n && prompts.len() != n + 1 {
        return Err(Error::Contract(format!(
            "{} prompts supplied for {n} layers (expected {n} or {})",
            prompts.len(),
            n + 1
        )));
    }
    let shape = tape.shape(prompts[0]).to_vec();
    if shape.len() != 2 || shape[1] != cfg.embed_dim {
        return Err(Error::Contract(format!(
            "prompt shape {shape:?} does not match embed_dim {}",
            cfg.embed_dim
        )));
    }
    if prompts.iter().any(|&p| tape.shape(p) != shape.as_slice()) {
        return Err(Error::Contract("prompts differ in shape".into()));
    }
    Ok(shape[0])
}

/// Full prompted forward on a tape from precomputed patch embeddings.
///
/// `prompts` is empty (unprompted), or holds one `[K, D]` prompt per layer,
/// optionally followed by one reserved prompt that is never injected.
pub fn forward_tape(
    tape: &mut Tape<'_>,
    vars: &BackboneVars,
    head: (Var, Var),
    embedded: Var,
    prompts: &[Var],
    cfg: &BackboneConfig,
) -> Result<ForwardVars> {
    let k = check_prompts(tape, prompts, cfg)?;
    let m = cfg.patch_count();
    let mut x = if k == 0 {
        tape.concat_rows(&[vars.cls, embedded])?
    } else {
        tape.concat_rows(&[vars.cls, prompts[0], embedded])?
    };
    let mut per_layer = Vec::with_capacity(cfg.layer_count);
    for (l, lv) in vars.layers.iter().enumerate() {
        x = encoder_layer_tape(tape, x, lv, cfg)?;
        per_layer.push(x);
        if k > 0 && l + 1 < cfg.layer_count {
            let cls = tape.slice_rows(x, 0, 1)?;
            let patches = tape.slice_rows(x, 1 + k, m)?;
            x = tape.concat_rows(&[cls, prompts[l + 1], patches])?;
        }
    }
    let cls_row = tape.slice_rows(x, 0, 1)?;
    let cls = affine_norm(tape, cls_row, vars.norm_w, vars.norm_b)?;
    let logits = linear(tape, cls, head.0, head.1)?;
    Ok(ForwardVars {
        per_layer,
        cls,
        logits,
    })
}

fn collect(tape: &Tape<'_>, fv: &ForwardVars) -> Result<Activations> {
    let logits = tape.value(fv.logits).clone();
    let c = logits.len();
    Ok(Activations {
        per_layer: fv.per_layer.iter().map(|&v| tape.value(v).clone()).collect(),
        logits: logits.reshape(&[c])?,
    })
}

/// Patch embeddings with positional embeddings added, `[m, D]`.
pub fn patch_embed(image: &Tensor, ckpt: &BackboneCheckpoint) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, ckpt);
    let e = patch_embed_tape(&mut tape, &vars, image, &ckpt.config)?;
    Ok(tape.value(e).clone())
}

/// One encoder layer applied to a token matrix.
pub fn encoder_layer(tokens: &Tensor, ckpt: &BackboneCheckpoint, layer: usize) -> Result<Tensor> {
    if layer >= ckpt.config.layer_count {
        return Err(Error::Index(format!("layer {layer} of {}", ckpt.config.layer_count)));
    }
    let (_, d) = tokens.dims2()?;
    if d != ckpt.config.embed_dim {
        return Err(shape_err!("tokens have width {d}, backbone {}", ckpt.config.embed_dim));
    }
    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, ckpt);
    let x = tape.constant(tokens.detached());
    let y = encoder_layer_tape(&mut tape, x, &vars.layers[layer], &ckpt.config)?;
    Ok(tape.value(y).clone())
}

/// Final norm of a `[1, D]` CLS row followed by the head.
pub fn final_norm(x_cls: &Tensor, ckpt: &BackboneCheckpoint) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, ckpt);
    let x = tape.constant(x_cls.detached().reshape(&[1, ckpt.config.embed_dim])?);
    let y = affine_norm(&mut tape, x, vars.norm_w, vars.norm_b)?;
    Ok(tape.value(y).clone())
}

/// `y = x_cls W + b` for a `[D]` or `[1, D]` input; returns `[C]`.
pub fn cls_head(x_cls: &Tensor, head: &Head) -> Result<Tensor> {
    let (d, c) = head.weight.dims2()?;
    let mut tape = Tape::new();
    let x = tape.constant(x_cls.detached().reshape(&[1, d])?);
    let w = tape.param(&head.weight);
    let b = tape.param(&head.bias);
    let y = linear(&mut tape, x, w, b)?;
    tape.value(y).clone().reshape(&[c])
}

/// Forward with arbitrary injected prompts and an explicit head.
pub fn forward_with_head(
    image: &Tensor,
    ckpt: &BackboneCheckpoint,
    prompts: &[Tensor],
    head: &Head,
) -> Result<Activations> {
    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, ckpt);
    let hw = tape.param(&head.weight);
    let hb = tape.param(&head.bias);
    let e = patch_embed_tape(&mut tape, &vars, image, &ckpt.config)?;
    let pv: Vec<Var> = prompts.iter().map(|p| tape.param(p)).collect();
    let fv = forward_tape(&mut tape, &vars, (hw, hb), e, &pv, &ckpt.config)?;
    collect(&tape, &fv)
}

/// Forward through the checkpoint's own head with the given injected prompts.
pub fn forward_prompted(image: &Tensor, ckpt: &BackboneCheckpoint, prompts: &[Tensor]) -> Result<Activations> {
    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, ckpt);
    let e = patch_embed_tape(&mut tape, &vars, image, &ckpt.config)?;
    let pv: Vec<Var> = prompts.iter().map(|p| tape.param(p)).collect();
    let fv = forward_tape(&mut tape, &vars, (vars.head_w, vars.head_b), e, &pv, &ckpt.config)?;
    collect(&tape, &fv)
}

/// Continuous-prompt (VPT) forward: raw prompts, no filtering or spiking.
pub fn forward_vpt_continuous(image: &Tensor, ckpt: &BackboneCheckpoint, stack: &PromptStack) -> Result<Activations> {
    forward_prompted(image, ckpt, &stack.prompts)
}

/// Plain backbone forward without prompts.
pub fn forward_unprompted(image: &Tensor, ckpt: &BackboneCheckpoint) -> Result<Activations> {
    forward_prompted(image, ckpt, &[])
}
