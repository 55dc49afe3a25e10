//! Stacks of S4 layers. One stack instance per role (feature enhancement,
//! detection-specific visual/word encoders, generation-specific encoders),
//! each with independent parameters.
//!
//! Layer structure: per-position normalization → per-channel state-space
//! causal convolution → gated activation → channel mix → residual add.
//! With a zero mix the layer is exactly the identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, SsmBankIds, Tape};

#[derive(Clone, Copy, Debug)]
pub struct S4LayerIds {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub bank: SsmBankIds,
    pub mix_w: ParamId,
    pub mix_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct StackIds {
    pub name: String,
    pub layers: Vec<S4LayerIds>,
}

/// Uniform init in [-1/sqrt(d), 1/sqrt(d)].
fn linear_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let s = 1.0 / (fan_in as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * s)
}

/// Registers one bank of D per-channel state-space systems under `prefix`.
pub fn init_ssm_bank(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    r: usize,
    trainable: bool,
    rng: &mut impl Rng,
) -> SsmBankIds {
    let scale = 1.0 / (r as f64).sqrt();
    let a_re = Mat::from_fn(d, r, |_, _| -0.5);
    let a_im = Mat::from_fn(d, r, |_, rr| std::f64::consts::PI * rr as f64);
    let b_re = Mat::from_fn(d, r, |_, _| scale);
    let b_im = Mat::zeros(d, r);
    let d_re = Mat::from_fn(d, r, |_, _| scale);
    let d_im = Mat::zeros(d, r);
    let lo = 0.001f64.ln();
    let hi = 0.1f64.ln();
    let log_step = Mat::from_fn(d, 1, |_, _| lo + (hi - lo) * rng.gen::<f64>());
    SsmBankIds {
        a_re: store.add(format!("{prefix}.a_re"), a_re, trainable),
        a_im: store.add(format!("{prefix}.a_im"), a_im, trainable),
        b_re: store.add(format!("{prefix}.b_re"), b_re, trainable),
        b_im: store.add(format!("{prefix}.b_im"), b_im, trainable),
        d_re: store.add(format!("{prefix}.d_re"), d_re, trainable),
        d_im: store.add(format!("{prefix}.d_im"), d_im, trainable),
        log_step: store.add(format!("{prefix}.log_step"), log_step, trainable),
    }
}

pub fn init_stack(
    store: &mut ParamStore,
    name: &str,
    layers: usize,
    d: usize,
    r: usize,
    rng: &mut impl Rng,
) -> StackIds {
    let mut out = Vec::with_capacity(layers);
    for li in 0..layers {
        let prefix = format!("{name}.l{li}");
        let bank = init_ssm_bank(store, &format!("{prefix}.ssm"), d, r, true, rng);
        out.push(S4LayerIds {
            norm_gamma: store.add(format!("{prefix}.norm_gamma"), Mat::from_fn(1, d, |_, _| 1.0), true),
            norm_beta: store.add(format!("{prefix}.norm_beta"), Mat::zeros(1, d), true),
            bank,
            mix_w: store.add(format!("{prefix}.mix_w"), linear_init(rng, d, d, d), true),
            mix_b: store.add(format!("{prefix}.mix_b"), Mat::zeros(1, d), true),
        });
    }
    StackIds { name: name.to_string(), layers: out }
}

/// Channel width of a stack (from its first layer's mix matrix).
pub fn stack_width(store: &ParamStore, stack: &StackIds) -> usize {
    store.get(stack.layers[0].mix_w).rows()
}

/// Applies the stack to an L×D sequence node, layer by layer.
pub fn apply_stack(tape: &mut Tape, stack: &StackIds, seq: NodeId) -> NodeId {
    let mut cur = seq;
    for layer in &stack.layers {
        let gamma = tape.param(layer.norm_gamma);
        let beta = tape.param(layer.norm_beta);
        let normed = tape.layer_norm(cur, gamma, beta);
        let conv = tape.s4_conv(normed, &layer.bank);
        let gated = tape.silu(conv);
        let w = tape.param(layer.mix_w);
        let mixed = tape.matmul(gated, w);
        let b = tape.param(layer.mix_b);
        let mixed = tape.add_row(mixed, b);
        cur = tape.add(cur, mixed);
    }
    cur
}

/// Checked variant for external sequence inputs.
pub fn apply_stack_checked(
    tape: &mut Tape,
    store: &ParamStore,
    stack: &StackIds,
    seq: NodeId,
) -> Result<NodeId> {
    let d = stack_width(store, stack);
    if tape.value(seq).cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "stack {} expects width {d}, got {}",
            stack.name,
            tape.value(seq).cols()
        )));
    }
    Ok(apply_stack(tape, stack, seq))
}

/// Context-aware feature enhancement: concatenate context and clip along
/// time, run the enhancement stack once, split back. Each clip row then
/// aggregates history from up to N'+N frames.
pub fn enhance(
    tape: &mut Tape,
    store: &ParamStore,
    stack: &StackIds,
    context: NodeId,
    clip: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (ctx_rows, ctx_cols) = tape.value(context).shape();
    let (clip_rows, clip_cols) = tape.value(clip).shape();
    if ctx_cols != clip_cols {
        return Err(Error::ShapeMismatch(format!(
            "enhance: context width {ctx_cols} != clip width {clip_cols}"
        )));
    }
    let d = stack_width(store, stack);
    if ctx_cols != d {
        return Err(Error::ShapeMismatch(format!(
            "enhance: input width {ctx_cols} != stack width {d}"
        )));
    }
    let joined = tape.concat_rows(context, clip);
    let out = apply_stack(tape, stack, joined);
    let v_ctx = tape.slice_rows(out, 0, ctx_rows);
    let v_clip = tape.slice_rows(out, ctx_rows, clip_rows);
    Ok((v_ctx, v_clip))
}
