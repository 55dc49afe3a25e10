//! Language-guided detection: script embedding, single-head cross-attention
//! of visual queries over word keys/values, and candidate rescoring.

use std::sync::Arc;

use rand::Rng;

use crate::detector::{score_candidates, CandidateSet, DetectionHeadIds};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape};

/// Token embedding table shared with the frozen decoder, plus special ids.
#[derive(Clone, Copy, Debug)]
pub struct WordTable {
    pub param: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
    pub full_stop: usize,
    pub pad: usize,
}

/// Single-head cross-attention projections (all D×D).
#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

pub fn init_cross_attention(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    rng: &mut impl Rng,
) -> CrossAttentionIds {
    let s = 1.0 / (d as f64).sqrt();
    let mut u = || Mat::from_fn(d, d, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * s);
    let (wq, wk, wv, wo) = (u(), u(), u(), u());
    CrossAttentionIds {
        wq: store.add(format!("{name}.wq"), wq, true),
        wk: store.add(format!("{name}.wk"), wk, true),
        wv: store.add(format!("{name}.wv"), wv, true),
        wo: store.add(format!("{name}.wo"), wo, true),
    }
}

/// Embeds a token-id script as a K×D feature matrix.
pub fn embed_script(tape: &mut Tape, table: &WordTable, tokens: &[usize]) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::InvalidData("cannot embed an empty script".into()));
    }
    for &t in tokens {
        if t >= table.vocab_size {
            return Err(Error::UnknownToken(format!("token id {t}")));
        }
    }
    Ok(tape.embed(table.param, tokens))
}

/// X_ca = softmax((XQ)(XwK)^T / sqrt(D)) (XwV) O, single head.
///
/// `key_valid`, when given, marks which word positions participate; masked
/// (PAD) keys receive -inf logits and therefore zero attention.
pub fn cross_attend(
    tape: &mut Tape,
    params: &CrossAttentionIds,
    x: NodeId,
    xw: NodeId,
    key_valid: Option<&[bool]>,
) -> Result<NodeId> {
    let (n, d) = tape.value(x).shape();
    let (k, dw) = tape.value(xw).shape();
    if d != dw {
        return Err(Error::ShapeMismatch(format!(
            "cross_attend: query width {d} != key width {dw}"
        )));
    }
    let wq = tape.param(params.wq);
    let wk = tape.param(params.wk);
    let wv = tape.param(params.wv);
    let q = tape.matmul(x, wq);
    let keys = tape.matmul(xw, wk);
    let values = tape.matmul(xw, wv);
    let logits = tape.matmul_tb(q, keys);
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let valid = key_valid.map(|kv| {
        assert_eq!(kv.len(), k, "key mask length mismatch");
        let mut mask = Vec::with_capacity(n * k);
        for _ in 0..n {
            mask.extend_from_slice(kv);
        }
        Arc::new(mask)
    });
    let attn = tape.softmax_rows(scaled, valid);
    let mixed = tape.matmul(attn, values);
    let wo = tape.param(params.wo);
    Ok(tape.matmul(mixed, wo))
}

/// Language-guided candidate scores: cross-attend visual features over
/// already-encoded word features, pool, and score with the shared head.
pub fn lgd_score(
    tape: &mut Tape,
    params: &CrossAttentionIds,
    x: NodeId,
    xw: NodeId,
    key_valid: Option<&[bool]>,
    cs: Arc<CandidateSet>,
    head: &DetectionHeadIds,
) -> Result<NodeId> {
    let x_ca = cross_attend(tape, params, x, xw, key_valid)?;
    let pooled = tape.candidate_pool(x_ca, cs);
    Ok(score_candidates(tape, head, pooled))
}
