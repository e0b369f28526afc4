//! Multi-head dot-product attention shared by the encoder and decoder.

use crate::error::Result;
use crate::tensor::{init_linear, ParamId, ParamStore, Tape, TensorId};
use rand_chacha::ChaCha8Rng;

pub(crate) const ROPE_BASE: f64 = 10000.0;

/// Projection parameters of one attention layer.
#[derive(Debug, Clone)]
pub(crate) struct MhaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl MhaParams {
    pub fn build(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |name: &str| {
            let w = store.add(
                &format!("{prefix}.{name}.w"),
                (d, d),
                init_linear(rng, d, d * d),
            );
            let b = store.add(&format!("{prefix}.{name}.b"), (1, d), vec![0.0; d]);
            (w, b)
        };
        let (wq, bq) = mat("q");
        let (wk, bk) = mat("k");
        let (wv, bv) = mat("v");
        let (wo, bo) = mat("o");
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }
}

/// Apply rotary positions to each head's column block of `x`.
pub(crate) fn rotate_heads(
    tape: &mut Tape,
    x: TensorId,
    heads: usize,
    positions: &[usize],
) -> Result<TensorId> {
    let (_, d) = tape.shape(x);
    let dk = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let xh = tape.slice_cols(x, h * dk, dk)?;
        parts.push(tape.rotary(xh, positions, ROPE_BASE)?);
    }
    tape.concat_cols(&parts)
}

/// Full attention: project, optionally rotate, score, mix values, project out.
/// `mask_bias` (q_rows, k_rows) is added to the logits of every head.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MhaParams,
    q_in: TensorId,
    kv_in: TensorId,
    heads: usize,
    q_pos: Option<&[usize]>,
    k_pos: Option<&[usize]>,
    mask_bias: Option<TensorId>,
) -> Result<TensorId> {
    let wq = tape.param(store, p.wq);
    let bq = tape.param(store, p.bq);
    let wk = tape.param(store, p.wk);
    let bk = tape.param(store, p.bk);
    let wv = tape.param(store, p.wv);
    let bv = tape.param(store, p.bv);

    let q = tape.matmul(q_in, wq)?;
    let q = tape.add_row(q, bq)?;
    let k = tape.matmul(kv_in, wk)?;
    let k = tape.add_row(k, bk)?;
    let v = tape.matmul(kv_in, wv)?;
    let v = tape.add_row(v, bv)?;

    attend(tape, store, p, q, k, v, heads, q_pos, k_pos, mask_bias)
}

/// Attention over already-projected q/k/v; used both by `multi_head` and by
/// the incremental decoder which caches projected keys and values.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MhaParams,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
    q_pos: Option<&[usize]>,
    k_pos: Option<&[usize]>,
    mask_bias: Option<TensorId>,
) -> Result<TensorId> {
    let (_, d) = tape.shape(q);
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut qh = tape.slice_cols(q, h * dk, dk)?;
        let mut kh = tape.slice_cols(k, h * dk, dk)?;
        if let Some(pos) = q_pos {
            qh = tape.rotary(qh, pos, ROPE_BASE)?;
        }
        if let Some(pos) = k_pos {
            kh = tape.rotary(kh, pos, ROPE_BASE)?;
        }
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let mut logits = tape.scale(logits, scale);
        if let Some(bias) = mask_bias {
            logits = tape.add(logits, bias)?;
        }
        let att = tape.softmax(logits, 1)?;
        parts.push(tape.matmul(att, vh)?);
    }
    let ctx = tape.concat_cols(&parts)?;
    let wo = tape.param(store, p.wo);
    let bo = tape.param(store, p.bo);
    let out = tape.matmul(ctx, wo)?;
    tape.add_row(out, bo)
}
