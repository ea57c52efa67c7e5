//! Attentional GRU decoder over a document memory. The recurrent update
//! reads the previous token's embedding, attends over memory rows with
//! unscaled dot products, and fuses the GRU output with the attention
//! summary through a single linear map; that fused vector is both the
//! step's feature for the vocabulary projection and the next recurrent
//! state.

use crate::data::PaddedSeqs;
use crate::encoders::EncodedSeq;
use crate::tensor::{gru_step, GruParams, Result as TRes, Tape, TensorError, TensorId};
use crate::{BOS, EOS, PAD};

/// Tape bindings for the decoder parameters. `w1` fuses [z; c] with no
/// bias; the vocabulary projection carries one.
#[derive(Debug, Clone, Copy)]
pub struct DecoderWeights {
    pub init_w: TensorId,
    pub init_b: TensorId,
    pub gru: GruParams,
    pub w1: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

/// One decode step's outputs: next-token scores, the fused state that feeds
/// the next step, and the attention row over memory (kept for analysis).
#[derive(Debug, Clone, Copy)]
pub struct StepOut {
    pub logits: TensorId,
    pub state: TensorId,
    pub attention: TensorId,
}

/// h_0 = linear(sum of valid context rows). Permutation-invariant in the
/// context by construction; all-PAD context degenerates to the bias.
pub fn init_state(tape: &mut Tape, ctx: &EncodedSeq, w: &DecoderWeights) -> TRes<TensorId> {
    let len = ctx.mask.len();
    let sel: Vec<f64> = ctx.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let sel = tape.constant([1, len], sel);
    let summed = tape.matmul(sel, ctx.reps)?;
    let proj = tape.matmul(summed, w.init_w)?;
    tape.add(proj, w.init_b)
}

/// One teacher-forced or generation step from `prev_id`.
pub fn decode_step(
    tape: &mut Tape,
    table: TensorId,
    state: TensorId,
    prev_id: u32,
    memory: TensorId,
    mem_mask: &[bool],
    w: &DecoderWeights,
) -> TRes<StepOut> {
    let emb = tape.embed(table, &[prev_id], PAD)?;
    let z = gru_step(tape, &w.gru, emb, state)?;
    let mt = tape.transpose(memory);
    let scores = tape.matmul(z, mt)?;
    let attention = tape.row_softmax_masked(scores, None, Some(mem_mask))?;
    let c = tape.matmul(attention, memory)?;
    let zc = tape.concat_cols(z, c)?;
    let fused = tape.matmul(zc, w.w1)?;
    let proj = tape.matmul(fused, w.out_w)?;
    let logits = tape.add(proj, w.out_b)?;
    Ok(StepOut { logits, state: fused, attention })
}

/// Summed negative log-likelihood of a response under teacher forcing,
/// together with the number of scored steps and the per-step attention rows.
pub struct ForcedDecode {
    pub nll: TensorId,
    pub steps: usize,
    pub attentions: Vec<TensorId>,
}

/// Teacher-forced pass over one response. Inputs are the response shifted
/// right behind a start token; every valid position is scored, including the
/// terminal EOS.
pub fn forced_nll(
    tape: &mut Tape,
    table: TensorId,
    ctx: &EncodedSeq,
    memory: TensorId,
    mem_mask: &[bool],
    resp: &PaddedSeqs,
    sample_index: usize,
    w: &DecoderWeights,
) -> TRes<ForcedDecode> {
    let row = &resp.ids[sample_index];
    let mask = &resp.mask[sample_index];
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(TensorError::BadShape {
            op: "forced_nll",
            expected: "at least one valid response token",
            got: [0, row.len()],
        });
    }
    let mut state = init_state(tape, ctx, w)?;
    let mut prev = BOS;
    let mut logit_rows = Vec::with_capacity(valid);
    let mut attentions = Vec::with_capacity(valid);
    for t in 0..valid {
        let step = decode_step(tape, table, state, prev, memory, mem_mask, w)?;
        logit_rows.push(step.logits);
        attentions.push(step.attention);
        state = step.state;
        prev = row[t];
    }
    let stacked = tape.concat_rows(&logit_rows)?;
    let nll = tape.nll_softmax(stacked, &row[..valid])?;
    Ok(ForcedDecode { nll, steps: valid, attentions })
}

/// Indices of the `k` largest logits, ties broken toward lower indices.
fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Sample the next token from the renormalized top-k slice of the logits.
pub fn sample_top_k(logits: &[f64], k_top: usize, rng: &mut crate::rng::RunRng) -> u32 {
    assert!(k_top >= 1, "top-k needs k >= 1");
    let k = k_top.min(logits.len());
    let idx = top_k_indices(logits, k);
    if k == 1 {
        return idx[0] as u32;
    }
    let max = logits[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| (logits[i] - max).exp()).collect();
    idx[rng.sample_weighted(&weights)] as u32
}

/// Autoregressive generation: start from the context summary, sample from
/// the top-k renormalized distribution each step, stop on the end token or
/// after `max_len` emissions. The end token itself is not emitted.
pub fn generate(
    tape: &mut Tape,
    table: TensorId,
    ctx: &EncodedSeq,
    memory: TensorId,
    mem_mask: &[bool],
    w: &DecoderWeights,
    k_top: usize,
    max_len: usize,
    rng: &mut crate::rng::RunRng,
) -> TRes<Vec<u32>> {
    let mut state = init_state(tape, ctx, w)?;
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let step = decode_step(tape, table, state, prev, memory, mem_mask, w)?;
        let id = sample_top_k(tape.values(step.logits), k_top, rng);
        if id == EOS {
            break;
        }
        out.push(id);
        state = step.state;
        prev = id;
    }
    Ok(out)
}
