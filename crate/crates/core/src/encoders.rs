//! Sequence encoders: embedding lookup, one bi-directional LSTM layer with a
//! linear projection to the shared width k, and the context→document
//! cross-attention that produces the context-aware document representation.
//!
//! All three encoded streams (document, context, response) share the width k
//! so every downstream inner product is well-typed.

use crate::tensor::{lstm_step, LstmParams, LstmState, Tape, TensorId};
use crate::PAD;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot encode an empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// One direction is an `LstmParams`; `proj` maps the concatenated `[1,2h]`
/// per-token states to width k.
#[derive(Debug, Clone, Copy)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub proj_w: TensorId,
    pub proj_b: TensorId,
}

/// Per-token representations (`[len,k]`, PAD rows exactly zero), a pooled
/// final state (`[1,k]`), and the validity mask.
#[derive(Debug, Clone)]
pub struct EncodedSeq {
    pub reps: TensorId,
    pub final_state: TensorId,
    pub mask: Vec<bool>,
}

impl EncodedSeq {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn assert_prefix_mask(mask: &[bool]) {
    debug_assert!(
        mask.windows(2).all(|w| w[0] || !w[1]),
        "sequence masks are valid-prefix by construction"
    );
}

/// Zero/one row selector `[len,width]` that zeroes masked rows when
/// multiplied in.
fn row_mask_matrix(tape: &mut Tape, mask: &[bool], width: usize) -> TensorId {
    let mut vals = vec![0.0; mask.len() * width];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            vals[i * width..(i + 1) * width].fill(1.0);
        }
    }
    tape.constant([mask.len(), width], vals)
}

/// Embed ids, apply an optional inverted-dropout mask, run both LSTM
/// directions over the valid prefix, concatenate, project to k, and zero the
/// PAD rows.
pub fn encode(
    tape: &mut Tape,
    embed_table: TensorId,
    ids: &[u32],
    mask: &[bool],
    p: &BiLstmParams,
    dropout: Option<&[f64]>,
) -> Result<EncodedSeq, EncodeError> {
    assert_eq!(ids.len(), mask.len());
    assert_prefix_mask(mask);
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(EncodeError::EmptySequence);
    }
    let len = ids.len();
    let e_dim = tape.shape(embed_table)[1];
    let h_dim = tape.shape(p.fwd.w_hh)[0];
    let k_dim = tape.shape(p.proj_w)[1];

    let mut emb = tape.embed(embed_table, ids, PAD)?;
    if let Some(dm) = dropout {
        assert_eq!(dm.len(), len * e_dim, "dropout mask covers the embedding");
        let m = tape.constant([len, e_dim], dm.to_vec());
        emb = tape.mul(emb, m)?;
    }

    let zero_h = tape.constant([1, h_dim], vec![0.0; h_dim]);
    let mut fwd_states: Vec<TensorId> = Vec::with_capacity(valid);
    let mut st = LstmState { h: zero_h, c: zero_h };
    for t in 0..valid {
        let x = tape.row(emb, t)?;
        st = lstm_step(tape, &p.fwd, x, &st)?;
        fwd_states.push(st.h);
    }
    let fwd_last = st.h;

    let mut bwd_states: Vec<TensorId> = vec![zero_h; valid];
    let mut st = LstmState { h: zero_h, c: zero_h };
    for t in (0..valid).rev() {
        let x = tape.row(emb, t)?;
        st = lstm_step(tape, &p.bwd, x, &st)?;
        bwd_states[t] = st.h;
    }
    let bwd_first = st.h;

    let zero_pair = tape.constant([1, 2 * h_dim], vec![0.0; 2 * h_dim]);
    let mut rows: Vec<TensorId> = Vec::with_capacity(len);
    for t in 0..len {
        if t < valid {
            rows.push(tape.concat_cols(fwd_states[t], bwd_states[t])?);
        } else {
            rows.push(zero_pair);
        }
    }
    let stacked = tape.concat_rows(&rows)?;
    let projected = tape.matmul(stacked, p.proj_w)?;
    let biased = tape.add_row(projected, p.proj_b)?;
    // the projection bias would otherwise leak into PAD rows
    let keep = row_mask_matrix(tape, mask, k_dim);
    let reps = tape.mul(biased, keep)?;

    let pooled_pair = tape.concat_cols(fwd_last, bwd_first)?;
    let pooled = tape.matmul(pooled_pair, p.proj_w)?;
    let final_state = tape.add(pooled, p.proj_b)?;

    Ok(EncodedSeq {
        reps,
        final_state,
        mask: mask.to_vec(),
    })
}

/// Cross-attention fusing context into each document row:
/// softmax(D·X^T/√k)·X concatenated with D, then projected back to k.
pub fn context_cross_attention(
    tape: &mut Tape,
    doc: &EncodedSeq,
    ctx: &EncodedSeq,
    w: TensorId,
    b: TensorId,
) -> Result<EncodedSeq, EncodeError> {
    let k = tape.shape(doc.reps)[1];
    if tape.shape(ctx.reps)[1] != k {
        return Err(EncodeError::Tensor(
            crate::tensor::TensorError::ShapeMismatch {
                op: "context_cross_attention",
                left: tape.shape(doc.reps),
                right: tape.shape(ctx.reps),
            },
        ));
    }
    let ctx_t = tape.transpose(ctx.reps);
    let raw = tape.matmul(doc.reps, ctx_t)?;
    let scores = tape.scale(raw, 1.0 / (k as f64).sqrt());
    let attn = tape.row_softmax_masked(scores, Some(&doc.mask), Some(&ctx.mask))?;
    let summary = tape.matmul(attn, ctx.reps)?;
    let fused = tape.concat_cols(doc.reps, summary)?;
    let projected = tape.matmul(fused, w)?;
    let biased = tape.add_row(projected, b)?;
    let keep = row_mask_matrix(tape, &doc.mask, k);
    let reps = tape.mul(biased, keep)?;
    Ok(EncodedSeq {
        reps,
        final_state: doc.final_state,
        mask: doc.mask.clone(),
    })
}
