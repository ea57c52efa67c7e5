//! Response anticipation: estimate the teacher's reweighting inputs from the
//! document and context alone. A bilinear attention layer mixes context into
//! each document row, then a small MLP reads off per-token importances β̂, or
//! a bilinear form reads off pairwise importances B̂ (symmetrized to match
//! the teacher's B, which is symmetric by construction).

use crate::config::{Variant, WeightKind};
use crate::encoders::EncodedSeq;
use crate::memory::{
    lift_column_to_g, rpi_binarize, rti_binarize, BinarizeError, BinarizeMode, BinarizeNoise,
    WeightMatrix, WeightSource,
};
use crate::tensor::{Result as TRes, Tape, TensorError, TensorId};

/// Tape bindings for the student's own parameters: the bilinear attention
/// matrix, the two-layer MLP (k -> k -> 1, ReLU between), and the bilinear
/// form for pairwise estimates.
#[derive(Debug, Clone, Copy)]
pub struct StudentWeights {
    pub w: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_b1: TensorId,
    pub mlp_w2: TensorId,
    pub mlp_b2: TensorId,
    pub w_a: TensorId,
}

/// H = row_softmax(D·W·X^T)·X over valid rows and columns. Scores are not
/// rescaled; masked document rows come out as zero rows.
pub fn student_hidden(
    tape: &mut Tape,
    doc: &EncodedSeq,
    ctx: &EncodedSeq,
    w: TensorId,
) -> TRes<TensorId> {
    let k = tape.shape(doc.reps)[1];
    if tape.shape(ctx.reps)[1] != k || tape.shape(w) != [k, k] {
        return Err(TensorError::ShapeMismatch {
            op: "student_hidden",
            left: tape.shape(doc.reps),
            right: tape.shape(w),
        });
    }
    let dw = tape.matmul(doc.reps, w)?;
    let xt = tape.transpose(ctx.reps);
    let scores = tape.matmul(dw, xt)?;
    let attn = tape.row_softmax_masked(scores, Some(&doc.mask), Some(&ctx.mask))?;
    tape.matmul(attn, ctx.reps)
}

fn mask_column(tape: &mut Tape, mask: &[bool]) -> TensorId {
    let vals: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    tape.constant([mask.len(), 1], vals)
}

/// β̂_i = w2·relu(H_i·w1 + b1) + b2, re-masked because the biases leak into
/// padded rows.
pub fn estimate_beta(
    tape: &mut Tape,
    hidden: TensorId,
    mask: &[bool],
    p: &StudentWeights,
) -> TRes<TensorId> {
    let pre1 = tape.matmul(hidden, p.mlp_w1)?;
    let a1 = tape.add_row(pre1, p.mlp_b1)?;
    let h1 = tape.relu(a1);
    let pre2 = tape.matmul(h1, p.mlp_w2)?;
    let beta = tape.add_row(pre2, p.mlp_b2)?;
    let keep = mask_column(tape, mask);
    tape.mul(beta, keep)
}

/// B̂ = (H·W_a·H^T + (H·W_a·H^T)^T)/2. Masked rows of H are zero, so the
/// corresponding rows and columns of B̂ vanish without extra masking.
pub fn estimate_b(
    tape: &mut Tape,
    hidden: TensorId,
    p: &StudentWeights,
) -> TRes<TensorId> {
    let hw = tape.matmul(hidden, p.w_a)?;
    let ht = tape.transpose(hidden);
    let raw = tape.matmul(hw, ht)?;
    let rawt = tape.transpose(raw);
    let sum = tape.add(raw, rawt)?;
    Ok(tape.scale(sum, 0.5))
}

/// The continuous estimate the configured variant calls for: β̂ as a column
/// for token importances, B̂ as a square matrix for pairwise ones. This is
/// the quantity distillation matches against the teacher's continuous value.
pub fn student_estimate(
    tape: &mut Tape,
    doc: &EncodedSeq,
    ctx: &EncodedSeq,
    kind: WeightKind,
    p: &StudentWeights,
) -> TRes<TensorId> {
    let hidden = student_hidden(tape, doc, ctx, p.w)?;
    match kind {
        WeightKind::TokenImportance => estimate_beta(tape, hidden, &doc.mask, p),
        WeightKind::PairwiseImportance => estimate_b(tape, hidden, p),
    }
}

/// Assemble the student's G exactly the way the teacher's memory module
/// does, substituting the estimates. Binary variants binarize on top of the
/// continuous estimate; the continuous estimate itself is what distillation
/// matches. `mode` and `noise` are ignored for continuous variants.
pub fn student_weight_matrix(
    tape: &mut Tape,
    estimate: TensorId,
    variant: Variant,
    mask: &[bool],
    mode: BinarizeMode,
    tau: f64,
    noise: BinarizeNoise,
) -> Result<WeightMatrix, BinarizeError> {
    match (variant.kind, variant.binary) {
        (WeightKind::TokenImportance, false) => {
            let g = lift_column_to_g(tape, estimate, mask)?;
            Ok(WeightMatrix {
                g,
                variant,
                source: WeightSource::Student,
                beta: Some(estimate),
                b: None,
            })
        }
        (WeightKind::TokenImportance, true) => rti_binarize(
            tape,
            estimate,
            mask,
            mode,
            tau,
            noise,
            WeightSource::Student,
        ),
        (WeightKind::PairwiseImportance, false) => Ok(WeightMatrix {
            g: estimate,
            variant,
            source: WeightSource::Student,
            beta: None,
            b: Some(estimate),
        }),
        (WeightKind::PairwiseImportance, true) => rpi_binarize(
            tape,
            estimate,
            mask,
            mode,
            tau,
            noise,
            WeightSource::Student,
        ),
    }
}

/// Prediction-time G from a student estimate: continuous variants use the
/// estimate as-is (lifted for token importances); binary variants draw hard
/// Bernoulli bits.
pub fn student_usable_g(
    tape: &mut Tape,
    estimate: TensorId,
    variant: Variant,
    mask: &[bool],
    tau: f64,
    rng: &mut crate::rng::RunRng,
) -> Result<TensorId, BinarizeError> {
    let mode = if variant.binary {
        BinarizeMode::Predict
    } else {
        BinarizeMode::Train
    };
    let w = student_weight_matrix(
        tape,
        estimate,
        variant,
        mask,
        mode,
        tau,
        BinarizeNoise::Sample(rng),
    )?;
    Ok(w.g)
}
