//! Recurrent cell steps composed from tape primitives, so the reverse sweep
//! differentiates them without cell-specific backward code.

use super::{Result, Tape, TensorId};

/// LSTM weights: `w_ih [in,4h]`, `w_hh [h,4h]`, `b [1,4h]`, gate order
/// input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub b: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: TensorId,
    pub c: TensorId,
}

/// One LSTM step on a `[1,in]` input row.
///
/// i = σ(xWi + hUi + bi), f = σ(...), g = tanh(...), o = σ(...)
/// c' = f⊙c + i⊙g, h' = o⊙tanh(c')
pub fn lstm_step(
    tape: &mut Tape,
    p: &LstmParams,
    x: TensorId,
    state: &LstmState,
) -> Result<LstmState> {
    let h = tape.shape(state.h)[1];
    let xw = tape.matmul(x, p.w_ih)?;
    let hw = tape.matmul(state.h, p.w_hh)?;
    let pre0 = tape.add(xw, hw)?;
    let pre = tape.add(pre0, p.b)?;

    let i_pre = tape.slice_cols(pre, 0, h)?;
    let f_pre = tape.slice_cols(pre, h, h)?;
    let g_pre = tape.slice_cols(pre, 2 * h, h)?;
    let o_pre = tape.slice_cols(pre, 3 * h, h)?;

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok(LstmState { h: h_next, c: c_next })
}

/// GRU weights: `w_ih [in,3h]`, `w_hh [h,3h]`, `b [1,3h]`, gate order
/// update, reset, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub b: TensorId,
}

/// One GRU step on a `[1,in]` input row.
///
/// z = σ(xWz + hUz + bz), r = σ(xWr + hUr + br)
/// n = tanh(xWn + bn + r⊙(hUn)), h' = (1−z)⊙n + z⊙h
pub fn gru_step(tape: &mut Tape, p: &GruParams, x: TensorId, h: TensorId) -> Result<TensorId> {
    let hd = tape.shape(h)[1];
    let xw = tape.matmul(x, p.w_ih)?;
    let xwb = tape.add(xw, p.b)?;
    let hw = tape.matmul(h, p.w_hh)?;

    let zx = tape.slice_cols(xwb, 0, hd)?;
    let zh = tape.slice_cols(hw, 0, hd)?;
    let z_pre = tape.add(zx, zh)?;
    let z = tape.sigmoid(z_pre);

    let rx = tape.slice_cols(xwb, hd, hd)?;
    let rh = tape.slice_cols(hw, hd, hd)?;
    let r_pre = tape.add(rx, rh)?;
    let r = tape.sigmoid(r_pre);

    let nx = tape.slice_cols(xwb, 2 * hd, hd)?;
    let nh = tape.slice_cols(hw, 2 * hd, hd)?;
    let rnh = tape.mul(r, nh)?;
    let n_pre = tape.add(nx, rnh)?;
    let n = tape.tanh(n_pre);

    // (1−z)⊙n + z⊙h  ==  n − z⊙n + z⊙h
    let zn = tape.mul(z, n)?;
    let zh2 = tape.mul(z, h)?;
    let a = tape.sub(n, zn)?;
    tape.add(a, zh2)
}
