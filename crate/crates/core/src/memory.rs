//! Document memory construction. The base memory is row-normalized document
//! self-attention applied to the context-aware rows; the teacher reweights
//! that attention with a response-derived matrix G before the product, with
//! no renormalization afterward (the decoder's own attention renormalizes
//! downstream).
//!
//! G comes in two shapes: per-token importances β lifted to constant columns
//! (G_ij = β_j), or pairwise importances B = N·N^T, symmetric and PSD by
//! construction. Both support a binary mode: a Gumbel-Softmax relaxation
//! while training and Bernoulli draws at prediction time.

use crate::config::{Variant, WeightKind};
use crate::encoders::EncodedSeq;
use crate::rng::RunRng;
use crate::tensor::{Result as TRes, Tape, TensorError, TensorId};

/// A `[|D|,k]` memory plus the weight matrix that actually built it, kept
/// for the attention-accumulation analysis: plain A for the base memory,
/// the effective G ⊙ A for refined ones.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub m: TensorId,
    pub a: TensorId,
}

/// Who computed the weights: the teacher reads the response, the student
/// anticipates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Teacher,
    Student,
}

/// The reweighting matrix with its provenance. `beta` is kept for
/// token-importance variants, `b` for pairwise variants; both refer to the
/// pre-binarization continuous values used as distillation targets.
#[derive(Debug, Clone, Copy)]
pub struct WeightMatrix {
    pub g: TensorId,
    pub variant: Variant,
    pub source: WeightSource,
    pub beta: Option<TensorId>,
    pub b: Option<TensorId>,
}

/// How stochastic binarization draws its noise. `Frozen` makes the forward
/// deterministic for finite-difference checks; `Sample` pulls fresh noise.
pub enum BinarizeNoise<'a> {
    Sample(&'a mut RunRng),
    Frozen(&'a [f64]),
}

/// Training-time relaxation vs prediction-time hard sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeMode {
    Train,
    Predict,
}

fn masked_self_attention(tape: &mut Tape, d: TensorId, mask: &[bool]) -> TRes<TensorId> {
    let dt = tape.transpose(d);
    let scores = tape.matmul(d, dt)?;
    tape.row_softmax_masked(scores, Some(mask), Some(mask))
}

/// Base memory: A = row_softmax(D·D^T) over valid positions, M = A·D.
pub fn self_attention(tape: &mut Tape, doc: &EncodedSeq) -> TRes<Memory> {
    let a = masked_self_attention(tape, doc.reps, &doc.mask)?;
    let m = tape.matmul(a, doc.reps)?;
    Ok(Memory { m, a })
}

/// Refined memory M̃ = (G ⊙ A)·D. The returned weights are the effective
/// G ⊙ A, so accumulating them shows which tokens the memory emphasized.
pub fn refine_memory(tape: &mut Tape, doc: &EncodedSeq, g: TensorId) -> TRes<Memory> {
    let a = masked_self_attention(tape, doc.reps, &doc.mask)?;
    let ga = tape.mul(g, a)?;
    let m = tape.matmul(ga, doc.reps)?;
    Ok(Memory { m, a: ga })
}

/// Token importances β_i = d_i · r, zero at masked rows (their d_i is zero).
pub fn rti_beta(tape: &mut Tape, doc: &EncodedSeq, resp_final: TensorId) -> TRes<TensorId> {
    let k = tape.shape(doc.reps)[1];
    if tape.shape(resp_final) != [1, k] {
        return Err(TensorError::ShapeMismatch {
            op: "rti_beta",
            left: tape.shape(doc.reps),
            right: tape.shape(resp_final),
        });
    }
    let rt = tape.transpose(resp_final);
    tape.matmul(doc.reps, rt)
}

/// Pairwise importances B = N·N^T with N = D·R^T. Masked rows of either side
/// are zero, so B's masked rows and columns vanish without extra work.
pub fn rpi_b(tape: &mut Tape, doc: &EncodedSeq, resp: &EncodedSeq) -> TRes<TensorId> {
    let k = tape.shape(doc.reps)[1];
    if tape.shape(resp.reps)[1] != k {
        return Err(TensorError::ShapeMismatch {
            op: "rpi_b",
            left: tape.shape(doc.reps),
            right: tape.shape(resp.reps),
        });
    }
    let rt = tape.transpose(resp.reps);
    let n = tape.matmul(doc.reps, rt)?;
    let nt = tape.transpose(n);
    tape.matmul(n, nt)
}

/// Lift a `[|D|,1]` column of per-token weights to G = 1·w^T with masked
/// rows zeroed, so every column of G is constant. Masked columns are left
/// as-is: the attention they would scale is already zero.
pub fn lift_column_to_g(tape: &mut Tape, weights: TensorId, mask: &[bool]) -> TRes<TensorId> {
    let n = mask.len();
    if tape.shape(weights) != [n, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "lift_column_to_g",
            left: tape.shape(weights),
            right: [n, 1],
        });
    }
    let ones_col: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let ones = tape.constant([n, 1], ones_col);
    let wt = tape.transpose(weights);
    tape.matmul(ones, wt)
}

/// Continuous ("soft") token-importance weights: G = 1·β^T.
pub fn rti_weights(
    tape: &mut Tape,
    doc: &EncodedSeq,
    resp_final: TensorId,
    source: WeightSource,
) -> TRes<WeightMatrix> {
    let beta = rti_beta(tape, doc, resp_final)?;
    let g = lift_column_to_g(tape, beta, &doc.mask)?;
    Ok(WeightMatrix {
        g,
        variant: Variant { kind: WeightKind::TokenImportance, binary: false },
        source,
        beta: Some(beta),
        b: None,
    })
}

/// Continuous pairwise weights: G = B.
pub fn rpi_weights(
    tape: &mut Tape,
    doc: &EncodedSeq,
    resp: &EncodedSeq,
    source: WeightSource,
) -> TRes<WeightMatrix> {
    let b = rpi_b(tape, doc, resp)?;
    Ok(WeightMatrix {
        g: b,
        variant: Variant { kind: WeightKind::PairwiseImportance, binary: false },
        source,
        beta: None,
        b: Some(b),
    })
}

#[derive(Debug, thiserror::Error)]
pub enum BinarizeError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Gumbel-Softmax relaxation of Bernoulli(sigmoid(x)) per element.
///
/// With p = sigmoid(x), the concrete relaxation is
/// sigmoid((log p − log(1−p) + log u − log(1−u))/τ), and log p − log(1−p)
/// collapses back to x, so the graph stays a cheap sigmoid of (x + noise)/τ.
/// Entries where `live` is false are forced to zero.
fn gumbel_relax(
    tape: &mut Tape,
    x: TensorId,
    tau: f64,
    noise_vals: Vec<f64>,
    live: &[bool],
) -> TRes<TensorId> {
    let shape = tape.shape(x);
    let noise = tape.constant(shape, noise_vals);
    let shifted = tape.add(x, noise)?;
    let scaled = tape.scale(shifted, 1.0 / tau);
    let soft = tape.sigmoid(scaled);
    let keep: Vec<f64> = live.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let keep = tape.constant(shape, keep);
    tape.mul(soft, keep)
}

/// Hard Bernoulli(sigmoid(x)) draws as a constant tensor (prediction mode
/// carries no gradient). Dead entries are zero.
fn bernoulli_hard(
    tape: &mut Tape,
    x: TensorId,
    rng: &mut RunRng,
    live: &[bool],
    symmetric_pairs: bool,
) -> TensorId {
    let shape = tape.shape(x);
    let xv = tape.values(x).to_vec();
    let n = shape[1];
    let mut out = vec![0.0; xv.len()];
    if symmetric_pairs {
        // sample the upper triangle (incl. diagonal), mirror the rest
        let rows = shape[0];
        for i in 0..rows {
            for j in i..n {
                let idx = i * n + j;
                if live[idx] {
                    let p = sigmoid(xv[idx]);
                    let bit = if rng.bernoulli(p) { 1.0 } else { 0.0 };
                    out[idx] = bit;
                    out[j * n + i] = if live[j * n + i] { bit } else { 0.0 };
                }
            }
        }
    } else {
        for (idx, &v) in xv.iter().enumerate() {
            if live[idx] {
                let p = sigmoid(v);
                out[idx] = if rng.bernoulli(p) { 1.0 } else { 0.0 };
            }
        }
    }
    tape.constant(shape, out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binarize token importances. Train mode stays differentiable w.r.t. β;
/// predict mode yields exact {0,1} entries.
pub fn rti_binarize(
    tape: &mut Tape,
    beta: TensorId,
    mask: &[bool],
    mode: BinarizeMode,
    tau: f64,
    noise: BinarizeNoise,
    source: WeightSource,
) -> Result<WeightMatrix, BinarizeError> {
    if tau <= 0.0 {
        return Err(BinarizeError::BadTemperature(tau));
    }
    let n = mask.len();
    let g_col = match (mode, noise) {
        (BinarizeMode::Train, noise) => {
            let vals = match noise {
                BinarizeNoise::Sample(rng) => (0..n).map(|_| rng.logistic()).collect(),
                BinarizeNoise::Frozen(v) => {
                    assert_eq!(v.len(), n, "frozen noise length");
                    v.to_vec()
                }
            };
            gumbel_relax(tape, beta, tau, vals, mask)?
        }
        (BinarizeMode::Predict, BinarizeNoise::Sample(rng)) => {
            bernoulli_hard(tape, beta, rng, mask, false)
        }
        (BinarizeMode::Predict, BinarizeNoise::Frozen(_)) => {
            panic!("prediction-mode binarization draws its own bits")
        }
    };
    let g = lift_column_to_g(tape, g_col, mask)?;
    Ok(WeightMatrix {
        g,
        variant: Variant { kind: WeightKind::TokenImportance, binary: true },
        source,
        beta: Some(beta),
        b: None,
    })
}

/// Binarize pairwise importances, keeping symmetry: noise (train) or bits
/// (predict) are drawn for the upper triangle and mirrored.
pub fn rpi_binarize(
    tape: &mut Tape,
    b: TensorId,
    mask: &[bool],
    mode: BinarizeMode,
    tau: f64,
    noise: BinarizeNoise,
    source: WeightSource,
) -> Result<WeightMatrix, BinarizeError> {
    if tau <= 0.0 {
        return Err(BinarizeError::BadTemperature(tau));
    }
    let n = mask.len();
    let live: Vec<bool> = (0..n * n)
        .map(|idx| mask[idx / n] && mask[idx % n])
        .collect();
    let g = match (mode, noise) {
        (BinarizeMode::Train, noise) => {
            let vals = match noise {
                BinarizeNoise::Sample(rng) => symmetric_logistic_noise(rng, n),
                BinarizeNoise::Frozen(v) => {
                    assert_eq!(v.len(), n * n, "frozen noise shape");
                    debug_assert!(is_symmetric(v, n, 0.0), "frozen noise must be symmetric");
                    v.to_vec()
                }
            };
            gumbel_relax(tape, b, tau, vals, &live)?
        }
        (BinarizeMode::Predict, BinarizeNoise::Sample(rng)) => {
            bernoulli_hard(tape, b, rng, &live, true)
        }
        (BinarizeMode::Predict, BinarizeNoise::Frozen(_)) => {
            panic!("prediction-mode binarization draws its own bits")
        }
    };
    Ok(WeightMatrix {
        g,
        variant: Variant { kind: WeightKind::PairwiseImportance, binary: true },
        source,
        beta: None,
        b: Some(b),
    })
}

/// Build the teacher's weight matrix for any configured variant. Continuous
/// variants ignore `mode`, `tau`, and `noise`.
pub fn teacher_weight_matrix(
    tape: &mut Tape,
    doc: &EncodedSeq,
    resp: &EncodedSeq,
    variant: Variant,
    mode: BinarizeMode,
    tau: f64,
    noise: BinarizeNoise,
) -> Result<WeightMatrix, BinarizeError> {
    match (variant.kind, variant.binary) {
        (WeightKind::TokenImportance, false) => {
            Ok(rti_weights(tape, doc, resp.final_state, WeightSource::Teacher)?)
        }
        (WeightKind::TokenImportance, true) => {
            let beta = rti_beta(tape, doc, resp.final_state)?;
            rti_binarize(tape, beta, &doc.mask, mode, tau, noise, WeightSource::Teacher)
        }
        (WeightKind::PairwiseImportance, false) => {
            Ok(rpi_weights(tape, doc, resp, WeightSource::Teacher)?)
        }
        (WeightKind::PairwiseImportance, true) => {
            let b = rpi_b(tape, doc, resp)?;
            rpi_binarize(tape, b, &doc.mask, mode, tau, noise, WeightSource::Teacher)
        }
    }
}

/// An all-ones weight matrix over live positions. Refining with it
/// reproduces the base memory bitwise (multiplying by 1.0 is exact).
pub fn ones_weight_matrix(tape: &mut Tape, mask: &[bool]) -> TRes<TensorId> {
    let ones_col: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let col = tape.constant([mask.len(), 1], ones_col);
    lift_column_to_g(tape, col, mask)
}

pub fn symmetric_logistic_noise(rng: &mut RunRng, n: usize) -> Vec<f64> {
    let mut vals = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let e = rng.logistic();
            vals[i * n + j] = e;
            vals[j * n + i] = e;
        }
    }
    vals
}

pub fn is_symmetric(vals: &[f64], n: usize, tol: f64) -> bool {
    (0..n).all(|i| (0..n).all(|j| (vals[i * n + j] - vals[j * n + i]).abs() <= tol))
}

/// Column sums of an attention matrix over valid rows: how much total
/// probability mass each document token receives.
pub fn accumulated_attention(a_vals: &[f64], mask: &[bool]) -> Vec<f64> {
    let n = mask.len();
    assert_eq!(a_vals.len(), n * n);
    let mut acc = vec![0.0; n];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for j in 0..n {
            acc[j] += a_vals[i * n + j];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::finite_difference_check;

    fn seq(tape: &mut Tape, rows: &[Vec<f64>], mask: &[bool]) -> EncodedSeq {
        let k = rows[0].len();
        let vals: Vec<f64> = rows.iter().flatten().copied().collect();
        let reps = tape.leaf([rows.len(), k], vals, true);
        EncodedSeq {
            reps,
            final_state: tape.constant([1, k], vec![0.0; k]),
            mask: mask.to_vec(),
        }
    }

    #[test]
    fn self_attention_identical_rows_average() {
        let mut tape = Tape::new();
        let d = seq(&mut tape, &[vec![1.0, 2.0], vec![1.0, 2.0]], &[true, true]);
        let mem = self_attention(&mut tape, &d).unwrap();
        assert_eq!(tape.values(mem.a), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(tape.values(mem.m), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn self_attention_singleton() {
        let mut tape = Tape::new();
        let d = seq(&mut tape, &[vec![3.0]], &[true]);
        let mem = self_attention(&mut tape, &d).unwrap();
        assert_eq!(tape.values(mem.a), &[1.0]);
        assert_eq!(tape.values(mem.m), &[3.0]);
    }

    #[test]
    fn self_attention_hand_gram_case() {
        // k=1, values [1,2,3]: scores_i = [v_i, 2 v_i, 3 v_i]
        let mut tape = Tape::new();
        let d = seq(&mut tape, &[vec![1.0], vec![2.0], vec![3.0]], &[true; 3]);
        let mem = self_attention(&mut tape, &d).unwrap();
        let a = tape.values(mem.a);
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            let exps: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|w| (v * w).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                assert!((a[i * 3 + j] - exps[j] / z).abs() < 1e-12);
            }
        }
        let m = tape.values(mem.m);
        for i in 0..3 {
            let want: f64 = (0..3).map(|j| a[i * 3 + j] * (j as f64 + 1.0)).sum();
            assert!((m[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rti_hand_case_and_column_constancy() {
        let mut tape = Tape::new();
        let d = seq(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[true, true]);
        let r = tape.constant([1, 2], vec![2.0, 3.0]);
        let w = rti_weights(&mut tape, &d, r, WeightSource::Teacher).unwrap();
        assert_eq!(tape.values(w.beta.unwrap()), &[2.0, 3.0]);
        assert_eq!(tape.values(w.g), &[2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn rti_zero_response_gives_zero_g() {
        let mut tape = Tape::new();
        let d = seq(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]], &[true, true]);
        let r = tape.constant([1, 2], vec![0.0, 0.0]);
        let w = rti_weights(&mut tape, &d, r, WeightSource::Teacher).unwrap();
        assert!(tape.values(w.g).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rti_masked_rows_and_columns_are_zero() {
        let mut tape = Tape::new();
        let d = seq(
            &mut tape,
            &[vec![1.0, 0.0], vec![0.0, 0.0]],
            &[true, false],
        );
        let r = tape.constant([1, 2], vec![2.0, 3.0]);
        let w = rti_weights(&mut tape, &d, r, WeightSource::Teacher).unwrap();
        assert_eq!(tape.values(w.g), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rpi_hand_case_symmetry_and_psd() {
        // |R|=1, r=[1,0]; d1=[2,0], d2=[3,0] → n=[2],[3], B=[[4,6],[6,9]]
        let mut tape = Tape::new();
        let d = seq(&mut tape, &[vec![2.0, 0.0], vec![3.0, 0.0]], &[true, true]);
        let r = seq(&mut tape, &[vec![1.0, 0.0]], &[true]);
        let w = rpi_weights(&mut tape, &d, &r, WeightSource::Teacher).unwrap();
        assert_eq!(tape.values(w.g), &[4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn rpi_is_symmetric_and_psd_for_random_inputs() {
        for s in 0..50 {
            let mut rng = RunRng::for_unit(99, Stream::Train, s);
            let mut tape = Tape::new();
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.uniform_range(-2.0, 2.0)).collect())
                .collect();
            let d = seq(&mut tape, &rows, &[true, true, true, false]);
            // keep the masked row honest: zero it like an encoder would
            let zeroed = {
                let mut v = tape.values(d.reps).to_vec();
                for x in &mut v[9..] {
                    *x = 0.0;
                }
                let reps = tape.leaf([4, 3], v, false);
                EncodedSeq { reps, final_state: d.final_state, mask: d.mask.clone() }
            };
            let rrows: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..3).map(|_| rng.uniform_range(-2.0, 2.0)).collect())
                .collect();
            let r = seq(&mut tape, &rrows, &[true, true]);
            let w = rpi_weights(&mut tape, &zeroed, &r, WeightSource::Teacher).unwrap();
            let b = tape.values(w.g);
            assert!(is_symmetric(b, 4, 1e-12));
            // PSD via x^T B x = ||N^T x||^2 ≥ 0 on a few probes
            for probe in 0..5 {
                let mut pr = RunRng::for_unit(7, Stream::Train, probe);
                let x: Vec<f64> = (0..4).map(|_| pr.uniform_range(-1.0, 1.0)).collect();
                let mut quad = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        quad += x[i] * b[i * 4 + j] * x[j];
                    }
                }
                assert!(quad >= -1e-9, "quadratic form {quad}");
            }
        }
    }

    #[test]
    fn refine_with_all_ones_reproduces_base_memory_bitwise() {
        let mut tape = Tape::new();
        let rows = vec![vec![0.3, -0.7], vec![1.1, 0.2], vec![0.0, 0.0]];
        let d = seq(&mut tape, &rows, &[true, true, false]);
        let base = self_attention(&mut tape, &d).unwrap();
        let ones = {
            // all-ones over live positions, zero elsewhere, like lift(1)
            let ones_col = tape.constant([3, 1], vec![1.0, 1.0, 0.0]);
            lift_column_to_g(&mut tape, ones_col, &d.mask).unwrap()
        };
        let refined = refine_memory(&mut tape, &d, ones).unwrap();
        let a: Vec<u64> = tape.values(base.m).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = tape.values(refined.m).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        // multiplying by exactly 1.0 keeps the effective weights bitwise too
        let wa: Vec<u64> = tape.values(base.a).iter().map(|v| v.to_bits()).collect();
        let wb: Vec<u64> = tape.values(refined.a).iter().map(|v| v.to_bits()).collect();
        assert_eq!(wa, wb);
    }

    #[test]
    fn refine_hand_case_binary_column_selects_one_token() {
        // identical rows give uniform A = [[.5,.5],[.5,.5]]; g = [0,1]
        // zeroes the first column, so M̃ = [[.5·d2],[.5·d2]] with no renorm
        let mut tape = Tape::new();
        let d = seq(&mut tape, &[vec![1.0], vec![1.0]], &[true, true]);
        let g_col = tape.constant([2, 1], vec![0.0, 1.0]);
        let g = lift_column_to_g(&mut tape, g_col, &d.mask).unwrap();
        assert_eq!(tape.values(g), &[0.0, 1.0, 0.0, 1.0]);
        let refined = refine_memory(&mut tape, &d, g).unwrap();
        assert_eq!(tape.values(refined.m), &[0.5, 0.5]);
    }

    #[test]
    fn rti_scaling_beta_scales_refined_memory_linearly() {
        let build = |c: f64| {
            let mut tape = Tape::new();
            let d = seq(
                &mut tape,
                &[vec![0.4, 0.1], vec![-0.3, 0.8]],
                &[true, true],
            );
            let r = tape.constant([1, 2], vec![c * 1.3, c * -0.2]);
            let w = rti_weights(&mut tape, &d, r, WeightSource::Teacher).unwrap();
            let mem = refine_memory(&mut tape, &d, w.g).unwrap();
            tape.values(mem.m).to_vec()
        };
        let base = build(1.0);
        let tripled = build(3.0);
        for (b, t) in base.iter().zip(&tripled) {
            assert!((3.0 * b - t).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_identity_at_half_probability() {
        // β=0 (p=.5) with frozen zero noise (u=.5) → g=.5 at any τ
        for tau in [0.01, 1.0, 10.0] {
            let mut tape = Tape::new();
            let beta = tape.leaf([2, 1], vec![0.0, 0.0], true);
            let w = rti_binarize(
                &mut tape,
                beta,
                &[true, true],
                BinarizeMode::Train,
                tau,
                BinarizeNoise::Frozen(&[0.0, 0.0]),
                WeightSource::Teacher,
            )
            .unwrap();
            assert_eq!(tape.values(w.g), &[0.5, 0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn low_temperature_pushes_samples_to_the_corners() {
        let mut rng = RunRng::new(5, Stream::Train);
        let mut total_dist = 0.0;
        let mut count = 0;
        for _ in 0..200 {
            let mut tape = Tape::new();
            let beta_vals: Vec<f64> = (0..5).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
            let beta = tape.leaf([5, 1], beta_vals, false);
            let w = rti_binarize(
                &mut tape,
                beta,
                &[true; 5],
                BinarizeMode::Train,
                0.01,
                BinarizeNoise::Sample(&mut rng),
                WeightSource::Teacher,
            )
            .unwrap();
            for col in 0..5 {
                let v = tape.values(w.g)[col];
                total_dist += (v - v.round()).abs();
                count += 1;
            }
        }
        assert!(total_dist / (count as f64) < 0.05);
    }

    #[test]
    fn prediction_mode_is_binary_and_tracks_p() {
        let p_target = 0.3f64;
        let beta_val = (p_target / (1.0 - p_target)).ln();
        let mut rng = RunRng::new(9, Stream::Train);
        let n = 10_000;
        let mut ones = 0usize;
        for _ in 0..n {
            let mut tape = Tape::new();
            let beta = tape.leaf([1, 1], vec![beta_val], false);
            let w = rti_binarize(
                &mut tape,
                beta,
                &[true],
                BinarizeMode::Predict,
                1.0,
                BinarizeNoise::Sample(&mut rng),
                WeightSource::Teacher,
            )
            .unwrap();
            let v = tape.values(w.g)[0];
            assert!(v == 0.0 || v == 1.0);
            ones += (v == 1.0) as usize;
        }
        let mean = ones as f64 / n as f64;
        let bound = 3.0 * (p_target * (1.0 - p_target) / n as f64).sqrt();
        assert!((mean - p_target).abs() < bound, "mean {mean} vs {p_target}");
    }

    #[test]
    fn extreme_probability_saturates() {
        // p = 0.9999 → empirical mean ≥ 0.999 over 10k draws
        let p = 0.9999f64;
        let beta_val = (p / (1.0 - p)).ln();
        let mut rng = RunRng::new(4, Stream::Train);
        let mut ones = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let mut tape = Tape::new();
            let beta = tape.leaf([1, 1], vec![beta_val], false);
            let w = rti_binarize(
                &mut tape, beta, &[true], BinarizeMode::Predict, 1.0,
                BinarizeNoise::Sample(&mut rng), WeightSource::Teacher,
            )
            .unwrap();
            ones += (tape.values(w.g)[0] == 1.0) as usize;
        }
        assert!(ones as f64 / n as f64 >= 0.999);
    }

    #[test]
    fn rpi_binarization_keeps_symmetry() {
        let mut rng = RunRng::new(3, Stream::Train);
        for mode in [BinarizeMode::Train, BinarizeMode::Predict] {
            for _ in 0..20 {
                let mut tape = Tape::new();
                let mut vals = vec![0.0; 16];
                for i in 0..4 {
                    for j in i..4 {
                        let v = rng.uniform_range(-2.0, 2.0);
                        vals[i * 4 + j] = v;
                        vals[j * 4 + i] = v;
                    }
                }
                let b = tape.leaf([4, 4], vals, false);
                let mask = [true, true, true, false];
                let w = rpi_binarize(
                    &mut tape, b, &mask, mode, 1.0,
                    BinarizeNoise::Sample(&mut rng), WeightSource::Teacher,
                )
                .unwrap();
                let g = tape.values(w.g);
                assert!(is_symmetric(g, 4, 0.0));
                if mode == BinarizeMode::Predict {
                    assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
                }
                // masked row/column stays zero
                for j in 0..4 {
                    assert_eq!(g[3 * 4 + j], 0.0);
                    assert_eq!(g[j * 4 + 3], 0.0);
                }
            }
        }
    }

    #[test]
    fn rpi_bernoulli_rate_matches_mean_sigmoid() {
        let mut rng = RunRng::new(8, Stream::Train);
        let p = sigmoid(0.3);
        let n = 10_000;
        let mut ones = 0usize;
        let mut cells = 0usize;
        for _ in 0..n {
            let mut t = Tape::new();
            let b = t.leaf([2, 2], vec![0.3; 4], false);
            let w = rpi_binarize(
                &mut t, b, &[true, true], BinarizeMode::Predict, 1.0,
                BinarizeNoise::Sample(&mut rng), WeightSource::Teacher,
            )
            .unwrap();
            let g = t.values(w.g);
            // the three independent cells per draw: upper triangle + diagonal
            ones += (g[0] == 1.0) as usize + (g[1] == 1.0) as usize + (g[3] == 1.0) as usize;
            cells += 3;
        }
        let rate = ones as f64 / cells as f64;
        let bound = 3.0 * (p * (1.0 - p) / cells as f64).sqrt();
        assert!((rate - p).abs() < bound, "rate {rate} vs {p}");
    }

    #[test]
    fn gradients_flow_through_rti_refinement() {
        let d0 = vec![0.4, -0.2, 0.9, 0.7, -0.5, 0.1];
        let err = finite_difference_check(&d0, [3, 2], 1e-4, |tape, reps| {
            let d = EncodedSeq {
                reps,
                final_state: tape.constant([1, 2], vec![0.0, 0.0]),
                mask: vec![true; 3],
            };
            let r = tape.constant([1, 2], vec![0.8, -0.3]);
            let w = rti_weights(tape, &d, r, WeightSource::Teacher)?;
            let mem = refine_memory(tape, &d, w.g)?;
            let sq = tape.mul(mem.m, mem.m)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn gradients_flow_through_frozen_gumbel_rpi() {
        let d0 = vec![0.4, -0.2, 0.9, 0.7];
        let mut rng = RunRng::new(17, Stream::Train);
        let noise = symmetric_logistic_noise(&mut rng, 2);
        let err = finite_difference_check(&d0, [2, 2], 1e-4, |tape, reps| {
            let d = EncodedSeq {
                reps,
                final_state: tape.constant([1, 2], vec![0.0; 2]),
                mask: vec![true; 2],
            };
            let rreps = tape.constant([2, 2], vec![0.6, -0.1, 0.2, 0.5]);
            let resp = EncodedSeq {
                reps: rreps,
                final_state: tape.constant([1, 2], vec![0.0; 2]),
                mask: vec![true; 2],
            };
            let b = rpi_b(tape, &d, &resp)?;
            let w = rpi_binarize(
                tape,
                b,
                &d.mask,
                BinarizeMode::Train,
                1.0,
                BinarizeNoise::Frozen(&noise),
                WeightSource::Teacher,
            )
            .map_err(|e| match e {
                BinarizeError::Tensor(t) => t,
                BinarizeError::BadTemperature(_) => unreachable!(),
            })?;
            let mem = refine_memory(tape, &d, w.g)?;
            let sq = tape.mul(mem.m, mem.m)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn bad_temperature_is_rejected() {
        let mut tape = Tape::new();
        let beta = tape.leaf([1, 1], vec![0.0], false);
        let mut rng = RunRng::new(0, Stream::Train);
        let err = rti_binarize(
            &mut tape, beta, &[true], BinarizeMode::Train, 0.0,
            BinarizeNoise::Sample(&mut rng), WeightSource::Teacher,
        );
        assert!(matches!(err, Err(BinarizeError::BadTemperature(_))));
    }

    #[test]
    fn accumulated_attention_properties() {
        // uniform rows: every column accumulates to 1
        let a = vec![0.25; 16];
        let acc = accumulated_attention(&a, &[true; 4]);
        for v in &acc {
            assert!((v - 1.0).abs() < 1e-12);
        }
        // one-hot rows all attending token 3
        let mut hot = vec![0.0; 16];
        for i in 0..4 {
            hot[i * 4 + 3] = 1.0;
        }
        let acc = accumulated_attention(&hot, &[true; 4]);
        assert_eq!(acc, vec![0.0, 0.0, 0.0, 4.0]);
        // total equals valid row count for row-stochastic A
        let total: f64 = accumulated_attention(&a, &[true, true, false, false])
            .iter()
            .sum();
        assert!((total - 2.0).abs() < 1e-12);
    }
}
