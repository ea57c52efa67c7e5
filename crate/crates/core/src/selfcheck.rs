//! Runtime verification suites shared by the CLI `selfcheck` command and
//! the integration gate: finite-difference checks of the full composite
//! losses, structural invariants of the weight matrix, the all-ones
//! reduction identity, and sampling statistics of the binary relaxation.

use crate::config::{ModelConfig, TrainConfig, Variant, WeightKind};
use crate::data::{batch, Sample};
use crate::encoders::EncodedSeq;
use crate::memory::{
    refine_memory, rti_binarize, self_attention, teacher_weight_matrix, BinarizeMode,
    BinarizeNoise, WeightSource, ones_weight_matrix,
};
use crate::model::{register_params, Bound};
use crate::params::{ParamStore, ParamTag};
use crate::rng::{RunRng, Stream};
use crate::tensor::{finite_difference_check_multi, Tape};
use crate::training::{batch_loss, GradBag, Objective, Phase};

/// One suite's verdict. `detail` carries the measured quantity so failures
/// are diagnosable from the printed line alone.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &'static str, passed: bool, detail: String) -> CheckReport {
        CheckReport { name, passed, detail }
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "pass" } else { "FAIL" };
        format!("[{tag}] {}: {}", self.name, self.detail)
    }
}

fn toy_mcfg() -> ModelConfig {
    ModelConfig {
        embed: 3,
        hidden: 2,
        k: 4,
        dropout: 0.0,
        max_doc: 4,
        max_ctx: 2,
        max_resp: 3,
        vocab_cap: 8,
    }
}

fn toy_tcfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        lr: 5e-4,
        batch: 2,
        lambda: 1.0,
        tau: 1.0,
        variant,
        epochs: 1,
        patience: 3,
        clip_norm: 5.0,
        val_every: 10,
        rounds: 1,
    }
}

fn toy_store(seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = RunRng::new(seed, Stream::Init);
    register_params(&mut store, &toy_mcfg(), 8, &mut rng);
    store
}

fn toy_samples(seed: u64) -> Vec<Sample> {
    // two samples with unequal lengths so padding paths are exercised
    let mut rng = RunRng::new(seed, Stream::Data);
    let mut tok = |n: usize| -> Vec<u32> { (0..n).map(|_| 4 + rng.below(4) as u32).collect() };
    vec![
        Sample { document: tok(4), context: tok(2), response: tok(3) },
        Sample { document: tok(3), context: tok(1), response: tok(2) },
    ]
}

const ALL_VARIANTS: [Variant; 4] = [
    Variant { kind: WeightKind::TokenImportance, binary: false },
    Variant { kind: WeightKind::TokenImportance, binary: true },
    Variant { kind: WeightKind::PairwiseImportance, binary: false },
    Variant { kind: WeightKind::PairwiseImportance, binary: true },
];

/// Deterministic composite loss of the current store values: dropout off,
/// binarization at zero noise. This is the function finite differences probe.
fn deterministic_loss(
    store: &ParamStore,
    tcfg: &TrainConfig,
    samples: &[Sample],
    phase: Phase,
) -> f64 {
    let b = batch(samples);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store, |t| phase.active(t));
    let objective = match phase {
        Phase::Teacher => Objective::Teacher,
        Phase::Student => Objective::Student,
    };
    let out = batch_loss(&mut tape, &bound, &toy_mcfg(), tcfg, &b, objective, None, false)
        .expect("toy loss");
    tape.value_scalar(out.total)
}

/// Central finite differences over the trainable parameters of one
/// phase/variant combination. Large tensors are probed on an index stride
/// capped at `max_entries` coordinates; small ones are covered fully.
fn composite_worst_rel_err(
    seed: u64,
    variant: Variant,
    phase: Phase,
    eps: f64,
    max_entries: usize,
    retry_below: f64,
) -> f64 {
    let mut store = toy_store(seed);
    let tcfg = toy_tcfg(variant);
    let samples = toy_samples(seed.wrapping_mul(31).wrapping_add(7));
    let b = batch(&samples);

    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &store, |t| phase.active(t));
    let objective = match phase {
        Phase::Teacher => Objective::Teacher,
        Phase::Student => Objective::Student,
    };
    let out = batch_loss(&mut tape, &bound, &toy_mcfg(), &tcfg, &b, objective, None, false)
        .expect("toy loss");
    tape.backward(out.total).expect("backward");
    let analytic = GradBag::collect(&tape, &bound);

    let names: Vec<String> = match phase {
        Phase::Teacher => store
            .names_with_tag(ParamTag::Base)
            .into_iter()
            .chain(store.names_with_tag(ParamTag::Teacher))
            .collect(),
        Phase::Student => store.names_with_tag(ParamTag::Student),
    };

    let mut worst = 0.0f64;
    for name in names {
        let len = store.get(&name).values.len();
        let stride = len.div_ceil(max_entries).max(1);
        let mut probe = |e: usize, h: f64| -> f64 {
            store.get_mut(&name).values[e] += h;
            let up = deterministic_loss(&store, &tcfg, &samples, phase);
            store.get_mut(&name).values[e] -= 2.0 * h;
            let down = deterministic_loss(&store, &tcfg, &samples, phase);
            store.get_mut(&name).values[e] += h;
            (up - down) / (2.0 * h)
        };
        let mut pairs = Vec::new();
        for e in (0..len).step_by(stride) {
            let fd = probe(e, eps);
            let a = analytic.get(&name).map(|g| g[e]).unwrap_or(0.0);
            pairs.push((e, a, fd));
        }
        // normalize per tensor: coordinates with near-zero gradients sit at
        // the rounding floor of the difference quotient, so measuring them
        // against the tensor's gradient scale keeps the check conditioned
        let scale = pairs
            .iter()
            .map(|&(_, a, fd)| a.abs().max(fd.abs()))
            .fold(1e-4f64, f64::max);
        for (e, a, fd) in pairs {
            let mut err = (a - fd).abs() / scale;
            // a probe that straddles a relu kink measures a one-sided slope;
            // moving the step re-probes off the kink, while a wrong adjoint
            // stays wrong at every step size
            if err >= retry_below {
                for alt in [eps * 5.0, eps / 5.0] {
                    if err < retry_below {
                        break;
                    }
                    err = err.min((a - probe(e, alt)).abs() / scale);
                }
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// Gradient check of all four composite losses under both phases' freeze
/// patterns, continuous and binarized, across `seeds` random initializations.
pub fn composite_gradient_check(seeds: u64, eps: f64, tol: f64) -> CheckReport {
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for seed in 0..seeds {
        for variant in ALL_VARIANTS {
            for phase in [Phase::Teacher, Phase::Student] {
                let err = composite_worst_rel_err(seed + 1, variant, phase, eps, 8, tol);
                if err > worst {
                    worst = err;
                    worst_at = format!("{} {}", phase.label(), variant.name());
                }
            }
        }
    }
    CheckReport::new(
        "composite-gradients",
        worst < tol,
        format!("max rel err {worst:.3e} ({worst_at}), tolerance {tol:.0e}, {seeds} seeds"),
    )
}

/// A compact expression sweep re-checking every differentiable tensor op via
/// finite differences, independent of the model graph.
pub fn op_gradient_check(eps: f64, tol: f64) -> CheckReport {
    let mut worst = 0.0f64;

    // dense arithmetic chain: matmul, transpose, add, add_row, sub, mul,
    // scale, sigmoid, tanh, relu, sum_all
    let a = ("a", [2, 3], vec![0.3, -0.6, 0.9, 0.1, 0.5, -0.2]);
    let w = ("w", [3, 2], vec![0.7, -0.4, 0.2, 0.8, -0.5, 0.3]);
    let r = ("r", [1, 2], vec![0.25, -0.75]);
    let err = finite_difference_check_multi(&[a, w, r], eps, |t, ids| {
        let h = t.matmul(ids[0], ids[1])?;
        let h = t.add_row(h, ids[2])?;
        let s = t.sigmoid(h);
        let u = t.tanh(h);
        let v = t.relu(h);
        let sum = t.add(s, u)?;
        let prod = t.mul(sum, v)?;
        let ht = t.transpose(prod);
        let back = t.matmul(ht, prod)?;
        let neg = t.scale(back, -0.5);
        let diff = t.sub(back, neg)?;
        Ok(t.sum_all(diff))
    })
    .expect("op chain");
    worst = worst.max(err);

    // structural ops: concat_cols, concat_rows, slice_cols, slice_rows,
    // row, row_softmax, row_softmax_masked, mse
    let x = ("x", [2, 2], vec![0.4, -0.9, 1.2, 0.05]);
    let y = ("y", [2, 2], vec![-0.3, 0.6, 0.8, -1.1]);
    let err = finite_difference_check_multi(&[x, y], eps, |t, ids| {
        let wide = t.concat_cols(ids[0], ids[1])?;
        let tall = t.concat_rows(&[ids[0], ids[1]])?;
        let left = t.slice_cols(wide, 1, 2)?;
        let mid = t.slice_rows(tall, 1, 2)?;
        let sm = t.row_softmax(left);
        let masked = t.row_softmax_masked(mid, Some(&[true, true]), Some(&[true, false]))?;
        let r0 = t.row(sm, 0)?;
        let r1 = t.row(masked, 1)?;
        t.mse(r0, r1)
    })
    .expect("structure chain");
    worst = worst.max(err);

    // lookup and likelihood: embed, nll_softmax
    let table = ("table", [4, 3], vec![
        0.0, 0.0, 0.0,
        0.3, -0.2, 0.8,
        -0.6, 0.5, 0.1,
        0.9, 0.4, -0.7,
    ]);
    let proj = ("proj", [3, 4], vec![
        0.2, -0.5, 0.7, 0.1,
        -0.3, 0.6, -0.1, 0.4,
        0.5, 0.2, -0.6, -0.2,
    ]);
    let err = finite_difference_check_multi(&[table, proj], eps, |t, ids| {
        let e = t.embed(ids[0], &[1, 3, 2], 0)?;
        let logits = t.matmul(e, ids[1])?;
        t.nll_softmax(logits, &[2, 0, 3])
    })
    .expect("embed chain");
    worst = worst.max(err);

    CheckReport::new(
        "op-gradients",
        worst < tol,
        format!("max rel err {worst:.3e}, tolerance {tol:.0e}"),
    )
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
/// Exact enough at the n <= 6 sizes the invariant sweep uses.
pub fn min_eigenvalue_symmetric(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    for _ in 0..200 {
        let mut p = 0;
        let mut q = 1;
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                if m[i * n + j].abs() > off {
                    off = m[i * n + j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if off < 1e-13 {
            break;
        }
        let apq = m[p * n + q];
        let theta = 0.5 * (m[q * n + q] - m[p * n + p]) / apq;
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..n {
            let akp = m[k * n + p];
            let akq = m[k * n + q];
            m[k * n + p] = c * akp - s * akq;
            m[k * n + q] = s * akp + c * akq;
        }
        for k in 0..n {
            let apk = m[p * n + k];
            let aqk = m[q * n + k];
            m[p * n + k] = c * apk - s * aqk;
            m[q * n + k] = s * apk + c * aqk;
        }
    }
    (0..n).map(|i| m[i * n + i]).fold(f64::INFINITY, f64::min)
}

fn random_encoded(tape: &mut Tape, rng: &mut RunRng, rows: usize, k: usize, mask: Vec<bool>) -> EncodedSeq {
    let reps: Vec<f64> = (0..rows * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let fin: Vec<f64> = (0..k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    EncodedSeq {
        reps: tape.leaf([rows, k], reps, false),
        final_state: tape.leaf([1, k], fin, false),
        mask,
    }
}

/// Structural invariants of G over `inputs` random documents: constant
/// token-importance columns, symmetric and positive semidefinite pairwise
/// matrices, strictly binary prediction-mode entries, and the bitwise
/// all-ones reduction of the refined memory.
pub fn weight_matrix_invariants(inputs: usize, seed: u64) -> CheckReport {
    let k = 4;
    let mut rng = RunRng::new(seed, Stream::Data);
    let mut min_eig = f64::INFINITY;
    let mut max_asym = 0.0f64;
    for case in 0..inputs {
        let n = 2 + rng.below(5); // 2..=6 document tokens
        let mut mask: Vec<bool> = (0..n).map(|_| rng.below(4) != 0).collect();
        if !mask.iter().any(|&m| m) {
            mask[0] = true;
        }
        let mut tape = Tape::new();
        let doc = random_encoded(&mut tape, &mut rng, n, k, mask.clone());
        let resp_len = 1 + rng.below(3);
        let resp = random_encoded(&mut tape, &mut rng, resp_len, k, vec![true; resp_len]);

        // constant columns for token importance, valid rows only
        let rti = Variant { kind: WeightKind::TokenImportance, binary: false };
        let w = teacher_weight_matrix(
            &mut tape, &doc, &resp, rti, BinarizeMode::Train, 1.0, BinarizeNoise::Sample(&mut rng),
        )
        .expect("rti weights");
        let g = tape.values(w.g);
        let valid: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        for j in 0..n {
            let first = g[valid[0] * n + j];
            for &i in &valid {
                assert_eq!(
                    g[i * n + j].to_bits(),
                    first.to_bits(),
                    "case {case}: column {j} varies across valid rows"
                );
            }
            for i in 0..n {
                if !mask[i] {
                    assert_eq!(g[i * n + j], 0.0, "case {case}: masked row leaks");
                }
            }
        }

        // pairwise matrix: symmetric, PSD
        let rpi = Variant { kind: WeightKind::PairwiseImportance, binary: false };
        let w = teacher_weight_matrix(
            &mut tape, &doc, &resp, rpi, BinarizeMode::Train, 1.0, BinarizeNoise::Sample(&mut rng),
        )
        .expect("rpi weights");
        let b = tape.values(w.g).to_vec();
        for i in 0..n {
            for j in 0..n {
                max_asym = max_asym.max((b[i * n + j] - b[j * n + i]).abs());
            }
        }
        min_eig = min_eig.min(min_eigenvalue_symmetric(&b, n));

        // prediction-mode binarization is strictly 0/1
        for kind in [WeightKind::TokenImportance, WeightKind::PairwiseImportance] {
            let v = Variant { kind, binary: true };
            let w = teacher_weight_matrix(
                &mut tape, &doc, &resp, v, BinarizeMode::Predict, 1.0,
                BinarizeNoise::Sample(&mut rng),
            )
            .expect("binary weights");
            for (idx, &x) in tape.values(w.g).iter().enumerate() {
                assert!(
                    x == 0.0 || x == 1.0,
                    "case {case}: non-binary entry {x} at {idx}"
                );
            }
        }

        // all-ones G reproduces the unrefined memory bitwise
        let base = self_attention(&mut tape, &doc).expect("base");
        let ones = ones_weight_matrix(&mut tape, &doc.mask).expect("ones");
        let refined = refine_memory(&mut tape, &doc, ones).expect("refined");
        let lhs = tape.values(base.m).to_vec();
        let rhs = tape.values(refined.m).to_vec();
        assert_eq!(lhs.len(), rhs.len());
        for (x, y) in lhs.iter().zip(&rhs) {
            assert_eq!(x.to_bits(), y.to_bits(), "case {case}: reduction not bitwise");
        }
    }
    let passed = max_asym < 1e-6 && min_eig >= -1e-8;
    CheckReport::new(
        "weight-matrix-invariants",
        passed,
        format!(
            "{inputs} inputs; max pairwise asymmetry {max_asym:.2e}, min eigenvalue {min_eig:.2e}"
        ),
    )
}

/// With G forced to all-ones and the distillation weight at zero, the
/// teacher, student, and base objectives are the same function; their values
/// must agree bitwise on identical batches.
pub fn reduction_identity(seeds: u64) -> CheckReport {
    use crate::training::evaluate_loss;
    let mcfg = toy_mcfg();
    let mut tcfg = toy_tcfg(ALL_VARIANTS[0]);
    tcfg.lambda = 0.0;
    for seed in 0..seeds {
        let store = toy_store(seed + 100);
        let samples = toy_samples(seed + 200);
        let bits = |objective: Objective| -> u64 {
            evaluate_loss(&store, &mcfg, &tcfg, &samples, objective, true)
                .expect("reduction loss")
                .to_bits()
        };
        let base = bits(Objective::Base);
        if bits(Objective::Teacher) != base || bits(Objective::Student) != base {
            return CheckReport::new(
                "reduction-identity",
                false,
                format!("objectives disagree at seed {seed}"),
            );
        }
    }
    CheckReport::new(
        "reduction-identity",
        true,
        format!("teacher/student/base losses bitwise equal across {seeds} seeds"),
    )
}

/// Sampling behaviour of the binary relaxation at p = 0.3: prediction-mode
/// draws track the rate within 3 sigma over 10,000 samples, and a cold
/// temperature pushes training-mode values onto {0,1}.
pub fn relaxation_statistics(seed: u64) -> CheckReport {
    let p = 0.3f64;
    let beta_val = (p / (1.0 - p)).ln();
    let n = 100; // 100 draws of a 100-wide column = 10,000 samples
    let rounds = 100;
    let mask = vec![true; n];

    let mut rng = RunRng::new(seed, Stream::Generate);
    let mut ones = 0usize;
    for _ in 0..rounds {
        let mut tape = Tape::new();
        let beta = tape.leaf([n, 1], vec![beta_val; n], false);
        let w = rti_binarize(
            &mut tape, beta, &mask, BinarizeMode::Predict, 1.0,
            BinarizeNoise::Sample(&mut rng), WeightSource::Teacher,
        )
        .expect("predict binarize");
        // any valid row of G is the binarized column transposed
        ones += tape.values(w.g)[..n].iter().filter(|&&x| x == 1.0).count();
    }
    let total = (n * rounds) as f64;
    let mean = ones as f64 / total;
    let sigma = (p * (1.0 - p) / total).sqrt();
    let mean_ok = (mean - p).abs() <= 3.0 * sigma;

    let mut dist_sum = 0.0;
    for _ in 0..rounds {
        let mut tape = Tape::new();
        let beta = tape.leaf([n, 1], vec![beta_val; n], false);
        let w = rti_binarize(
            &mut tape, beta, &mask, BinarizeMode::Train, 0.01,
            BinarizeNoise::Sample(&mut rng), WeightSource::Teacher,
        )
        .expect("train binarize");
        dist_sum += tape.values(w.g)[..n]
            .iter()
            .map(|&x| x.min(1.0 - x))
            .sum::<f64>();
    }
    let mean_dist = dist_sum / total;
    let dist_ok = mean_dist < 0.05;

    CheckReport::new(
        "relaxation-statistics",
        mean_ok && dist_ok,
        format!(
            "prediction mean {mean:.4} vs rate {p} (3 sigma {:.4}); cold-temperature distance from binary {mean_dist:.4}",
            3.0 * sigma
        ),
    )
}

/// The full battery in a stable order.
pub fn run_all() -> Vec<CheckReport> {
    vec![
        op_gradient_check(1e-4, 1e-4),
        composite_gradient_check(20, 1e-4, 1e-4),
        weight_matrix_invariants(1000, 11),
        reduction_identity(5),
        relaxation_statistics(13),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_eigensolver_matches_hand_eigenvalues() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let min = min_eigenvalue_symmetric(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((min - 1.0).abs() < 1e-10);
        // diagonal matrix
        let min = min_eigenvalue_symmetric(&[5.0, 0.0, 0.0, -2.0], 2);
        assert!((min + 2.0).abs() < 1e-12);
        // rank-1 Gram vv^T with v=(1,2,3): eigenvalues {14, 0, 0}
        let v = [1.0, 2.0, 3.0];
        let mut g = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                g[i * 3 + j] = v[i] * v[j];
            }
        }
        let min = min_eigenvalue_symmetric(&g, 3);
        assert!(min.abs() < 1e-10, "got {min}");
    }

    #[test]
    fn op_sweep_passes() {
        let rep = op_gradient_check(1e-4, 1e-4);
        assert!(rep.passed, "{}", rep.line());
    }

    #[test]
    fn composite_sweep_passes_on_a_few_seeds() {
        // the full 20-seed battery runs in the integration gate
        let mut worst = 0.0f64;
        for variant in ALL_VARIANTS {
            for phase in [Phase::Teacher, Phase::Student] {
                worst = worst.max(composite_worst_rel_err(3, variant, phase, 1e-4, 4, 1e-4));
            }
        }
        assert!(worst < 1e-4, "max rel err {worst:.3e}");
    }

    #[test]
    fn invariant_sweep_passes_on_a_reduced_input_count() {
        let rep = weight_matrix_invariants(50, 7);
        assert!(rep.passed, "{}", rep.line());
    }

    #[test]
    fn reduction_identity_passes() {
        let rep = reduction_identity(2);
        assert!(rep.passed, "{}", rep.line());
    }

    #[test]
    fn relaxation_statistics_pass() {
        let rep = relaxation_statistics(5);
        assert!(rep.passed, "{}", rep.line());
    }

    #[test]
    fn report_line_formats_pass_and_fail() {
        let ok = CheckReport::new("demo", true, "fine".into());
        assert_eq!(ok.line(), "[pass] demo: fine");
        let bad = CheckReport::new("demo", false, "broken".into());
        assert_eq!(bad.line(), "[FAIL] demo: broken");
    }
}


