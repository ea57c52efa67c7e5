//! Objectives and the alternating freeze/train schedule. The teacher phase
//! trains the shared base parameters together with the response encoder;
//! the student phase freezes all of that and trains only the anticipation
//! layers against a likelihood term plus a distillation term that matches
//! the teacher's continuous weights.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::{ModelConfig, TrainConfig, WeightKind};
use crate::data::{batch, Batch, Sample};
use crate::decoder::forced_nll;
use crate::memory::{
    refine_memory, rpi_b, rti_beta, self_attention, teacher_weight_matrix, BinarizeMode,
    BinarizeNoise, Memory, ones_weight_matrix,
};
use crate::model::{encode_pair, encode_response, Bound, DropoutMode, ModelError, PairEncoding};
use crate::params::{CheckpointError, ParamStore, ParamTag};
use crate::rng::{RunRng, Stream};
use crate::student::{student_estimate, student_weight_matrix};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at {phase} step {step}; suspect tensors: {}", suspects.join(", "))]
    NonFinite {
        phase: &'static str,
        step: u64,
        suspects: Vec<String>,
    },
    #[error("loss diverged at {phase} step {step}: {loss} > threshold {threshold}; last good state saved to {saved}")]
    Diverged {
        phase: &'static str,
        step: u64,
        loss: f64,
        threshold: f64,
        saved: PathBuf,
    },
    #[error("loss {loss} exceeded the abort threshold {threshold}")]
    DivergenceDetected { loss: f64, threshold: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Named gradients pulled off a tape after backward, in stable name order.
#[derive(Debug, Default)]
pub struct GradBag {
    map: std::collections::BTreeMap<String, Vec<f64>>,
}

impl GradBag {
    pub fn new() -> GradBag {
        GradBag::default()
    }

    pub fn insert(&mut self, name: &str, grad: Vec<f64>) {
        self.map.insert(name.to_string(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Collect gradients of every bound parameter that received one.
    pub fn collect(tape: &Tape, bound: &Bound) -> GradBag {
        let mut bag = GradBag::new();
        for (name, &id) in bound.iter() {
            if let Some(g) = tape.grad(id) {
                bag.insert(name, g.to_vec());
            }
        }
        bag
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient so the global norm does not exceed `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.map.values_mut() {
                for x in g.iter_mut() {
                    *x *= s;
                }
            }
        }
    }

    /// Tensor names most likely responsible for a numeric blow-up: any with
    /// non-finite entries first, otherwise the largest by max |grad|.
    pub fn suspects(&self, top: usize) -> Vec<String> {
        let bad: Vec<String> = self
            .map
            .iter()
            .filter(|(_, g)| g.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.clone())
            .collect();
        if !bad.is_empty() {
            return bad;
        }
        let mut by_mag: Vec<(f64, &String)> = self
            .map
            .iter()
            .map(|(n, g)| (g.iter().fold(0.0f64, |a, x| a.max(x.abs())), n))
            .collect();
        by_mag.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        by_mag.into_iter().take(top).map(|(_, n)| n.clone()).collect()
    }
}

/// Adam with bias correction; the step counter belongs to one phase and
/// restarts with it, as do the moment buffers held in the store.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    /// Apply one update to every parameter with a gradient in the bag whose
    /// tag passes `active`. Gradients are consumed as-is; clip first.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &GradBag,
        active: impl Fn(ParamTag) -> bool,
    ) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            if !active(p.tag) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            debug_assert_eq!(g.len(), p.values.len(), "{name}: grad size");
            for i in 0..g.len() {
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g[i];
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                p.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Which loss to assemble. `Base` runs the plain memory; the others route
/// through the teacher's or the student's weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Base,
    Teacher,
    Student,
}

/// The assembled batch loss: a scalar node ready for backward plus the
/// already-read component values for logging.
pub struct BatchLoss {
    pub total: TensorId,
    pub mean_nll: f64,
    pub mean_mse: f64,
    pub steps: usize,
}

/// Build the configured objective for a whole batch on one tape.
///
/// `rng: Some` is training mode: dropout active and binarization noise
/// sampled. `rng: None` is deterministic mode: dropout off and, for binary
/// variants, the relaxation evaluated at zero noise. `force_ones` swaps in
/// an all-ones weight matrix (the reduction identity lever); the refinement
/// then reproduces the base memory bitwise.
pub fn batch_loss(
    tape: &mut Tape,
    bound: &Bound,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    batch: &Batch,
    objective: Objective,
    mut rng: Option<&mut RunRng>,
    force_ones: bool,
) -> Result<BatchLoss> {
    let n = batch.len();
    assert!(n > 0, "empty batch");
    let total_steps: usize = batch
        .resp
        .mask
        .iter()
        .map(|m| m.iter().filter(|&&x| x).count())
        .sum();
    let inv_steps = 1.0 / total_steps as f64;
    let variant = tcfg.variant;

    let mut total: Option<TensorId> = None;
    let mut nll_sum = 0.0;
    let mut mse_mean_sum = 0.0;

    for i in 0..n {
        let doc_mask = &batch.doc.mask[i];
        let pair = {
            let mut dm = match rng.as_deref_mut() {
                Some(r) => DropoutMode::Train(r, mcfg.dropout),
                None => DropoutMode::Off,
            };
            encode_pair(
                tape,
                bound,
                mcfg.embed,
                &batch.doc.ids[i],
                doc_mask,
                &batch.ctx.ids[i],
                &batch.ctx.mask[i],
                &mut dm,
            )?
        };

        let width = doc_mask.len();
        let zero_noise = vec![0.0; width * width];
        let mut sample_mse: Option<TensorId> = None;

        let memory: Memory = match (objective, force_ones) {
            (_, true) | (Objective::Base, _) => {
                if force_ones {
                    let g = ones_weight_matrix(tape, doc_mask)?;
                    refine_memory(tape, &pair.d, g)?
                } else {
                    self_attention(tape, &pair.d)?
                }
            }
            (Objective::Teacher, false) => {
                let resp = encode_response(tape, bound, &batch.resp.ids[i], &batch.resp.mask[i])?;
                let noise = match rng.as_deref_mut() {
                    Some(r) => BinarizeNoise::Sample(r),
                    None => BinarizeNoise::Frozen(noise_slice(&zero_noise, variant.kind, width)),
                };
                let w = teacher_weight_matrix(
                    tape, &pair.d, &resp, variant, BinarizeMode::Train, tcfg.tau, noise,
                )
                .map_err(ModelError::from)?;
                refine_memory(tape, &pair.d, w.g)?
            }
            (Objective::Student, false) => {
                let est = student_estimate(tape, &pair.d, &pair.ctx, variant.kind, &bound.student())?;
                if tcfg.lambda > 0.0 {
                    let target = distill_target(tape, bound, &pair, batch, i, variant.kind)?;
                    debug_assert!(
                        !tape.requires_grad(target),
                        "distillation target must be constant"
                    );
                    let diff = tape.sub(est, target)?;
                    let sq = tape.mul(diff, diff)?;
                    let sum = tape.sum_all(sq);
                    let valid = doc_mask.iter().filter(|&&m| m).count();
                    let count = match variant.kind {
                        WeightKind::TokenImportance => valid,
                        WeightKind::PairwiseImportance => valid * valid,
                    };
                    sample_mse = Some(tape.scale(sum, 1.0 / count as f64));
                }
                let noise = match rng.as_deref_mut() {
                    Some(r) => BinarizeNoise::Sample(r),
                    None => BinarizeNoise::Frozen(noise_slice(&zero_noise, variant.kind, width)),
                };
                let w = student_weight_matrix(
                    tape, est, variant, doc_mask, BinarizeMode::Train, tcfg.tau, noise,
                )
                .map_err(ModelError::from)?;
                refine_memory(tape, &pair.d, w.g)?
            }
        };

        let dec = forced_nll(
            tape,
            bound.table(),
            &pair.ctx,
            memory.m,
            doc_mask,
            &batch.resp,
            i,
            &bound.decoder(),
        )?;
        nll_sum += tape.value_scalar(dec.nll);
        let mut term = tape.scale(dec.nll, inv_steps);
        if let Some(mse) = sample_mse {
            mse_mean_sum += tape.value_scalar(mse);
            let weighted = tape.scale(mse, tcfg.lambda / n as f64);
            term = tape.add(term, weighted)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }

    Ok(BatchLoss {
        total: total.expect("nonempty batch"),
        mean_nll: nll_sum * inv_steps,
        mean_mse: mse_mean_sum / n as f64,
        steps: total_steps,
    })
}

fn noise_slice(zeros: &[f64], kind: WeightKind, width: usize) -> &[f64] {
    match kind {
        WeightKind::TokenImportance => &zeros[..width],
        WeightKind::PairwiseImportance => &zeros[..width * width],
    }
}

/// The teacher's continuous weights for sample `i`, used as the student's
/// regression target. In the student phase all inputs are frozen leaves, so
/// the result carries no gradient by construction.
fn distill_target(
    tape: &mut Tape,
    bound: &Bound,
    pair: &PairEncoding,
    batch: &Batch,
    i: usize,
    kind: WeightKind,
) -> Result<TensorId> {
    let resp = encode_response(tape, bound, &batch.resp.ids[i], &batch.resp.mask[i])?;
    let t = match kind {
        WeightKind::TokenImportance => rti_beta(tape, &pair.d, resp.final_state)?,
        WeightKind::PairwiseImportance => rpi_b(tape, &pair.d, &resp)?,
    };
    Ok(t)
}

/// A training phase: which tags move and which objective is optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Teacher,
    Student,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Student => "student",
        }
    }

    pub fn active(self, tag: ParamTag) -> bool {
        match self {
            Phase::Teacher => tag != ParamTag::Student,
            Phase::Student => tag == ParamTag::Student,
        }
    }

    fn objective(self) -> Objective {
        match self {
            Phase::Teacher => Objective::Teacher,
            Phase::Student => Objective::Student,
        }
    }
}

/// Loss/MSE pair from one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    pub mse: f64,
    pub grad_norm: f64,
}

/// One optimizer step for a phase: forward, backward, clip, Adam update on
/// the phase's tags. A non-finite loss or one above `abort_above` returns an
/// error before any update, leaving the store at its last good state.
#[allow(clippy::too_many_arguments)]
pub fn phase_step(
    store: &mut ParamStore,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    phase: Phase,
    b: &Batch,
    adam: &mut Adam,
    rng: &mut RunRng,
    abort_above: f64,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store, |t| phase.active(t));
    let out = batch_loss(&mut tape, &bound, mcfg, tcfg, b, phase.objective(), Some(rng), false)?;
    let loss = tape.value_scalar(out.total);
    if !loss.is_finite() {
        tape.backward(out.total)?;
        let grads = GradBag::collect(&tape, &bound);
        return Err(TrainError::NonFinite {
            phase: phase.label(),
            step: 0,
            suspects: grads.suspects(3),
        });
    }
    if loss > abort_above {
        return Err(TrainError::DivergenceDetected { loss, threshold: abort_above });
    }
    tape.backward(out.total)?;
    let mut grads = GradBag::collect(&tape, &bound);
    let norm = grads.global_norm();
    grads.clip(tcfg.clip_norm);
    adam.update(store, &grads, |t| phase.active(t));
    Ok(StepStats { loss, nll: out.mean_nll, mse: out.mean_mse, grad_norm: norm })
}

/// Deterministic loss of an objective over a sample set, dropout off and
/// binarization noise zeroed; used for validation and the reduction checks.
pub fn evaluate_loss(
    store: &ParamStore,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    samples: &[Sample],
    objective: Objective,
    force_ones: bool,
) -> Result<f64> {
    assert!(!samples.is_empty(), "empty evaluation set");
    let mut nll_sum = 0.0;
    let mut steps = 0usize;
    let mut mse_sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(tcfg.batch.max(1)) {
        let b = batch(chunk);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, store, |_| false);
        let out = batch_loss(&mut tape, &bound, mcfg, tcfg, &b, objective, None, force_ones)?;
        nll_sum += out.mean_nll * out.steps as f64;
        steps += out.steps;
        mse_sum += out.mean_mse * chunk.len() as f64;
        count += chunk.len();
    }
    let mut loss = nll_sum / steps as f64;
    if objective == Objective::Student && tcfg.lambda > 0.0 {
        loss += tcfg.lambda * mse_sum / count as f64;
    }
    Ok(loss)
}

/// What one phase did, for transcripts and tests.
#[derive(Debug, Clone)]
pub struct PhaseSummary {
    pub phase: &'static str,
    pub round: usize,
    pub steps: u64,
    pub final_val: f64,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub phases: Vec<PhaseSummary>,
    pub final_checkpoint: PathBuf,
}

struct LogSink {
    out: BufWriter<File>,
}

impl LogSink {
    fn create(path: &Path) -> Result<LogSink> {
        Ok(LogSink { out: BufWriter::new(File::create(path)?) })
    }

    fn line(
        &mut self,
        phase: &str,
        step: u64,
        loss: f64,
        mse: Option<f64>,
        val_loss: Option<f64>,
    ) -> Result<()> {
        let rec = json!({
            "phase": phase,
            "step": step,
            "loss": loss,
            "mse": mse,
            "val_loss": val_loss,
        });
        writeln!(self.out, "{rec}")?;
        self.out.flush()?;
        Ok(())
    }
}

struct PhaseDriver<'a> {
    store: &'a mut ParamStore,
    mcfg: &'a ModelConfig,
    tcfg: &'a TrainConfig,
    train: &'a [Sample],
    valid: &'a [Sample],
    rng: &'a mut RunRng,
    log: &'a mut LogSink,
    out_dir: &'a Path,
    global_step: &'a mut u64,
}

impl PhaseDriver<'_> {
    /// Run one phase to convergence or the epoch cap. Moments and the Adam
    /// clock reset on entry because the active tensors were frozen before.
    fn run(&mut self, phase: Phase, round: usize) -> Result<PhaseSummary> {
        self.store.reset_moments(|tag| phase.active(tag));
        let mut adam = Adam::new(self.tcfg.lr);
        let mut initial: Option<f64> = None;
        let mut best_val = f64::INFINITY;
        let mut bad_checks = 0usize;
        let mut stopped_early = false;
        let mut steps_here = 0u64;
        let mut last_val = f64::NAN;

        'phase: for _epoch in 0..self.tcfg.epochs {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            self.rng.shuffle(&mut order);
            for chunk in order.chunks(self.tcfg.batch.max(1)) {
                let sel: Vec<Sample> = chunk.iter().map(|&i| self.train[i].clone()).collect();
                let b = batch(&sel);
                // Divergence means runaway growth, not a transient: a phase
                // that starts near zero loss still tolerates O(1) wobble
                // right after the moment reset, hence the absolute floor.
                let abort_above = match initial {
                    Some(first) => 10.0 * first.max(1.0),
                    None => f64::INFINITY,
                };
                let stats = match phase_step(
                    self.store, self.mcfg, self.tcfg, phase, &b, &mut adam, self.rng, abort_above,
                ) {
                    Ok(s) => s,
                    Err(TrainError::NonFinite { phase, suspects, .. }) => {
                        return Err(TrainError::NonFinite {
                            phase,
                            step: *self.global_step + 1,
                            suspects,
                        });
                    }
                    Err(TrainError::DivergenceDetected { loss, threshold }) => {
                        // store untouched by the failed step: save it as-is
                        let saved = self.out_dir.join("last_good.ckpt");
                        self.store.save(&saved)?;
                        return Err(TrainError::Diverged {
                            phase: phase.label(),
                            step: *self.global_step + 1,
                            loss,
                            threshold,
                            saved,
                        });
                    }
                    Err(other) => return Err(other),
                };
                *self.global_step += 1;
                steps_here += 1;
                initial.get_or_insert(stats.loss);
                let mut val_entry = None;
                if steps_here % self.tcfg.val_every as u64 == 0 {
                    let val = evaluate_loss(
                        self.store, self.mcfg, self.tcfg, self.valid, phase.objective(), false,
                    )?;
                    last_val = val;
                    val_entry = Some(val);
                    if val + 1e-12 < best_val {
                        best_val = val;
                        bad_checks = 0;
                    } else {
                        bad_checks += 1;
                    }
                }
                let mse_entry = (phase == Phase::Student).then_some(stats.mse);
                self.log.line(phase.label(), *self.global_step, stats.loss, mse_entry, val_entry)?;
                if bad_checks >= self.tcfg.patience {
                    stopped_early = true;
                    break 'phase;
                }
            }
        }

        if last_val.is_nan() {
            last_val = evaluate_loss(
                self.store, self.mcfg, self.tcfg, self.valid, phase.objective(), false,
            )?;
        }
        let checkpoint = self
            .out_dir
            .join(format!("round{round}_{}.ckpt", phase.label()));
        self.store.save(&checkpoint)?;
        Ok(PhaseSummary {
            phase: phase.label(),
            round,
            steps: steps_here,
            final_val: last_val,
            stopped_early,
            checkpoint,
        })
    }
}

/// Alternate teacher and student phases for the configured number of
/// rounds, checkpointing after each phase. Artifacts land in `out_dir`:
/// `train_log.jsonl`, per-phase checkpoints, and a final `model.ckpt`.
pub fn alternate(
    store: &mut ParamStore,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[Sample],
    valid: &[Sample],
    out_dir: &Path,
    seed: u64,
) -> Result<Transcript> {
    run_schedule(store, mcfg, tcfg, train, valid, out_dir, seed, None)
}

/// Run a single phase instead of the full alternation (the teacher-only and
/// student-only entry points).
pub fn train_single_phase(
    store: &mut ParamStore,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    phase: Phase,
    train: &[Sample],
    valid: &[Sample],
    out_dir: &Path,
    seed: u64,
) -> Result<Transcript> {
    run_schedule(store, mcfg, tcfg, train, valid, out_dir, seed, Some(phase))
}

#[allow(clippy::too_many_arguments)]
fn run_schedule(
    store: &mut ParamStore,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[Sample],
    valid: &[Sample],
    out_dir: &Path,
    seed: u64,
    only: Option<Phase>,
) -> Result<Transcript> {
    std::fs::create_dir_all(out_dir)?;
    let mut log = LogSink::create(&out_dir.join("train_log.jsonl"))?;
    let mut rng = RunRng::new(seed, Stream::Train);
    let mut global_step = 0u64;
    let mut transcript = Transcript::default();

    let schedule: Vec<(Phase, usize)> = match only {
        Some(p) => vec![(p, 1)],
        None => (1..=tcfg.rounds)
            .flat_map(|r| [(Phase::Teacher, r), (Phase::Student, r)])
            .collect(),
    };
    for (phase, round) in schedule {
        let mut driver = PhaseDriver {
            store,
            mcfg,
            tcfg,
            train,
            valid,
            rng: &mut rng,
            log: &mut log,
            out_dir,
            global_step: &mut global_step,
        };
        let summary = driver.run(phase, round)?;
        transcript.phases.push(summary);
    }
    let final_path = out_dir.join("model.ckpt");
    store.save(&final_path)?;
    transcript.final_checkpoint = final_path;
    Ok(transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::model::register_params;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed: 4,
            hidden: 3,
            k: 4,
            dropout: 0.0,
            max_doc: 6,
            max_ctx: 3,
            max_resp: 4,
            vocab_cap: 12,
        }
    }

    fn tiny_tcfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            lr: 5e-4,
            batch: 5,
            lambda: 1.0,
            tau: 1.0,
            variant,
            epochs: 1,
            patience: 3,
            clip_norm: 5.0,
            val_every: 1000,
            rounds: 1,
        }
    }

    fn rti() -> Variant {
        Variant { kind: WeightKind::TokenImportance, binary: false }
    }

    fn tiny_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = RunRng::new(seed, Stream::Init);
        register_params(&mut store, &tiny_cfg(), 12, &mut rng);
        store
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<Sample> {
        // responses correlate with one planted document token so the
        // objective has something learnable
        let mut rng = RunRng::new(seed, Stream::Data);
        (0..n)
            .map(|_| {
                let kw = 4 + rng.below(4) as u32; // ids 4..8
                let other = 8 + rng.below(3) as u32; // ids 8..11
                Sample {
                    document: vec![kw, other, 11, other],
                    context: vec![11, other],
                    response: vec![kw, 3],
                }
            })
            .collect()
    }

    #[test]
    fn adam_first_step_magnitude_matches_lr() {
        let mut store = ParamStore::new();
        store.insert("p", ParamTag::Base, vec![1], vec![1.0]);
        let mut adam = Adam::new(5e-4);
        let mut bag = GradBag::new();
        bag.insert("p", vec![1.0]);
        adam.update(&mut store, &bag, |_| true);
        let moved = 1.0 - store.get("p").values[0];
        assert!((moved - 5e-4).abs() < 5e-4 * 1e-6, "step {moved}");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_bitwise() {
        let mut store = tiny_store(1);
        let before = store.to_bytes();
        let mut adam = Adam::new(1e-2);
        let mut bag = GradBag::new();
        for name in store.names_with_tag(ParamTag::Base) {
            let len = store.get(&name).values.len();
            bag.insert(&name, vec![0.0; len]);
        }
        adam.update(&mut store, &bag, |_| true);
        assert_eq!(store.to_bytes(), before);
    }

    #[test]
    fn clip_rescales_norm_fifty_to_five() {
        let mut bag = GradBag::new();
        bag.insert("a", vec![30.0]);
        bag.insert("b", vec![40.0]);
        assert!((bag.global_norm() - 50.0).abs() < 1e-12);
        bag.clip(5.0);
        assert!((bag.get("a").unwrap()[0] - 3.0).abs() < 1e-12);
        assert!((bag.get("b").unwrap()[0] - 4.0).abs() < 1e-12);
        assert!((bag.global_norm() - 5.0).abs() < 1e-12);
        // already-small gradients are untouched
        let mut small = GradBag::new();
        small.insert("a", vec![0.3, 0.4]);
        small.clip(5.0);
        assert_eq!(small.get("a").unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn teacher_steps_reduce_loss_on_a_toy_set() {
        let mut store = tiny_store(3);
        let mcfg = tiny_cfg();
        let tcfg = tiny_tcfg(rti());
        let samples = toy_samples(20, 9);
        let b = batch(&samples);
        let mut adam = Adam::new(tcfg.lr);
        let mut rng = RunRng::new(4, Stream::Train);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let stats =
                phase_step(&mut store, &mcfg, &tcfg, Phase::Teacher, &b, &mut adam, &mut rng, f64::INFINITY)
                    .unwrap();
            first.get_or_insert(stats.loss);
            last = stats.loss;
        }
        let first = first.unwrap();
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn teacher_step_freezes_student_parameters() {
        let mut store = tiny_store(5);
        let mcfg = tiny_cfg();
        let tcfg = tiny_tcfg(rti());
        let samples = toy_samples(6, 2);
        let b = batch(&samples);
        let student_before: Vec<(String, Vec<u64>)> = store
            .names_with_tag(ParamTag::Student)
            .into_iter()
            .map(|n| {
                let bits = store.get(&n).values.iter().map(|v| v.to_bits()).collect();
                (n, bits)
            })
            .collect();
        let embed_before: Vec<u64> =
            store.get("embed.table").values.iter().map(|v| v.to_bits()).collect();
        let mut adam = Adam::new(tcfg.lr);
        let mut rng = RunRng::new(1, Stream::Train);
        phase_step(&mut store, &mcfg, &tcfg, Phase::Teacher, &b, &mut adam, &mut rng, f64::INFINITY).unwrap();
        for (name, bits) in &student_before {
            let now: Vec<u64> = store.get(name).values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, bits, "{name} moved in the teacher phase");
        }
        let embed_now: Vec<u64> =
            store.get("embed.table").values.iter().map(|v| v.to_bits()).collect();
        assert_ne!(embed_now, embed_before, "base parameters should move");
    }

    #[test]
    fn student_step_freezes_base_and_teacher_parameters() {
        let mut store = tiny_store(6);
        let mcfg = tiny_cfg();
        let tcfg = tiny_tcfg(rti());
        let samples = toy_samples(6, 7);
        let b = batch(&samples);
        let frozen: Vec<String> = store
            .names_with_tag(ParamTag::Base)
            .into_iter()
            .chain(store.names_with_tag(ParamTag::Teacher))
            .collect();
        let before: Vec<Vec<u64>> = frozen
            .iter()
            .map(|n| store.get(n).values.iter().map(|v| v.to_bits()).collect())
            .collect();
        let student_before: Vec<u64> =
            store.get("student.w").values.iter().map(|v| v.to_bits()).collect();
        let mut adam = Adam::new(tcfg.lr);
        let mut rng = RunRng::new(1, Stream::Train);
        let stats =
            phase_step(&mut store, &mcfg, &tcfg, Phase::Student, &b, &mut adam, &mut rng, f64::INFINITY).unwrap();
        assert!(stats.mse > 0.0, "distillation term should be live");
        for (n, b0) in frozen.iter().zip(&before) {
            let now: Vec<u64> = store.get(n).values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, b0, "{n} moved in the student phase");
        }
        let student_now: Vec<u64> =
            store.get("student.w").values.iter().map(|v| v.to_bits()).collect();
        assert_ne!(student_now, student_before);
    }

    #[test]
    fn student_gradients_touch_only_student_tensors() {
        let store = tiny_store(8);
        let mcfg = tiny_cfg();
        let tcfg = tiny_tcfg(rti());
        let samples = toy_samples(4, 3);
        let b = batch(&samples);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, |t| Phase::Student.active(t));
        let mut rng = RunRng::new(2, Stream::Train);
        let out = batch_loss(
            &mut tape, &bound, &mcfg, &tcfg, &b, Objective::Student, Some(&mut rng), false,
        )
        .unwrap();
        tape.backward(out.total).unwrap();
        let grads = GradBag::collect(&tape, &bound);
        let got: Vec<&str> = grads.names().map(|s| s.as_str()).collect();
        // the token-importance path exercises every student tensor except
        // the pairwise head
        assert_eq!(
            got,
            [
                "student.mlp.b1",
                "student.mlp.b2",
                "student.mlp.w1",
                "student.mlp.w2",
                "student.w",
            ]
        );
    }

    #[test]
    fn distillation_target_is_insensitive_to_student_parameters() {
        let mcfg = tiny_cfg();
        let samples = toy_samples(3, 5);
        let b = batch(&samples);
        let target_values = |store: &ParamStore| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, store, |t| Phase::Student.active(t));
            let mut dm = DropoutMode::Off;
            let pair = encode_pair(
                &mut tape, &bound, mcfg.embed,
                &b.doc.ids[0], &b.doc.mask[0],
                &b.ctx.ids[0], &b.ctx.mask[0],
                &mut dm,
            )
            .unwrap();
            let t = distill_target(&mut tape, &bound, &pair, &b, 0, WeightKind::TokenImportance)
                .unwrap();
            tape.values(t).to_vec()
        };
        let mut store = tiny_store(9);
        let base = target_values(&store);
        for name in store.names_with_tag(ParamTag::Student) {
            for v in &mut store.get_mut(&name).values {
                *v += 7.5;
            }
        }
        let perturbed = target_values(&store);
        assert_eq!(base, perturbed);
    }

    #[test]
    fn all_ones_override_and_lambda_zero_reduce_to_the_base_loss() {
        let store = tiny_store(12);
        let mcfg = tiny_cfg();
        let mut tcfg = tiny_tcfg(rti());
        tcfg.lambda = 0.0;
        let samples = toy_samples(5, 11);
        let run = |objective: Objective, force_ones: bool| -> u64 {
            evaluate_loss(&store, &mcfg, &tcfg, &samples, objective, force_ones)
                .unwrap()
                .to_bits()
        };
        let base = run(Objective::Base, false);
        assert_eq!(base, run(Objective::Teacher, true));
        assert_eq!(base, run(Objective::Student, true));
        assert_eq!(base, run(Objective::Base, true));
    }

    #[test]
    fn huge_lambda_drives_mse_down() {
        let mut store = tiny_store(13);
        let mcfg = tiny_cfg();
        let mut tcfg = tiny_tcfg(rti());
        tcfg.lambda = 1e6;
        tcfg.lr = 1e-3;
        let samples = toy_samples(10, 17);
        let b = batch(&samples);
        let mut adam = Adam::new(tcfg.lr);
        let mut rng = RunRng::new(3, Stream::Train);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            let stats =
                phase_step(&mut store, &mcfg, &tcfg, Phase::Student, &b, &mut adam, &mut rng, f64::INFINITY)
                    .unwrap();
            first.get_or_insert(stats.mse);
            last = stats.mse;
        }
        let first = first.unwrap();
        assert!(last < 0.5 * first, "mse went {first} -> {last}");
    }

    #[test]
    fn nan_parameters_abort_with_suspects() {
        let mut store = tiny_store(14);
        store.get_mut("dec.out.w").values[0] = f64::NAN;
        let mcfg = tiny_cfg();
        let tcfg = tiny_tcfg(rti());
        let samples = toy_samples(3, 1);
        let b = batch(&samples);
        let mut adam = Adam::new(tcfg.lr);
        let mut rng = RunRng::new(1, Stream::Train);
        let err = phase_step(&mut store, &mcfg, &tcfg, Phase::Teacher, &b, &mut adam, &mut rng, f64::INFINITY)
            .unwrap_err();
        match err {
            TrainError::NonFinite { suspects, .. } => {
                assert!(!suspects.is_empty());
            }
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn divergence_aborts_and_saves_last_good_state() {
        let mut store = tiny_store(15);
        let mcfg = tiny_cfg();
        let mut tcfg = tiny_tcfg(rti());
        tcfg.lr = 50.0; // absurd on purpose
        tcfg.epochs = 20;
        let samples = toy_samples(8, 21);
        let dir = tempfile::tempdir().unwrap();
        let err = train_single_phase(
            &mut store, &mcfg, &tcfg, Phase::Teacher, &samples, &samples, dir.path(), 1,
        )
        .unwrap_err();
        match err {
            TrainError::Diverged { saved, .. } => {
                assert!(saved.exists(), "last-good checkpoint missing");
                ParamStore::load(&saved).unwrap();
            }
            other => panic!("expected Diverged, got {other}"),
        }
    }

    #[test]
    fn alternate_produces_interleaved_phases_and_artifacts() {
        let mut store = tiny_store(16);
        let mcfg = tiny_cfg();
        let mut tcfg = tiny_tcfg(rti());
        tcfg.rounds = 2;
        tcfg.epochs = 1;
        tcfg.batch = 4;
        let train = toy_samples(8, 31);
        let valid = toy_samples(4, 32);
        let dir = tempfile::tempdir().unwrap();
        let t = alternate(&mut store, &mcfg, &tcfg, &train, &valid, dir.path(), 5).unwrap();
        let labels: Vec<&str> = t.phases.iter().map(|p| p.phase).collect();
        assert_eq!(labels, ["teacher", "student", "teacher", "student"]);
        assert_eq!(t.phases.iter().map(|p| p.round).collect::<Vec<_>>(), [1, 1, 2, 2]);
        for p in &t.phases {
            assert!(p.checkpoint.exists());
        }
        assert!(t.final_checkpoint.exists());
        let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let mut saw_teacher = false;
        let mut saw_student = false;
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["phase", "step", "loss", "mse", "val_loss"] {
                assert!(v.get(key).is_some(), "missing {key}");
            }
            match v["phase"].as_str().unwrap() {
                "teacher" => saw_teacher = true,
                "student" => saw_student = true,
                other => panic!("unknown phase {other}"),
            }
        }
        assert!(saw_teacher && saw_student);
    }

    #[test]
    fn identical_seeds_reproduce_checkpoints_bit_for_bit() {
        let mcfg = tiny_cfg();
        let mut tcfg = tiny_tcfg(rti());
        tcfg.epochs = 1;
        tcfg.batch = 4;
        let train = toy_samples(8, 41);
        let valid = toy_samples(4, 42);
        let run = |dir: &Path| -> Vec<u8> {
            let mut store = tiny_store(99);
            alternate(&mut store, &mcfg, &tcfg, &train, &valid, dir, 77).unwrap();
            std::fs::read(dir.join("model.ckpt")).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(d1.path()), run(d2.path()));
    }

    #[test]
    fn early_stopping_halts_a_stagnant_phase() {
        let mut store = tiny_store(17);
        let mcfg = tiny_cfg();
        let mut tcfg = tiny_tcfg(rti());
        tcfg.lr = 0.0; // nothing can improve
        tcfg.epochs = 50;
        tcfg.val_every = 1;
        tcfg.patience = 2;
        let train = toy_samples(8, 51);
        let valid = toy_samples(4, 52);
        let dir = tempfile::tempdir().unwrap();
        let t = train_single_phase(
            &mut store, &mcfg, &tcfg, Phase::Teacher, &train, &valid, dir.path(), 3,
        )
        .unwrap();
        assert!(t.phases[0].stopped_early);
        // first check sets the best; the next `patience` checks stagnate
        assert_eq!(t.phases[0].steps, 1 + tcfg.patience as u64);
    }
}
