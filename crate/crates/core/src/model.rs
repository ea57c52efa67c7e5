//! Wires the pieces into one model: a named parameter registry with
//! ownership tags, tape binding with per-phase trainability, and the shared
//! encode paths every objective starts from.
//!
//! Parameter ownership:
//!   base (φ)      embeddings, document/context encoders, the cross-attention
//!                 fusion, and the whole decoder
//!   teacher (θ_t) the response encoder, which exists only to build the
//!                 reweighting matrix
//!   student (θ_s) the bilinear attention, the β̂ MLP, and the B̂ form

use crate::config::{ModelConfig, Variant};
use crate::data::Batch;
use crate::decoder::{self, DecoderWeights};
use crate::encoders::{context_cross_attention, encode, BiLstmParams, EncodeError, EncodedSeq};
use crate::memory::{
    refine_memory, self_attention, teacher_weight_matrix, BinarizeError, BinarizeMode,
    BinarizeNoise, Memory,
};
use crate::params::{ParamStore, ParamTag};
use crate::rng::RunRng;
use crate::student::{student_estimate, student_usable_g, StudentWeights};
use crate::tensor::{GruParams, LstmParams, Tape, TensorError, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Binarize(#[from] BinarizeError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn uniform_matrix(rng: &mut RunRng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect()
}

fn add_matrix(
    store: &mut ParamStore,
    rng: &mut RunRng,
    name: &str,
    rows: usize,
    cols: usize,
    tag: ParamTag,
) {
    let values = uniform_matrix(rng, rows, cols);
    store.insert(name, tag, vec![rows, cols], values);
}

fn add_bias(store: &mut ParamStore, name: &str, cols: usize, tag: ParamTag) {
    store.insert(name, tag, vec![cols], vec![0.0; cols]);
}

fn add_bilstm(
    store: &mut ParamStore,
    rng: &mut RunRng,
    prefix: &str,
    input: usize,
    hidden: usize,
    out: usize,
    tag: ParamTag,
) {
    for dir in ["fwd", "bwd"] {
        add_matrix(store, rng, &format!("{prefix}.{dir}.w_ih"), input, 4 * hidden, tag);
        add_matrix(store, rng, &format!("{prefix}.{dir}.w_hh"), hidden, 4 * hidden, tag);
        add_bias(store, &format!("{prefix}.{dir}.b"), 4 * hidden, tag);
    }
    add_matrix(store, rng, &format!("{prefix}.proj.w"), 2 * hidden, out, tag);
    add_bias(store, &format!("{prefix}.proj.b"), out, tag);
}

fn copy_bilstm(store: &mut ParamStore, from: &str, to: &str, tag: ParamTag) {
    let leaves = ["fwd.w_ih", "fwd.w_hh", "fwd.b", "bwd.w_ih", "bwd.w_hh", "bwd.b", "proj.w", "proj.b"];
    for leaf in leaves {
        let src = store.get(&format!("{from}.{leaf}"));
        let (shape, values) = (src.shape.clone(), src.values.clone());
        store.insert(&format!("{to}.{leaf}"), tag, shape, values);
    }
}

/// Create every model parameter in a fixed order so a given seed always
/// produces the same initialization. Weights draw from U(-a, a) with
/// a = 1/sqrt(fan_in); biases start at zero; the PAD embedding row is zero
/// and stays zero (the lookup never routes gradient into it).
///
/// The three sequence encoders start from one shared draw. Identical token
/// runs then map to identical vectors, so every similarity taken between two
/// encoder outputs begins life as a soft lexical matcher instead of having
/// to discover token alignment from scratch; the copies diverge freely once
/// training starts.
pub fn register_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    vocab_size: usize,
    rng: &mut RunRng,
) {
    let e = cfg.embed;
    let h = cfg.hidden;
    let k = cfg.k;
    let v = vocab_size;

    let mut table = uniform_matrix(rng, v, e);
    for x in &mut table[..e] {
        *x = 0.0;
    }
    store.insert("embed.table", ParamTag::Base, vec![v, e], table);

    add_bilstm(store, rng, "enc_doc", e, h, k, ParamTag::Base);
    copy_bilstm(store, "enc_doc", "enc_ctx", ParamTag::Base);
    copy_bilstm(store, "enc_doc", "enc_resp", ParamTag::Teacher);

    add_matrix(store, rng, "cross.w", 2 * k, k, ParamTag::Base);
    add_bias(store, "cross.b", k, ParamTag::Base);

    add_matrix(store, rng, "dec.init.w", k, k, ParamTag::Base);
    add_bias(store, "dec.init.b", k, ParamTag::Base);
    add_matrix(store, rng, "dec.gru.w_ih", e, 3 * k, ParamTag::Base);
    add_matrix(store, rng, "dec.gru.w_hh", k, 3 * k, ParamTag::Base);
    add_bias(store, "dec.gru.b", 3 * k, ParamTag::Base);
    add_matrix(store, rng, "dec.w1", 2 * k, k, ParamTag::Base);
    add_matrix(store, rng, "dec.out.w", k, v, ParamTag::Base);
    add_bias(store, "dec.out.b", v, ParamTag::Base);

    add_matrix(store, rng, "student.w", k, k, ParamTag::Student);
    add_matrix(store, rng, "student.mlp.w1", k, k, ParamTag::Student);
    add_bias(store, "student.mlp.b1", k, ParamTag::Student);
    add_matrix(store, rng, "student.mlp.w2", k, 1, ParamTag::Student);
    add_bias(store, "student.mlp.b2", 1, ParamTag::Student);
    add_matrix(store, rng, "student.w_a", k, k, ParamTag::Student);
}

/// Every parameter bound onto one tape. Leaves carry `requires_grad` only
/// when their tag is in the trainable set for the current phase.
pub struct Bound {
    ids: std::collections::BTreeMap<String, TensorId>,
}

impl Bound {
    pub fn new(tape: &mut Tape, store: &ParamStore, trainable: impl Fn(ParamTag) -> bool) -> Bound {
        let mut ids = std::collections::BTreeMap::new();
        for (name, p) in store.iter() {
            let id = tape.leaf_labeled(p.matrix_shape(), p.values.clone(), trainable(p.tag), name);
            ids.insert(name.clone(), id);
        }
        Bound { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }

    pub fn table(&self) -> TensorId {
        self.id("embed.table")
    }

    fn bilstm(&self, prefix: &str) -> BiLstmParams {
        BiLstmParams {
            fwd: LstmParams {
                w_ih: self.id(&format!("{prefix}.fwd.w_ih")),
                w_hh: self.id(&format!("{prefix}.fwd.w_hh")),
                b: self.id(&format!("{prefix}.fwd.b")),
            },
            bwd: LstmParams {
                w_ih: self.id(&format!("{prefix}.bwd.w_ih")),
                w_hh: self.id(&format!("{prefix}.bwd.w_hh")),
                b: self.id(&format!("{prefix}.bwd.b")),
            },
            proj_w: self.id(&format!("{prefix}.proj.w")),
            proj_b: self.id(&format!("{prefix}.proj.b")),
        }
    }

    pub fn doc_encoder(&self) -> BiLstmParams {
        self.bilstm("enc_doc")
    }

    pub fn ctx_encoder(&self) -> BiLstmParams {
        self.bilstm("enc_ctx")
    }

    pub fn resp_encoder(&self) -> BiLstmParams {
        self.bilstm("enc_resp")
    }

    pub fn cross(&self) -> (TensorId, TensorId) {
        (self.id("cross.w"), self.id("cross.b"))
    }

    pub fn decoder(&self) -> DecoderWeights {
        DecoderWeights {
            init_w: self.id("dec.init.w"),
            init_b: self.id("dec.init.b"),
            gru: GruParams {
                w_ih: self.id("dec.gru.w_ih"),
                w_hh: self.id("dec.gru.w_hh"),
                b: self.id("dec.gru.b"),
            },
            w1: self.id("dec.w1"),
            out_w: self.id("dec.out.w"),
            out_b: self.id("dec.out.b"),
        }
    }

    pub fn student(&self) -> StudentWeights {
        StudentWeights {
            w: self.id("student.w"),
            mlp_w1: self.id("student.mlp.w1"),
            mlp_b1: self.id("student.mlp.b1"),
            mlp_w2: self.id("student.mlp.w2"),
            mlp_b2: self.id("student.mlp.b2"),
            w_a: self.id("student.w_a"),
        }
    }
}

/// Dropout control for one forward pass. Training draws fresh inverted
/// masks from the run's RNG; evaluation applies none.
pub enum DropoutMode<'a> {
    Off,
    Train(&'a mut RunRng, f64),
}

impl DropoutMode<'_> {
    fn draw(&mut self, len: usize) -> Option<Vec<f64>> {
        match self {
            DropoutMode::Off => None,
            DropoutMode::Train(rng, p) => {
                if *p == 0.0 {
                    None
                } else {
                    Some(rng.dropout_mask(len, *p))
                }
            }
        }
    }
}

/// The context-aware document rows plus the encoded context, the starting
/// point of every objective.
pub struct PairEncoding {
    pub d: EncodedSeq,
    pub ctx: EncodedSeq,
}

/// Encode document and context and fuse them. Dropout masks, when active,
/// are drawn document-first so a fixed RNG state yields a fixed pass.
pub fn encode_pair(
    tape: &mut Tape,
    bound: &Bound,
    embed_dim: usize,
    doc_ids: &[u32],
    doc_mask: &[bool],
    ctx_ids: &[u32],
    ctx_mask: &[bool],
    dropout: &mut DropoutMode,
) -> Result<PairEncoding> {
    let table = bound.table();
    let doc_drop = dropout.draw(doc_ids.len() * embed_dim);
    let doc_enc = encode(tape, table, doc_ids, doc_mask, &bound.doc_encoder(), doc_drop.as_deref())?;
    let ctx_drop = dropout.draw(ctx_ids.len() * embed_dim);
    let ctx = encode(tape, table, ctx_ids, ctx_mask, &bound.ctx_encoder(), ctx_drop.as_deref())?;
    let (cw, cb) = bound.cross();
    let d = context_cross_attention(tape, &doc_enc, &ctx, cw, cb)?;
    Ok(PairEncoding { d, ctx })
}

/// Encode a response with the teacher's encoder. The reweighting target
/// should be deterministic given the document, so no dropout is offered.
pub fn encode_response(
    tape: &mut Tape,
    bound: &Bound,
    resp_ids: &[u32],
    resp_mask: &[bool],
) -> Result<EncodedSeq> {
    Ok(encode(tape, bound.table(), resp_ids, resp_mask, &bound.resp_encoder(), None)?)
}

/// Which memory the decoder reads at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryPolicy {
    /// Plain self-attention memory, no reweighting.
    Base,
    /// Teacher weights built from the reference response (privileged).
    Teacher,
    /// Student weights anticipated from document and context alone.
    Student,
}

impl MemoryPolicy {
    pub fn parse(s: &str) -> Option<MemoryPolicy> {
        match s {
            "base" => Some(MemoryPolicy::Base),
            "teacher" => Some(MemoryPolicy::Teacher),
            "student" => Some(MemoryPolicy::Student),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemoryPolicy::Base => "base",
            MemoryPolicy::Teacher => "teacher",
            MemoryPolicy::Student => "student",
        }
    }
}

/// Build the decoder-facing memory for evaluation or generation. Binary
/// variants draw hard Bernoulli bits from `rng`; the reference response is
/// consulted only under the teacher policy.
#[allow(clippy::too_many_arguments)]
pub fn eval_memory(
    tape: &mut Tape,
    bound: &Bound,
    pair: &PairEncoding,
    resp: Option<&EncodedSeq>,
    policy: MemoryPolicy,
    variant: Variant,
    tau: f64,
    rng: &mut RunRng,
) -> Result<Memory> {
    match policy {
        MemoryPolicy::Base => Ok(self_attention(tape, &pair.d)?),
        MemoryPolicy::Teacher => {
            let resp = resp.expect("teacher policy needs the reference response");
            let w = teacher_weight_matrix(
                tape,
                &pair.d,
                resp,
                variant,
                BinarizeMode::Predict,
                tau,
                BinarizeNoise::Sample(rng),
            )?;
            Ok(refine_memory(tape, &pair.d, w.g)?)
        }
        MemoryPolicy::Student => {
            let est = student_estimate(tape, &pair.d, &pair.ctx, variant.kind, &bound.student())?;
            let g = student_usable_g(tape, est, variant, &pair.d.mask, tau, rng)?;
            Ok(refine_memory(tape, &pair.d, g)?)
        }
    }
}

/// Generate a response for sample `i` of a batch under the given policy.
#[allow(clippy::too_many_arguments)]
pub fn generate_for_sample(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    i: usize,
    policy: MemoryPolicy,
    variant: Variant,
    tau: f64,
    k_top: usize,
    max_len: usize,
    rng: &mut RunRng,
) -> Result<Vec<u32>> {
    let mut off = DropoutMode::Off;
    let pair = encode_pair(
        tape,
        bound,
        cfg.embed,
        &batch.doc.ids[i],
        &batch.doc.mask[i],
        &batch.ctx.ids[i],
        &batch.ctx.mask[i],
        &mut off,
    )?;
    let resp_enc = if policy == MemoryPolicy::Teacher {
        Some(encode_response(tape, bound, &batch.resp.ids[i], &batch.resp.mask[i])?)
    } else {
        None
    };
    let mem = eval_memory(tape, bound, &pair, resp_enc.as_ref(), policy, variant, tau, rng)?;
    let ids = decoder::generate(
        tape,
        bound.table(),
        &pair.ctx,
        mem.m,
        &pair.d.mask,
        &bound.decoder(),
        k_top,
        max_len,
        rng,
    )?;
    Ok(ids)
}
