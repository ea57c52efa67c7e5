//! Automatic evaluation: grounding precision/recall against the source
//! document, corpus diversity (Dist-n, Ent-n), corpus BLEU-4, and the
//! embedding-similarity analysis of where attention accumulates. All
//! metrics are pure functions; corpus-level ones are order-invariant.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::data::{tokenize, StopwordSet};

pub use crate::memory::accumulated_attention;

/// One evaluation example: everything is surface tokens, already lowercased
/// by the tokenizer.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub document: Vec<String>,
    pub context: Vec<String>,
    pub reference: Vec<String>,
    pub generated: Vec<String>,
}

impl EvalRecord {
    pub fn from_texts(document: &str, context: &str, reference: &str, generated: &str) -> Self {
        EvalRecord {
            document: tokenize(document),
            context: tokenize(context),
            reference: tokenize(reference),
            generated: tokenize(generated),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grounding {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Grounding {
    const ZERO: Grounding = Grounding { precision: 0.0, recall: 0.0, f1: 0.0 };

    fn from_counts(overlap: usize, pred_den: usize, doc_den: usize) -> Grounding {
        if pred_den == 0 || doc_den == 0 {
            return Grounding::ZERO;
        }
        let p = overlap as f64 / pred_den as f64;
        let r = overlap as f64 / doc_den as f64;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Grounding { precision: p, recall: r, f1 }
    }
}

fn types<'a>(tokens: &'a [String], stop: &StopwordSet) -> BTreeSet<&'a str> {
    tokens
        .iter()
        .map(|t| t.as_str())
        .filter(|t| !stop.contains(t))
        .collect()
}

/// Token types the generation shares with the document, discounting types
/// already present in the context and stopwords. Set semantics throughout.
pub fn grounding(rec: &EvalRecord, stop: &StopwordSet) -> Grounding {
    let doc = types(&rec.document, stop);
    let gen = types(&rec.generated, stop);
    let ctx: BTreeSet<&str> = rec.context.iter().map(|t| t.as_str()).collect();
    let overlap = doc.intersection(&gen).filter(|t| !ctx.contains(*t)).count();
    Grounding::from_counts(overlap, gen.len(), doc.len())
}

/// As `grounding`, but the overlap must also appear in the reference, so
/// only ground-truth-supported document tokens count.
pub fn grounding_gt(rec: &EvalRecord, stop: &StopwordSet) -> Grounding {
    let doc = types(&rec.document, stop);
    let gen = types(&rec.generated, stop);
    let reference: BTreeSet<&str> = rec.reference.iter().map(|t| t.as_str()).collect();
    let ctx: BTreeSet<&str> = rec.context.iter().map(|t| t.as_str()).collect();
    let overlap = doc
        .intersection(&gen)
        .filter(|t| reference.contains(*t) && !ctx.contains(*t))
        .count();
    Grounding::from_counts(overlap, gen.len(), doc.len())
}

fn corpus_ngram_counts<'a, I>(corpus: I, n: usize) -> HashMap<&'a [String], u64>
where
    I: IntoIterator<Item = &'a [String]>,
{
    assert!(n >= 1, "n-grams need n >= 1");
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    for resp in corpus {
        for gram in resp.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Unique n-grams over total n-gram occurrences across the corpus.
pub fn dist_n<'a, I>(corpus: I, n: usize) -> f64
where
    I: IntoIterator<Item = &'a [String]>,
{
    let counts = corpus_ngram_counts(corpus, n);
    let total: u64 = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    counts.len() as f64 / total as f64
}

/// Entropy in nats of the corpus n-gram frequency distribution.
pub fn ent_n<'a, I>(corpus: I, n: usize) -> f64
where
    I: IntoIterator<Item = &'a [String]>,
{
    let counts = corpus_ngram_counts(corpus, n);
    let total: u64 = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    -counts
        .values()
        .map(|&f| {
            let p = f as f64 / t;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Corpus-level BLEU-4: pooled clipped n-gram matches for n = 1..4, add-1
/// smoothing when a higher-order count comes up empty, and the standard
/// brevity penalty exp(1 - r/c) for short candidates.
pub fn bleu4<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a [String], &'a [String])>,
{
    let mut num = [0u64; 4];
    let mut den = [0u64; 4];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, reference) in pairs {
        cand_len += cand.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=4usize {
            let c_counts = corpus_ngram_counts(std::iter::once(cand), n);
            let r_counts = corpus_ngram_counts(std::iter::once(reference), n);
            for (gram, &c) in &c_counts {
                let r = r_counts.get(gram).copied().unwrap_or(0);
                num[n - 1] += c.min(r);
            }
            den[n - 1] += cand.len().saturating_sub(n - 1) as u64;
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (mut a, mut b) = (num[n] as f64, den[n] as f64);
        if n > 0 && num[n] == 0 {
            a += 1.0;
            b += 1.0;
        }
        if a == 0.0 || b == 0.0 {
            return 0.0;
        }
        log_sum += 0.25 * (a / b).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

/// Row-major embedding table view for metric-side lookups.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingView<'a> {
    table: &'a [f64],
    dim: usize,
}

impl<'a> EmbeddingView<'a> {
    pub fn new(table: &'a [f64], dim: usize) -> EmbeddingView<'a> {
        assert!(dim > 0 && table.len() % dim == 0, "table is not row-major [v, dim]");
        EmbeddingView { table, dim }
    }

    pub fn get(&self, id: u32) -> Option<&'a [f64]> {
        let start = id as usize * self.dim;
        self.table.get(start..start + self.dim)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn mean_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= vs.len() as f64;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    /// Symmetrized mean of per-token best matches across the two sets.
    TokenMax,
    /// Cosine between the two mean (bag) vectors.
    BagMean,
}

/// Embedding similarity between two token-id sets. Ids without an embedding
/// row are skipped; duplicates collapse. Either side empty scores 0.
pub fn emb_similarity(a: &[u32], b: &[u32], table: EmbeddingView, kind: SimilarityKind) -> f64 {
    let gather = |ids: &[u32]| -> Vec<&[f64]> {
        let uniq: BTreeSet<u32> = ids.iter().copied().collect();
        uniq.into_iter().filter_map(|id| table.get(id)).collect()
    };
    let va = gather(a);
    let vb = gather(b);
    if va.is_empty() || vb.is_empty() {
        return 0.0;
    }
    match kind {
        SimilarityKind::BagMean => {
            let ma = mean_vector(&va, table.dim);
            let mb = mean_vector(&vb, table.dim);
            cosine(&ma, &mb)
        }
        SimilarityKind::TokenMax => {
            let best = |from: &[&[f64]], to: &[&[f64]]| -> f64 {
                let sum: f64 = from
                    .iter()
                    .map(|u| to.iter().map(|v| cosine(u, v)).fold(f64::NEG_INFINITY, f64::max))
                    .sum();
                sum / from.len() as f64
            };
            0.5 * (best(&va, &vb) + best(&vb, &va))
        }
    }
}

/// Per-sample input to the attention-overlap analysis: the document's valid
/// token ids, its accumulated attention weights (one per position), and the
/// reference response ids.
#[derive(Debug, Clone)]
pub struct AttentionSample {
    pub doc_ids: Vec<u32>,
    pub accumulated: Vec<f64>,
    pub resp_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OverlapRow {
    pub k: usize,
    pub emb_m: f64,
    pub emb_b: f64,
}

fn top_k_ids(scored: &mut Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    scored.iter().take(k).map(|&(_, id)| id).collect()
}

/// Compare where attention accumulates with where the response actually
/// points: per sample, the top-K document token types by accumulated
/// attention versus the top-K by best cosine to any response token, scored
/// with both similarity kinds and averaged over the sample set. Documents
/// with fewer than K types contribute all of their tokens.
pub fn topk_token_overlap_analysis(
    samples: &[AttentionSample],
    table: EmbeddingView,
    ks: &[usize],
) -> Vec<OverlapRow> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut sum_m = 0.0;
        let mut sum_b = 0.0;
        for s in samples {
            assert_eq!(s.doc_ids.len(), s.accumulated.len(), "weight per position");
            let mut weight: HashMap<u32, f64> = HashMap::new();
            for (&id, &w) in s.doc_ids.iter().zip(&s.accumulated) {
                *weight.entry(id).or_insert(0.0) += w;
            }
            let resp_vecs: Vec<&[f64]> = {
                let uniq: BTreeSet<u32> = s.resp_ids.iter().copied().collect();
                uniq.into_iter().filter_map(|id| table.get(id)).collect()
            };
            let mut by_attention: Vec<(f64, u32)> =
                weight.iter().map(|(&id, &w)| (w, id)).collect();
            let mut by_similarity: Vec<(f64, u32)> = weight
                .keys()
                .map(|&id| {
                    let sim = match table.get(id) {
                        Some(e) if !resp_vecs.is_empty() => resp_vecs
                            .iter()
                            .map(|r| cosine(e, r))
                            .fold(f64::NEG_INFINITY, f64::max),
                        _ => f64::NEG_INFINITY,
                    };
                    (sim, id)
                })
                .collect();
            let att_set = top_k_ids(&mut by_attention, k);
            let sim_set = top_k_ids(&mut by_similarity, k);
            sum_m += emb_similarity(&att_set, &sim_set, table, SimilarityKind::TokenMax);
            sum_b += emb_similarity(&att_set, &sim_set, table, SimilarityKind::BagMean);
        }
        let n = samples.len().max(1) as f64;
        rows.push(OverlapRow { k, emb_m: sum_m / n, emb_b: sum_b / n });
    }
    rows
}

/// The full report over a test set. NIST comes from an external scoring
/// tool, so it is carried as an explicit null.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub nist: Option<f64>,
    pub bleu4: f64,
    pub grounding: Grounding,
    pub grounding_gt: Grounding,
    pub ent4: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub mean_len: f64,
}

pub fn report(records: &[EvalRecord], stop: &StopwordSet) -> MetricReport {
    assert!(!records.is_empty(), "empty evaluation set");
    let n = records.len() as f64;
    let mut g = Grounding::ZERO;
    let mut gt = Grounding::ZERO;
    for rec in records {
        let a = grounding(rec, stop);
        let b = grounding_gt(rec, stop);
        g.precision += a.precision;
        g.recall += a.recall;
        g.f1 += a.f1;
        gt.precision += b.precision;
        gt.recall += b.recall;
        gt.f1 += b.f1;
    }
    for x in [&mut g, &mut gt] {
        x.precision /= n;
        x.recall /= n;
        x.f1 /= n;
    }
    let gen = || records.iter().map(|r| r.generated.as_slice());
    MetricReport {
        nist: None,
        bleu4: bleu4(records.iter().map(|r| (r.generated.as_slice(), r.reference.as_slice()))),
        grounding: g,
        grounding_gt: gt,
        ent4: ent_n(gen(), 4),
        dist1: dist_n(gen(), 1),
        dist2: dist_n(gen(), 2),
        mean_len: records.iter().map(|r| r.generated.len() as f64).sum::<f64>() / n,
    }
}
