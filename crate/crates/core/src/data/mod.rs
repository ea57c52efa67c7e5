//! Corpus ingestion: tokenization, vocabulary, JSON-lines loading,
//! truncation, padding/masking, stopwords, and pretrained-embedding files.

mod stopwords;
mod synthetic;

pub use stopwords::StopwordSet;
pub use synthetic::{make_synthetic, make_synthetic_range, SyntheticAnnotation, SyntheticSpec};

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::{BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    BadRecord {
        path: String,
        line: usize,
        reason: String,
    },
}

/// Lowercase, split punctuation characters into their own tokens, then split
/// on whitespace. Any non-alphanumeric, non-whitespace character counts as
/// punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for raw in text.chars() {
        let c = raw.to_lowercase().next().unwrap_or(raw);
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token/id bijection with fixed reserved ids 0..3 (PAD, UNK, BOS, EOS).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

impl Vocabulary {
    /// Keep the `cap − 4` most frequent tokens; ties break lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>, cap: usize) -> Vocabulary {
        assert!(cap >= 4, "vocabulary cap must cover the reserved ids");
        let mut counts: HashMap<&'a str, u64> = HashMap::new();
        for toks in texts {
            for t in toks {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap - 4);

        let mut id_to_token: Vec<String> =
            [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN].map(String::from).to_vec();
        id_to_token.extend(ranked.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Surface forms, skipping reserved ids.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id > EOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }
}

/// One corpus record before id-mapping.
#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct RawRecord {
    pub document: String,
    pub context: String,
    pub response: String,
}

/// One (document, context, response) id triple, truncated to the caps.
/// The response always ends with EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub document: Vec<u32>,
    pub context: Vec<u32>,
    pub response: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
pub struct TruncationCaps {
    pub doc: usize,
    pub ctx: usize,
    pub resp: usize,
}

impl Sample {
    /// Returns None when document or context tokenizes to nothing; such
    /// records cannot be encoded and are treated as malformed upstream.
    pub fn from_record(rec: &RawRecord, vocab: &Vocabulary, caps: TruncationCaps) -> Option<Sample> {
        let mut document = vocab.encode(&tokenize(&rec.document));
        let mut context = vocab.encode(&tokenize(&rec.context));
        let mut response = vocab.encode(&tokenize(&rec.response));
        if document.is_empty() || context.is_empty() {
            return None;
        }
        document.truncate(caps.doc);
        context.truncate(caps.ctx);
        response.truncate(caps.resp.saturating_sub(1).max(0));
        response.push(EOS);
        Some(Sample {
            document,
            context,
            response,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LoadWarning {
    pub line: usize,
    pub reason: String,
}

/// Read a JSON-lines corpus. Malformed or un-encodable lines are skipped and
/// reported with their line numbers.
pub fn load_corpus(
    path: &Path,
    vocab: &Vocabulary,
    caps: TruncationCaps,
) -> Result<(Vec<Sample>, Vec<LoadWarning>), DataError> {
    let (records, mut warnings) = load_raw_records(path)?;
    let mut samples = Vec::with_capacity(records.len());
    for (line, rec) in records {
        match Sample::from_record(&rec, vocab, caps) {
            Some(s) => samples.push(s),
            None => warnings.push(LoadWarning {
                line,
                reason: "document or context is empty after tokenization".into(),
            }),
        }
    }
    warnings.sort_by_key(|w| w.line);
    Ok((samples, warnings))
}

/// Raw records with their 1-based line numbers, plus warnings for bad lines.
pub fn load_raw_records(
    path: &Path,
) -> Result<(Vec<(usize, RawRecord)>, Vec<LoadWarning>), DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(&text) {
            Ok(rec) => records.push((line_no, rec)),
            Err(e) => warnings.push(LoadWarning {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }
    Ok((records, warnings))
}

/// PAD-filled rectangular ids plus validity masks (true = real token).
#[derive(Debug, Clone)]
pub struct PaddedSeqs {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedSeqs {
    fn from_seqs(seqs: &[&Vec<u32>]) -> PaddedSeqs {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut row = (*s).clone();
            let mut m = vec![true; s.len()];
            row.resize(width, PAD);
            m.resize(width, false);
            ids.push(row);
            mask.push(m);
        }
        PaddedSeqs { ids, mask }
    }

    pub fn width(&self) -> usize {
        self.ids.first().map(|r| r.len()).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub doc: PaddedSeqs,
    pub ctx: PaddedSeqs,
    pub resp: PaddedSeqs,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.doc.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc.ids.is_empty()
    }
}

pub fn batch(samples: &[Sample]) -> Batch {
    assert!(!samples.is_empty(), "batch of zero samples");
    let docs: Vec<&Vec<u32>> = samples.iter().map(|s| &s.document).collect();
    let ctxs: Vec<&Vec<u32>> = samples.iter().map(|s| &s.context).collect();
    let resps: Vec<&Vec<u32>> = samples.iter().map(|s| &s.response).collect();
    Batch {
        doc: PaddedSeqs::from_seqs(&docs),
        ctx: PaddedSeqs::from_seqs(&ctxs),
        resp: PaddedSeqs::from_seqs(&resps),
    }
}

/// Decoder input for teacher forcing: BOS followed by the response ids with
/// the final EOS dropped; same length as the target row.
pub fn shifted_response(response: &[u32]) -> Vec<u32> {
    let mut input = Vec::with_capacity(response.len());
    input.push(BOS);
    input.extend_from_slice(&response[..response.len() - 1]);
    input
}

/// Pretrained embedding file: one token then `dim` floats per line.
pub fn load_embedding_file(
    path: &Path,
    dim: usize,
) -> Result<HashMap<String, Vec<f64>>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut table = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let text = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let mut parts = text.split_whitespace();
        let token = parts.next().unwrap().to_string();
        let vec: Vec<f64> = parts.map(|p| p.parse().unwrap_or(f64::NAN)).collect();
        if vec.len() != dim || vec.iter().any(|v| !v.is_finite()) {
            return Err(DataError::BadRecord {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!("expected a token and {dim} floats"),
            });
        }
        table.insert(token, vec);
    }
    Ok(table)
}
