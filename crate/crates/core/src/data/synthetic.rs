//! Deterministic synthetic corpus: each document hides one target keyword
//! among distractors (plus optional decoy keywords), the context carries a
//! cue naming the target's keyword *group*, and the response quotes the
//! document span starting at the target keyword. Producing the response
//! therefore needs both sides read properly: the cue alone leaves every
//! keyword in its group possible, the document alone leaves every planted
//! keyword possible, and the quoted span can only be found by locating the
//! keyword inside the document. No low-dimensional summary of the response
//! fits that much information, so a model can only succeed by emphasizing
//! the right document positions.

use super::RawRecord;
use crate::rng::{RunRng, Stream};

const CTX_TEMPLATE: [&str; 5] = ["what", "is", "the", "topic", "about"];
// distinct template words: what, is, the, topic, about
const TEMPLATE_WORDS: usize = 5;
const RESERVED: usize = 4;
/// Quoted span length: the keyword plus the tokens that follow it
/// (wrapping). Long enough that no single scalar can summarize it.
pub const QUOTE_SPAN: usize = 4;

/// Generator shape. `vocab_size` is the total surface budget; whatever is
/// left after reserved ids, template words, keywords, and cues becomes the
/// distractor pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub keywords_per_doc: usize,
    pub distractors_per_doc: usize,
    pub keyword_pool: usize,
    pub cue_group: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            keywords_per_doc: 1,
            distractors_per_doc: 23,
            keyword_pool: 16,
            cue_group: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn cue_count(&self) -> usize {
        self.keyword_pool / self.cue_group
    }

    pub fn distractor_pool(&self) -> usize {
        self.vocab_size
            .saturating_sub(RESERVED + TEMPLATE_WORDS + self.keyword_pool + self.cue_count())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.keyword_pool == 0 || self.cue_group == 0 {
            return Err("synthetic keyword_pool and cue_group must be positive".into());
        }
        if self.keyword_pool % self.cue_group != 0 {
            return Err(format!(
                "synthetic cue_group {} must divide keyword_pool {}",
                self.cue_group, self.keyword_pool
            ));
        }
        if self.keywords_per_doc == 0 {
            return Err("synthetic keywords_per_doc must be at least 1".into());
        }
        if self.keywords_per_doc > 1 {
            let outside_group = self.keyword_pool - self.cue_group;
            if self.keywords_per_doc - 1 > outside_group {
                return Err(format!(
                    "synthetic keywords_per_doc {} needs {} decoys but only {} keywords lie outside one group",
                    self.keywords_per_doc,
                    self.keywords_per_doc - 1,
                    outside_group
                ));
            }
        }
        if self.distractor_pool() == 0 {
            return Err(format!(
                "synthetic vocab_size {} leaves no distractor tokens (need > {})",
                self.vocab_size,
                RESERVED + TEMPLATE_WORDS + self.keyword_pool + self.cue_count()
            ));
        }
        Ok(())
    }

    pub fn keyword_token(&self, i: usize) -> String {
        format!("k{i:02}")
    }

    pub fn cue_token(&self, group: usize) -> String {
        format!("c{group:02}")
    }

    pub fn distractor_token(&self, i: usize) -> String {
        format!("w{i:02}")
    }

    pub fn group_of(&self, keyword: usize) -> usize {
        keyword / self.cue_group
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticAnnotation {
    pub keyword: String,
    pub cue: String,
    /// Index of the target keyword within the tokenized document.
    pub doc_position: usize,
}

/// Samples `start..start+n` of the corpus defined by `spec`. Each index owns
/// an RNG substream, so splits taken at different offsets never overlap and
/// regeneration is exact.
pub fn make_synthetic_range(
    spec: &SyntheticSpec,
    start: usize,
    n: usize,
) -> (Vec<RawRecord>, Vec<SyntheticAnnotation>) {
    spec.validate().expect("invalid synthetic spec");
    let mut records = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = RunRng::for_unit(spec.seed, Stream::Data, (start + i) as u64);
        let (rec, ann) = one_sample(spec, &mut rng);
        records.push(rec);
        annotations.push(ann);
    }
    (records, annotations)
}

pub fn make_synthetic(
    spec: &SyntheticSpec,
    n: usize,
) -> (Vec<RawRecord>, Vec<SyntheticAnnotation>) {
    make_synthetic_range(spec, 0, n)
}

fn one_sample(spec: &SyntheticSpec, rng: &mut RunRng) -> (RawRecord, SyntheticAnnotation) {
    let target = rng.below(spec.keyword_pool);
    let group = spec.group_of(target);

    let mut doc: Vec<String> = (0..spec.distractors_per_doc)
        .map(|_| spec.distractor_token(rng.below(spec.distractor_pool())))
        .collect();

    // decoy keywords come from other groups, all distinct
    let mut decoys: Vec<usize> = Vec::new();
    while decoys.len() + 1 < spec.keywords_per_doc {
        let cand = rng.below(spec.keyword_pool);
        if spec.group_of(cand) != group && !decoys.contains(&cand) {
            decoys.push(cand);
        }
    }
    for d in decoys {
        let pos = rng.below(doc.len() + 1);
        doc.insert(pos, spec.keyword_token(d));
    }
    let target_pos = rng.below(doc.len() + 1);
    doc.insert(target_pos, spec.keyword_token(target));

    let keyword = spec.keyword_token(target);
    let cue = spec.cue_token(group);
    let mut ctx: Vec<&str> = CTX_TEMPLATE.to_vec();
    ctx.push(&cue);
    let resp: Vec<String> =
        (0..QUOTE_SPAN).map(|o| doc[(target_pos + o) % doc.len()].clone()).collect();

    let rec = RawRecord {
        document: doc.join(" "),
        context: ctx.join(" "),
        response: resp.join(" "),
    };
    let ann = SyntheticAnnotation {
        keyword: keyword.clone(),
        cue: cue.clone(),
        doc_position: target_pos,
    };
    (rec, ann)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec { seed: 7, ..Default::default() };
        let a = make_synthetic(&spec, 5);
        let b = make_synthetic(&spec, 5);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn ranges_tile_the_same_corpus() {
        let spec = SyntheticSpec::default();
        let all = make_synthetic(&spec, 10).0;
        let tail = make_synthetic_range(&spec, 6, 4).0;
        assert_eq!(&all[6..], tail.as_slice());
    }

    #[test]
    fn zero_count_is_empty() {
        let (r, a) = make_synthetic(&SyntheticSpec::default(), 0);
        assert!(r.is_empty() && a.is_empty());
    }

    #[test]
    fn responses_quote_the_span_starting_at_the_keyword() {
        let spec = SyntheticSpec { seed: 3, ..Default::default() };
        let (recs, anns) = make_synthetic(&spec, 200);
        for (rec, ann) in recs.iter().zip(&anns) {
            let doc = tokenize(&rec.document);
            assert_eq!(doc[ann.doc_position], ann.keyword);
            assert_eq!(doc.len(), spec.keywords_per_doc + spec.distractors_per_doc);
            let resp = tokenize(&rec.response);
            assert_eq!(resp.len(), QUOTE_SPAN);
            assert_eq!(resp[0], ann.keyword);
            for (o, tok) in resp.iter().enumerate() {
                assert_eq!(tok, &doc[(ann.doc_position + o) % doc.len()]);
            }
            let ctx = tokenize(&rec.context);
            assert_eq!(ctx.last().unwrap(), &ann.cue);
        }
    }

    #[test]
    fn cue_names_the_keyword_group() {
        let spec = SyntheticSpec { seed: 1, ..Default::default() };
        let (_, anns) = make_synthetic(&spec, 300);
        for ann in &anns {
            let kw: usize = ann.keyword[1..].parse().unwrap();
            let cue: usize = ann.cue[1..].parse().unwrap();
            assert_eq!(spec.group_of(kw), cue);
        }
        // a cue alone is ambiguous: the same cue co-occurs with >1 keyword
        let mut seen: std::collections::HashMap<String, std::collections::HashSet<String>> =
            Default::default();
        for ann in &anns {
            seen.entry(ann.cue.clone()).or_default().insert(ann.keyword.clone());
        }
        assert!(seen.values().any(|kws| kws.len() > 1));
    }

    #[test]
    fn decoy_keywords_come_from_other_groups() {
        let spec = SyntheticSpec {
            keywords_per_doc: 3,
            distractors_per_doc: 10,
            seed: 5,
            ..Default::default()
        };
        let (recs, anns) = make_synthetic(&spec, 100);
        for (rec, ann) in recs.iter().zip(&anns) {
            let doc = tokenize(&rec.document);
            let kws: Vec<&String> = doc.iter().filter(|t| t.starts_with('k')).collect();
            assert_eq!(kws.len(), 3, "document alone must stay ambiguous");
            let target_group = spec.group_of(ann.keyword[1..].parse().unwrap());
            for kw in kws {
                if *kw != ann.keyword {
                    let g = spec.group_of(kw[1..].parse().unwrap());
                    assert_ne!(g, target_group);
                }
            }
        }
    }

    #[test]
    fn keyword_marginal_is_uniform() {
        let spec = SyntheticSpec { seed: 11, ..Default::default() };
        let n = 10_000;
        let (_, anns) = make_synthetic(&spec, n);
        let mut counts = vec![0usize; spec.keyword_pool];
        for ann in &anns {
            counts[ann.keyword[1..].parse::<usize>().unwrap()] += 1;
        }
        let p = 1.0 / spec.keyword_pool as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let expect = n as f64 * p;
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "keyword {i}: count {c}, expected {expect}±{}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn spec_validation_catches_bad_shapes() {
        let tight = SyntheticSpec { vocab_size: 26, ..Default::default() };
        assert!(tight.validate().is_err());
        let uneven = SyntheticSpec { cue_group: 3, ..Default::default() };
        assert!(uneven.validate().is_err());
        let greedy = SyntheticSpec { keywords_per_doc: 14, ..Default::default() };
        assert!(greedy.validate().is_err());
        assert!(SyntheticSpec::default().validate().is_ok());
    }
}
