//! Run configuration: a flat `key=value` file merged with command-line
//! overrides (later pairs win), validated into typed config structs. Every
//! run can echo its effective settings back out (`config.resolved`) so that
//! a run is reproducible from its artifacts alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::data::SyntheticSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: expected {expected}")]
    Invalid {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{0}")]
    Conflict(String),
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line} is not `key=value`: `{text}`")]
    BadLine { line: usize, text: String },
}

/// Which response-aware weight structure the teacher builds and the student
/// estimates: per-token importances (constant-column G) or pairwise
/// importances (symmetric G).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    TokenImportance,
    PairwiseImportance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub kind: WeightKind,
    pub binary: bool,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        let (kind, binary) = match s {
            "rti" | "rti-continuous" => (WeightKind::TokenImportance, false),
            "rti-binary" => (WeightKind::TokenImportance, true),
            "rpi" | "rpi-continuous" => (WeightKind::PairwiseImportance, false),
            "rpi-binary" => (WeightKind::PairwiseImportance, true),
            _ => return None,
        };
        Some(Variant { kind, binary })
    }

    pub fn name(&self) -> &'static str {
        match (self.kind, self.binary) {
            (WeightKind::TokenImportance, false) => "rti",
            (WeightKind::TokenImportance, true) => "rti-binary",
            (WeightKind::PairwiseImportance, false) => "rpi",
            (WeightKind::PairwiseImportance, true) => "rpi-binary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed: usize,
    pub hidden: usize,
    pub k: usize,
    pub dropout: f64,
    pub max_doc: usize,
    pub max_ctx: usize,
    pub max_resp: usize,
    pub vocab_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: 300,
            hidden: 512,
            k: 512,
            dropout: 0.4,
            max_doc: 500,
            max_ctx: 30,
            max_resp: 30,
            vocab_cap: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub lambda: f64,
    pub tau: f64,
    pub variant: Variant,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub val_every: usize,
    pub rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch: 32,
            lambda: 1.0,
            tau: 1.0,
            variant: Variant {
                kind: WeightKind::TokenImportance,
                binary: false,
            },
            epochs: 10,
            patience: 3,
            clip_norm: 5.0,
            val_every: 20,
            rounds: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lr <= 0.0 {
            return Err(ConfigError::Conflict("lr must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(ConfigError::Conflict("lambda must be >= 0".into()));
        }
        if self.tau <= 0.0 {
            return Err(ConfigError::Conflict("tau must be positive".into()));
        }
        if self.batch == 0 || self.epochs == 0 || self.val_every == 0 || self.rounds == 0 {
            return Err(ConfigError::Conflict(
                "batch, epochs, val_every, rounds must all be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Corpus {
        train: String,
        valid: Option<String>,
        test: Option<String>,
    },
    Synthetic {
        spec: SyntheticSpec,
        train: usize,
        valid: usize,
        test: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub out_dir: String,
    pub top_k: usize,
    pub stopword_file: Option<String>,
    pub embedding_file: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            out_dir: "out".into(),
            top_k: 20,
            stopword_file: None,
            embedding_file: None,
        }
    }
}

/// Parse `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    text: line.to_string(),
                })
            }
        }
    }
    Ok(pairs)
}

pub fn load_pairs_file(path: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_string(),
        source,
    })?;
    parse_pairs_text(&text)
}

fn p_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        expected: "a nonnegative integer",
    })
}

fn p_u64(key: &str, value: &str) -> Result<u64, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        expected: "a nonnegative integer",
    })
}

fn p_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        expected: "a number",
    })
}

fn p_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Invalid {
            key: key.into(),
            value: value.into(),
            expected: "true or false",
        }),
    }
}

impl RunConfig {
    /// Apply pairs in order (later wins), then validate.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut corpus_train: Option<String> = None;
        let mut corpus_valid: Option<String> = None;
        let mut corpus_test: Option<String> = None;
        let mut synthetic = false;
        let mut spec = SyntheticSpec::default();
        let mut syn_counts = (2000usize, 200usize, 200usize);

        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "seed" => cfg.seed = p_u64(key, v)?,
                "out_dir" => cfg.out_dir = v.to_string(),
                "top_k" => cfg.top_k = p_usize(key, v)?,
                "stopword_file" => cfg.stopword_file = Some(v.to_string()),
                "embedding_file" => cfg.embedding_file = Some(v.to_string()),

                "embed" => cfg.model.embed = p_usize(key, v)?,
                "hidden" => cfg.model.hidden = p_usize(key, v)?,
                "k" => cfg.model.k = p_usize(key, v)?,
                "dropout" => cfg.model.dropout = p_f64(key, v)?,
                "max_doc" => cfg.model.max_doc = p_usize(key, v)?,
                "max_ctx" => cfg.model.max_ctx = p_usize(key, v)?,
                "max_resp" => cfg.model.max_resp = p_usize(key, v)?,
                "vocab_cap" => cfg.model.vocab_cap = p_usize(key, v)?,

                "lr" => cfg.train.lr = p_f64(key, v)?,
                "batch" => cfg.train.batch = p_usize(key, v)?,
                "lambda" => cfg.train.lambda = p_f64(key, v)?,
                "tau" => cfg.train.tau = p_f64(key, v)?,
                "variant" => {
                    cfg.train.variant = Variant::parse(v).ok_or_else(|| ConfigError::Invalid {
                        key: key.into(),
                        value: v.into(),
                        expected: "one of rti, rti-binary, rpi, rpi-binary",
                    })?
                }
                "epochs" => cfg.train.epochs = p_usize(key, v)?,
                "patience" => cfg.train.patience = p_usize(key, v)?,
                "clip_norm" => cfg.train.clip_norm = p_f64(key, v)?,
                "val_every" => cfg.train.val_every = p_usize(key, v)?,
                "rounds" => cfg.train.rounds = p_usize(key, v)?,

                "corpus_train" => corpus_train = Some(v.to_string()),
                "corpus_valid" => corpus_valid = Some(v.to_string()),
                "corpus_test" => corpus_test = Some(v.to_string()),

                "synthetic" => synthetic = p_bool(key, v)?,
                "synthetic_vocab" => spec.vocab_size = p_usize(key, v)?,
                "synthetic_keywords_per_doc" => spec.keywords_per_doc = p_usize(key, v)?,
                "synthetic_distractors" => spec.distractors_per_doc = p_usize(key, v)?,
                "synthetic_keyword_pool" => spec.keyword_pool = p_usize(key, v)?,
                "synthetic_cue_group" => spec.cue_group = p_usize(key, v)?,
                "synthetic_seed" => spec.seed = p_u64(key, v)?,
                "synthetic_train" => syn_counts.0 = p_usize(key, v)?,
                "synthetic_valid" => syn_counts.1 = p_usize(key, v)?,
                "synthetic_test" => syn_counts.2 = p_usize(key, v)?,

                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }

        match (corpus_train, synthetic) {
            (Some(_), true) => {
                return Err(ConfigError::Conflict(
                    "exactly one data source: corpus_train and synthetic=true are mutually exclusive"
                        .into(),
                ))
            }
            (Some(train), false) => {
                cfg.data = Some(DataSource::Corpus {
                    train,
                    valid: corpus_valid,
                    test: corpus_test,
                })
            }
            (None, true) => {
                spec.validate().map_err(ConfigError::Conflict)?;
                cfg.data = Some(DataSource::Synthetic {
                    spec,
                    train: syn_counts.0,
                    valid: syn_counts.1,
                    test: syn_counts.2,
                })
            }
            (None, false) => cfg.data = None,
        }

        cfg.train.validate()?;
        if cfg.model.embed == 0 || cfg.model.hidden == 0 || cfg.model.k == 0 {
            return Err(ConfigError::Conflict(
                "embed, hidden, k must all be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&cfg.model.dropout) {
            return Err(ConfigError::Conflict("dropout must lie in [0, 1)".into()));
        }
        if cfg.top_k == 0 {
            return Err(ConfigError::Conflict("top_k must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn require_data(&self) -> Result<&DataSource, ConfigError> {
        self.data.as_ref().ok_or(ConfigError::Missing(
            "a data source (set corpus_train=PATH or synthetic=true)",
        ))
    }

    /// Full effective settings, one `key=value` per line, keys sorted.
    pub fn resolved(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert("out_dir", self.out_dir.clone());
        map.insert("top_k", self.top_k.to_string());
        if let Some(s) = &self.stopword_file {
            map.insert("stopword_file", s.clone());
        }
        if let Some(s) = &self.embedding_file {
            map.insert("embedding_file", s.clone());
        }
        map.insert("embed", self.model.embed.to_string());
        map.insert("hidden", self.model.hidden.to_string());
        map.insert("k", self.model.k.to_string());
        map.insert("dropout", self.model.dropout.to_string());
        map.insert("max_doc", self.model.max_doc.to_string());
        map.insert("max_ctx", self.model.max_ctx.to_string());
        map.insert("max_resp", self.model.max_resp.to_string());
        map.insert("vocab_cap", self.model.vocab_cap.to_string());
        map.insert("lr", self.train.lr.to_string());
        map.insert("batch", self.train.batch.to_string());
        map.insert("lambda", self.train.lambda.to_string());
        map.insert("tau", self.train.tau.to_string());
        map.insert("variant", self.train.variant.name().to_string());
        map.insert("epochs", self.train.epochs.to_string());
        map.insert("patience", self.train.patience.to_string());
        map.insert("clip_norm", self.train.clip_norm.to_string());
        map.insert("val_every", self.train.val_every.to_string());
        map.insert("rounds", self.train.rounds.to_string());
        match &self.data {
            None => {}
            Some(DataSource::Corpus { train, valid, test }) => {
                map.insert("corpus_train", train.clone());
                if let Some(p) = valid {
                    map.insert("corpus_valid", p.clone());
                }
                if let Some(p) = test {
                    map.insert("corpus_test", p.clone());
                }
            }
            Some(DataSource::Synthetic {
                spec,
                train,
                valid,
                test,
            }) => {
                map.insert("synthetic", "true".into());
                map.insert("synthetic_vocab", spec.vocab_size.to_string());
                map.insert(
                    "synthetic_keywords_per_doc",
                    spec.keywords_per_doc.to_string(),
                );
                map.insert("synthetic_distractors", spec.distractors_per_doc.to_string());
                map.insert("synthetic_keyword_pool", spec.keyword_pool.to_string());
                map.insert("synthetic_cue_group", spec.cue_group.to_string());
                map.insert("synthetic_seed", spec.seed.to_string());
                map.insert("synthetic_train", train.to_string());
                map.insert("synthetic_valid", valid.to_string());
                map.insert("synthetic_test", test.to_string());
            }
        }
        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
