//! Command-line surface. Each subcommand maps onto one library entry point:
//! the training drivers, the generator, the metric battery, the attention
//! analysis, or the numeric self-checks. Configuration comes from an
//! optional key=value file plus repeatable `--set` overrides; overrides win.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cbr::config::{ConfigError, DataSource, RunConfig};
use cbr::data::{
    batch, detokenize, load_embedding_file, load_raw_records, make_synthetic_range, tokenize,
    Batch, DataError, RawRecord, Sample, StopwordSet, TruncationCaps, Vocabulary,
};
use cbr::memory::accumulated_attention;
use cbr::metrics::{
    report, AttentionSample, EmbeddingView, EvalRecord, MetricReport, OverlapRow,
    topk_token_overlap_analysis,
};
use cbr::model::{
    encode_pair, encode_response, eval_memory, generate_for_sample, register_params, Bound,
    DropoutMode, MemoryPolicy, ModelError,
};
use cbr::params::{CheckpointError, ParamStore};
use cbr::rng::{RunRng, Stream};
use cbr::selfcheck;
use cbr::tensor::Tape;
use cbr::training::{alternate, train_single_phase, Phase, TrainError, Transcript};

#[derive(Parser)]
#[command(
    name = "cbr",
    version,
    about = "Document-grounded response generation with response-anticipated memories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file (# starts a comment)
    #[arg(long, value_name = "FILE")]
    config: Option<String>,
    /// Override one setting as KEY=VALUE; repeatable, wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the response-aware teacher phase only
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start from an existing checkpoint instead of fresh parameters
        #[arg(long, value_name = "CKPT")]
        init_from: Option<PathBuf>,
    },
    /// Train the anticipation (student) phase only; base and teacher stay frozen
    TrainStudent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        init_from: Option<PathBuf>,
    },
    /// Alternate teacher and student phases for the configured rounds
    Alternate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        init_from: Option<PathBuf>,
    },
    /// Generate responses for the test split and write them as JSON lines
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to load (default: <out_dir>/model.ckpt)
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Memory policy: base, teacher, or student
        #[arg(long, default_value = "student")]
        policy: String,
        /// Output path (default: <out_dir>/generations_<policy>.jsonl)
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Score a generation file and write a metric report (JSON + text table)
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Generation file produced by `generate`
        #[arg(long, value_name = "FILE")]
        generations: PathBuf,
        /// Report path (default: <out_dir>/metric_report.json)
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Compare attention-ranked and response-similar top-K document tokens
    AnalyzeAttention {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Policy to contrast against the plain memory: teacher or student
        #[arg(long, default_value = "student")]
        policy: String,
    },
    /// Run the gradient and invariant self-check battery
    Selfcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reduced sweep sizes (for smoke tests)
        #[arg(long)]
        fast: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} is empty; nothing to do")]
    Empty(&'static str),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("i/o: {0}")]
    Json(#[from] serde_json::Error),
    #[error("self-check failures reported above")]
    ChecksFailed,
}

impl CliError {
    /// 2 = configuration/usage, 3 = data or artifact, 4 = numeric divergence.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Checkpoint(_) | CliError::Empty(_) => 3,
            CliError::Io(_) | CliError::Json(_) => 3,
            CliError::Train(e) => match e {
                TrainError::NonFinite { .. }
                | TrainError::Diverged { .. }
                | TrainError::DivergenceDetected { .. } => 4,
                TrainError::Checkpoint(_) | TrainError::Io(_) => 3,
                TrainError::Model(_) | TrainError::Tensor(_) => 1,
            },
            CliError::Model(_) => 1,
            CliError::ChecksFailed => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::TrainTeacher { cfg, init_from } => {
            cmd_train(&cfg, init_from.as_deref(), Some(Phase::Teacher))
        }
        Command::TrainStudent { cfg, init_from } => {
            cmd_train(&cfg, init_from.as_deref(), Some(Phase::Student))
        }
        Command::Alternate { cfg, init_from } => cmd_train(&cfg, init_from.as_deref(), None),
        Command::Generate {
            cfg,
            checkpoint,
            policy,
            output,
        } => cmd_generate(&cfg, checkpoint, &policy, output),
        Command::Evaluate {
            cfg,
            generations,
            output,
        } => cmd_evaluate(&cfg, &generations, output),
        Command::AnalyzeAttention {
            cfg,
            checkpoint,
            policy,
        } => cmd_analyze(&cfg, checkpoint, &policy),
        Command::Selfcheck { cfg, fast } => cmd_selfcheck(&cfg, fast),
    }
}

/// File pairs first, then `--set` pairs; later pairs win inside the parser.
fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        pairs.extend(cbr::config::load_pairs_file(path)?);
    }
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(RunConfig::from_pairs(&pairs)?)
}

/// Every run records its effective settings next to its other artifacts.
fn write_resolved(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("config.resolved");
    std::fs::write(&path, cfg.resolved())?;
    Ok(path)
}

struct LoadedData {
    vocab: Vocabulary,
    train: Vec<Sample>,
    valid: Vec<Sample>,
    test: Vec<Sample>,
    /// Surface records aligned 1:1 with `test`; generation files carry these.
    test_records: Vec<RawRecord>,
}

fn build_vocab(records: &[RawRecord], cap: usize) -> Vocabulary {
    let mut texts: Vec<Vec<String>> = Vec::with_capacity(records.len() * 3);
    for r in records {
        texts.push(tokenize(&r.document));
        texts.push(tokenize(&r.context));
        texts.push(tokenize(&r.response));
    }
    Vocabulary::build(texts.iter().map(|t| t.as_slice()), cap)
}

/// Encode records, dropping the ones whose document or context tokenizes to
/// nothing, and keep the surviving surface records aligned with the samples.
fn encode_records(
    records: Vec<RawRecord>,
    vocab: &Vocabulary,
    caps: TruncationCaps,
    what: &str,
) -> (Vec<Sample>, Vec<RawRecord>) {
    let mut samples = Vec::with_capacity(records.len());
    let mut kept = Vec::with_capacity(records.len());
    let mut skipped = 0usize;
    for rec in records {
        match Sample::from_record(&rec, vocab, caps) {
            Some(s) => {
                samples.push(s);
                kept.push(rec);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} {what} records with empty document or context");
    }
    (samples, kept)
}

fn read_corpus_records(path: &str) -> Result<Vec<RawRecord>, CliError> {
    let (records, warnings) = load_raw_records(Path::new(path))?;
    for w in warnings {
        eprintln!("warning: {path}:{}: {}", w.line, w.reason);
    }
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

fn load_data(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let source = cfg.require_data()?;
    let caps = TruncationCaps {
        doc: cfg.model.max_doc,
        ctx: cfg.model.max_ctx,
        resp: cfg.model.max_resp,
    };
    let (train_recs, valid_recs, test_recs) = match source {
        DataSource::Synthetic {
            spec,
            train,
            valid,
            test,
        } => {
            let (tr, _) = make_synthetic_range(spec, 0, *train);
            let (va, _) = make_synthetic_range(spec, *train, *valid);
            let (te, _) = make_synthetic_range(spec, *train + *valid, *test);
            (tr, va, te)
        }
        DataSource::Corpus { train, valid, test } => {
            let mut tr = read_corpus_records(train)?;
            let va = match valid {
                Some(p) => read_corpus_records(p)?,
                // No held-out file: carve the last tenth off the training set
                // so early stopping still has something untrained to watch.
                None => {
                    let cut = tr.len() - (tr.len() / 10).max(1).min(tr.len());
                    tr.split_off(cut)
                }
            };
            let te = match test {
                Some(p) => read_corpus_records(p)?,
                None => va.clone(),
            };
            (tr, va, te)
        }
    };
    let vocab = build_vocab(&train_recs, cfg.model.vocab_cap);
    let (train, _) = encode_records(train_recs, &vocab, caps, "training");
    let (valid, _) = encode_records(valid_recs, &vocab, caps, "validation");
    let (test, test_records) = encode_records(test_recs, &vocab, caps, "test");
    Ok(LoadedData {
        vocab,
        train,
        valid,
        test,
        test_records,
    })
}

/// Fresh parameters from the run seed, or a checkpoint whose embedding table
/// must agree with the configured dimensions and the corpus vocabulary.
fn init_store(
    cfg: &RunConfig,
    vocab_size: usize,
    init_from: Option<&Path>,
) -> Result<ParamStore, CliError> {
    match init_from {
        Some(path) => {
            let store = ParamStore::load(path)?;
            let table = store
                .iter()
                .find(|(name, _)| name.as_str() == "embed.table")
                .map(|(_, p)| p.shape.clone())
                .ok_or_else(|| {
                    CliError::Usage(format!("{} has no embedding table", path.display()))
                })?;
            if table != [vocab_size, cfg.model.embed] {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was built for vocab x embed = {:?}, config wants [{}, {}]",
                    path.display(),
                    table,
                    vocab_size,
                    cfg.model.embed
                )));
            }
            Ok(store)
        }
        None => {
            let mut store = ParamStore::new();
            let mut rng = RunRng::new(cfg.seed, Stream::Init);
            register_params(&mut store, &cfg.model, vocab_size, &mut rng);
            Ok(store)
        }
    }
}

fn cmd_train(
    args: &ConfigArgs,
    init_from: Option<&Path>,
    only: Option<Phase>,
) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let data = load_data(&cfg)?;
    if data.train.is_empty() {
        return Err(CliError::Empty("the training split"));
    }
    if data.valid.is_empty() {
        return Err(CliError::Empty("the validation split"));
    }
    write_resolved(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let mut store = init_store(&cfg, data.vocab.len(), init_from)?;
    let transcript: Transcript = match only {
        None => alternate(
            &mut store,
            &cfg.model,
            &cfg.train,
            &data.train,
            &data.valid,
            &out_dir,
            cfg.seed,
        )?,
        Some(phase) => train_single_phase(
            &mut store,
            &cfg.model,
            &cfg.train,
            phase,
            &data.train,
            &data.valid,
            &out_dir,
            cfg.seed,
        )?,
    };
    for p in &transcript.phases {
        println!(
            "phase {} round {}: {} steps, val loss {:.4}{} -> {}",
            p.phase,
            p.round,
            p.steps,
            p.final_val,
            if p.stopped_early { " (early stop)" } else { "" },
            p.checkpoint.display()
        );
    }
    println!("final checkpoint: {}", transcript.final_checkpoint.display());
    Ok(())
}

/// One generation file line; field order is part of the artifact format.
#[derive(Serialize, Deserialize)]
struct GenRecord {
    context: String,
    document: String,
    response: String,
    generated: String,
}

fn parse_policy(s: &str) -> Result<MemoryPolicy, CliError> {
    MemoryPolicy::parse(s).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown policy `{s}` (expected base, teacher, or student)"
        ))
    })
}

fn cmd_generate(
    args: &ConfigArgs,
    checkpoint: Option<PathBuf>,
    policy: &str,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let policy = parse_policy(policy)?;
    let data = load_data(&cfg)?;
    if data.test.is_empty() {
        return Err(CliError::Empty("the test split"));
    }
    write_resolved(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let ckpt = checkpoint.unwrap_or_else(|| out_dir.join("model.ckpt"));
    let store = ParamStore::load(&ckpt)?;
    let b = batch(&data.test);
    let out_path =
        output.unwrap_or_else(|| out_dir.join(format!("generations_{}.jsonl", policy.name())));
    let mut w = BufWriter::new(File::create(&out_path)?);
    for i in 0..b.len() {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, |_| false);
        // One substream per record: order-independent and exactly repeatable.
        let mut rng = RunRng::for_unit(cfg.seed, Stream::Generate, i as u64);
        let ids = generate_for_sample(
            &mut tape,
            &bound,
            &cfg.model,
            &b,
            i,
            policy,
            cfg.train.variant,
            cfg.train.tau,
            cfg.top_k,
            cfg.model.max_resp,
            &mut rng,
        )?;
        let rec = &data.test_records[i];
        let line = GenRecord {
            context: rec.context.clone(),
            document: rec.document.clone(),
            response: rec.response.clone(),
            generated: detokenize(&data.vocab.decode(&ids)),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("wrote {} generations to {}", b.len(), out_path.display());
    Ok(())
}

fn read_generations(path: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let text = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: GenRecord =
            serde_json::from_str(&text).map_err(|e| DataError::BadRecord {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        records.push(EvalRecord::from_texts(
            &rec.document,
            &rec.context,
            &rec.response,
            &rec.generated,
        ));
    }
    Ok(records)
}

/// Plain-text results table: placeholders for the externally scored columns,
/// then the computed battery.
fn format_table(r: &MetricReport) -> String {
    let headers = [
        "NIST", "BLEU", "METEOR", "P", "R", "F1", "P_GT", "R_GT", "F1_GT", "Ent-4", "Dist-1",
        "Dist-2", "Len",
    ];
    let cells = [
        r.nist.map_or("-".to_string(), |v| format!("{v:.4}")),
        format!("{:.4}", r.bleu4),
        "-".to_string(),
        format!("{:.4}", r.grounding.precision),
        format!("{:.4}", r.grounding.recall),
        format!("{:.4}", r.grounding.f1),
        format!("{:.4}", r.grounding_gt.precision),
        format!("{:.4}", r.grounding_gt.recall),
        format!("{:.4}", r.grounding_gt.f1),
        format!("{:.4}", r.ent4),
        format!("{:.4}", r.dist1),
        format!("{:.4}", r.dist2),
        format!("{:.2}", r.mean_len),
    ];
    let mut head = String::new();
    let mut row = String::new();
    for (h, c) in headers.iter().zip(&cells) {
        let width = h.len().max(c.len()) + 2;
        head.push_str(&format!("{h:<width$}"));
        row.push_str(&format!("{c:<width$}"));
    }
    format!("{}\n{}\n", head.trim_end(), row.trim_end())
}

fn cmd_evaluate(
    args: &ConfigArgs,
    generations: &Path,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    write_resolved(&cfg)?;
    let records = read_generations(generations)?;
    if records.is_empty() {
        return Err(CliError::Empty("the generation file"));
    }
    let stop = match &cfg.stopword_file {
        Some(p) => StopwordSet::from_file(Path::new(p))?,
        None => StopwordSet::default(),
    };
    let rep = report(&records, &stop);
    let json_path = output.unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("metric_report.json"));
    let mut json = serde_json::to_string_pretty(&rep)?;
    json.push('\n');
    std::fs::write(&json_path, json)?;
    let table = format_table(&rep);
    std::fs::write(json_path.with_extension("txt"), &table)?;
    print!("{table}");
    println!("report written to {}", json_path.display());
    Ok(())
}

/// Attention inputs for one policy over the whole test split. Special ids
/// (padding and sequence markers) carry no content and are filtered out.
fn attention_samples(
    store: &ParamStore,
    cfg: &RunConfig,
    b: &Batch,
    test: &[Sample],
    policy: MemoryPolicy,
) -> Result<Vec<AttentionSample>, CliError> {
    let mut out = Vec::with_capacity(b.len());
    for i in 0..b.len() {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, store, |_| false);
        let mut rng = RunRng::for_unit(cfg.seed, Stream::Generate, i as u64);
        let mut off = DropoutMode::Off;
        let pair = encode_pair(
            &mut tape,
            &bound,
            cfg.model.embed,
            &b.doc.ids[i],
            &b.doc.mask[i],
            &b.ctx.ids[i],
            &b.ctx.mask[i],
            &mut off,
        )?;
        let resp_enc = if policy == MemoryPolicy::Teacher {
            Some(encode_response(
                &mut tape,
                &bound,
                &b.resp.ids[i],
                &b.resp.mask[i],
            )?)
        } else {
            None
        };
        let mem = eval_memory(
            &mut tape,
            &bound,
            &pair,
            resp_enc.as_ref(),
            policy,
            cfg.train.variant,
            cfg.train.tau,
            &mut rng,
        )?;
        let acc = accumulated_attention(tape.values(mem.a), &b.doc.mask[i]);
        let doc = &test[i].document;
        let (doc_ids, accumulated): (Vec<u32>, Vec<f64>) = doc
            .iter()
            .zip(&acc[..doc.len()])
            .filter(|(&id, _)| id >= cbr::FIRST_WORD_ID)
            .map(|(&id, &w)| (id, w))
            .unzip();
        let resp_ids: Vec<u32> = test[i]
            .response
            .iter()
            .copied()
            .filter(|&id| id >= cbr::FIRST_WORD_ID)
            .collect();
        out.push(AttentionSample {
            doc_ids,
            accumulated,
            resp_ids,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct AnalysisSection {
    policy: &'static str,
    rows: Vec<OverlapRow>,
}

fn cmd_analyze(
    args: &ConfigArgs,
    checkpoint: Option<PathBuf>,
    policy: &str,
) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let policy = parse_policy(policy)?;
    let data = load_data(&cfg)?;
    if data.test.is_empty() {
        return Err(CliError::Empty("the test split"));
    }
    write_resolved(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let ckpt = checkpoint.unwrap_or_else(|| out_dir.join("model.ckpt"));
    let store = ParamStore::load(&ckpt)?;

    // Score token sets with external vectors when provided, otherwise with
    // the model's own learned table.
    let (table, dim) = match &cfg.embedding_file {
        Some(path) => {
            let dim = cfg.model.embed;
            let map = load_embedding_file(Path::new(path), dim)?;
            let mut flat = vec![0.0; data.vocab.len() * dim];
            for id in 0..data.vocab.len() as u32 {
                if let Some(v) = map.get(data.vocab.token(id)) {
                    flat[id as usize * dim..(id as usize + 1) * dim].copy_from_slice(v);
                }
            }
            (flat, dim)
        }
        None => {
            let p = store.get("embed.table");
            (p.values.clone(), cfg.model.embed)
        }
    };

    let b = batch(&data.test);
    let ks = [10, 20];
    let mut sections = Vec::new();
    for pol in [MemoryPolicy::Base, policy] {
        let samples = attention_samples(&store, &cfg, &b, &data.test, pol)?;
        let rows = topk_token_overlap_analysis(&samples, EmbeddingView::new(&table, dim), &ks);
        sections.push(AnalysisSection {
            policy: pol.name(),
            rows,
        });
    }
    let mut json = serde_json::to_string_pretty(&sections)?;
    json.push('\n');
    let json_path = out_dir.join("attention_analysis.json");
    std::fs::write(&json_path, json)?;

    println!("{:<10}{:<6}{:<10}{:<10}", "policy", "K", "Emb-M", "Emb-B");
    for s in &sections {
        for row in &s.rows {
            println!(
                "{:<10}{:<6}{:<10.4}{:<10.4}",
                s.policy, row.k, row.emb_m, row.emb_b
            );
        }
    }
    println!("analysis written to {}", json_path.display());
    Ok(())
}

fn cmd_selfcheck(args: &ConfigArgs, fast: bool) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    write_resolved(&cfg)?;
    let reports = if fast {
        vec![
            selfcheck::op_gradient_check(1e-4, 1e-4),
            selfcheck::composite_gradient_check(2, 1e-4, 1e-4),
            selfcheck::weight_matrix_invariants(100, 11),
            selfcheck::reduction_identity(2),
            selfcheck::relaxation_statistics(13),
        ]
    } else {
        selfcheck::run_all()
    };
    let mut ok = true;
    for r in &reports {
        println!("{}", r.line());
        ok &= r.passed;
    }
    if ok {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::ChecksFailed)
    }
}
