//! `softmcl` — reproducible sentiment-aware contrastive pre-training
//! experiments on synthetic or E-ANEW/EmoBank-shaped data.
//!
//! Exit codes: 0 success, 1 usage error, 2 missing/invalid input,
//! 3 numerical failure, 4 incompatibility.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use softmcl::affect::{load_corpus, load_lexicon, AffectError, Lexicon, Vocabulary};
use softmcl::checkpoint::CheckpointError;
use softmcl::config::{ConfigError, RunConfig};
use softmcl::experiments::{
    self, compare_to_csv, prepare_data, sweep_rows_to_csv, sweep_to_rows, ExperimentError,
    SweepParam,
};
use softmcl::metrics::{reports_to_csv, MetricReport, MetricsError};
use softmcl::synth::{generate, SynthConfig, SynthError};
use softmcl::trainer::{
    load_encoder_from_checkpoint, log_to_csv, LossMode, TrainError, Trainer,
};

#[derive(Parser)]
#[command(name = "softmcl", version, about = "Soft momentum contrastive pre-training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an encoder, writing logs, vocabulary, and a checkpoint.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint: embedding probe and collapse diagnostics.
    Eval(EvalArgs),
    /// Sweep one hyperparameter over a value list (one sub-run per value).
    Sweep(SweepArgs),
    /// Train soft/hard/selfsup objectives on identical data and compare
    /// their embedding geometry.
    CompareLosses(CompareArgs),
    /// Export sentence (or word) embeddings with valences as CSV.
    ExportEmbeddings(ExportArgs),
    /// Generate a synthetic lexicon and valence-annotated corpus.
    GenSynth(GenSynthArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Valence lexicon TSV (word<TAB>valence[<TAB>...]).
    #[arg(long)]
    lexicon: PathBuf,
    /// Word-level corpus JSONL ({"text": ..., "valence"?: ...}).
    #[arg(long)]
    word_corpus: PathBuf,
    /// Sentence-level corpus JSONL with valences.
    #[arg(long)]
    sent_corpus: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for train_log.csv, vocab.tsv, checkpoint.smcl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Train until this step (defaults to total_steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file saved by pretrain.
    #[arg(long)]
    vocab: PathBuf,
    /// Sentence corpus JSONL with valences.
    #[arg(long)]
    corpus: PathBuf,
    /// Optional lexicon for token-level valences.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Output CSV path (metric,value,n).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Which hyperparameter to sweep: tau | mu | queue | lambda.
    #[arg(long)]
    param: String,
    /// Comma-separated value list, e.g. 0.05,0.1,0.5,1.0.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Steps per sub-run (defaults to total_steps).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated modes (default: soft,hard,selfsup).
    #[arg(long, default_value = "soft,hard,selfsup")]
    modes: String,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Steps per run (defaults to total_steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Valence threshold separating polarities in hard mode.
    #[arg(long)]
    polarity_threshold: Option<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Output CSV (id,valence,dim0..dimD).
    #[arg(long)]
    out: PathBuf,
    /// sentence: one row per corpus line; word: one row per affective token.
    #[arg(long, default_value = "sentence")]
    level: String,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Number of sentences (at least 10).
    #[arg(long)]
    n: usize,
    /// Vocabulary size.
    #[arg(long)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for lexicon.tsv and corpus.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Input(String),
    Numerical(String),
    Incompatible(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Incompatible(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Input(m)
            | CliError::Numerical(m)
            | CliError::Incompatible(m) => m,
        }
    }
}

impl From<AffectError> for CliError {
    fn from(e: AffectError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Input(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => CliError::Input(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Input(e.to_string()),
            _ => CliError::Incompatible(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Incompatible(_) => CliError::Incompatible(e.to_string()),
            TrainError::Checkpoint(inner) => inner.into(),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Data(_) => CliError::Input(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Affect(inner) => inner.into(),
            ExperimentError::Train(inner) => inner.into(),
            ExperimentError::Metrics(inner) => inner.into(),
            ExperimentError::Setup(m) => CliError::Usage(m),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("io error on {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::CompareLosses(args) => cmd_compare(args),
        Command::ExportEmbeddings(args) => cmd_export(args),
        Command::GenSynth(args) => cmd_gen_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Thread pool sized by SOFTMCL_THREADS (defaults to the rayon default).
fn run_in_pool<T: Send>(
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    let threads = std::env::var("SOFTMCL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    match threads {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("SOFTMCL_THREADS: {e}")))?;
            pool.install(f)
        }
        _ => f(),
    }
}

struct LoadedData {
    lexicon: Lexicon,
    word_corpus: Vec<softmcl::AnnotatedSentence>,
    sent_corpus: Vec<softmcl::AnnotatedSentence>,
}

fn load_data(args: &DataArgs) -> Result<LoadedData, CliError> {
    Ok(LoadedData {
        lexicon: load_lexicon(&args.lexicon)?,
        word_corpus: load_corpus(&args.word_corpus)?,
        sent_corpus: load_corpus(&args.sent_corpus)?,
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| io_err(path, e))
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let loaded = load_data(&args.data)?;
    let data = prepare_data(
        &loaded.lexicon,
        &loaded.word_corpus,
        &loaded.sent_corpus,
        &cfg,
    )?;
    let until = args.steps.unwrap_or(cfg.train.total_steps);
    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(
            ckpt,
            cfg.train.clone(),
            data.vocab.clone(),
            data.word_tokens.clone(),
            data.sent_tokens.clone(),
        )?,
        None => Trainer::new(
            cfg.encoder_config(data.vocab.len()),
            cfg.train.clone(),
            data.vocab.clone(),
            data.word_tokens.clone(),
            data.sent_tokens.clone(),
        )?,
    };
    let records = trainer.run(until, |r| {
        if r.step % 100 == 0 {
            eprintln!(
                "step {} total {:.4} mlm {:.4} word {:.4} sent {:.4}",
                r.step, r.total, r.mlm, r.word_mcl, r.sent_mcl
            );
        }
    })?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    write_file(&args.out_dir.join("train_log.csv"), &log_to_csv(&records))?;
    write_file(&args.out_dir.join("config.txt"), &cfg.render())?;
    data.vocab
        .save(args.out_dir.join("vocab.tsv"))
        .map_err(CliError::from)?;
    trainer.save_checkpoint(args.out_dir.join("checkpoint.smcl"))?;
    println!(
        "trained to step {} ({} new records); outputs in {}",
        trainer.step_count(),
        records.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn load_checkpoint_with_vocab(
    checkpoint: &Path,
    vocab_path: &Path,
) -> Result<(softmcl::Encoder, softmcl::EncoderParams, Vocabulary), CliError> {
    let (encoder, params, stored_hash) = load_encoder_from_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    if vocab.hash() != stored_hash {
        return Err(CliError::Incompatible(format!(
            "vocabulary {} does not match the checkpoint's vocabulary hash",
            vocab_path.display()
        )));
    }
    Ok((encoder, params, vocab))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (encoder, params, vocab) = load_checkpoint_with_vocab(&args.checkpoint, &args.vocab)?;
    let lexicon = match &args.lexicon {
        Some(path) => load_lexicon(path)?,
        None => Lexicon::empty("(none)"),
    };
    let corpus = load_corpus(&args.corpus)?;
    let max_len = encoder.config().max_len;
    let tokens: Vec<_> = corpus
        .iter()
        .map(|s| softmcl::affect::tokenize(s, &vocab, &lexicon, max_len))
        .collect();
    let summary = experiments::evaluate(&encoder, &params, &tokens)?;
    let mut reports = summary.probe.clone();
    reports.push(MetricReport::new(
        "uniformity",
        summary.diagnostics.uniformity,
        summary.n,
    ));
    if let Some(a) = summary.diagnostics.alignment {
        reports.push(MetricReport::new("alignment", a, summary.n));
    }
    if let Some(c) = summary.diagnostics.valence_rank_corr {
        reports.push(MetricReport::new("valence_rank_corr", c, summary.n));
    }
    write_file(&args.out, &reports_to_csv(&reports))?;
    println!("wrote {} metrics to {}", reports.len(), args.out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let param: SweepParam = args
        .param
        .parse()
        .map_err(CliError::Usage)?;
    let values: Vec<f64> = args
        .values
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad sweep value {s:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("empty sweep value list".into()));
    }
    let loaded = load_data(&args.data)?;
    let data = prepare_data(
        &loaded.lexicon,
        &loaded.word_corpus,
        &loaded.sent_corpus,
        &cfg,
    )?;
    let steps = args.steps.unwrap_or(cfg.train.total_steps);
    let runs = run_in_pool(|| {
        experiments::sweep(&cfg, &data, param, &values, steps).map_err(CliError::from)
    })?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    for run in &runs {
        let dir = args.out_dir.join(format!("run_{}_{}", param.as_str(), run.value));
        write_file(&dir.join("train_log.csv"), &log_to_csv(&run.records))?;
    }
    let rows = sweep_to_rows(param, &runs);
    write_file(&args.out_dir.join("sweep.csv"), &sweep_rows_to_csv(&rows))?;
    println!(
        "swept {} over {} values; results in {}",
        param.as_str(),
        runs.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn parse_modes(s: &str) -> Result<Vec<LossMode>, CliError> {
    let modes: Vec<LossMode> = s
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.trim().parse::<LossMode>().map_err(CliError::Usage))
        .collect::<Result<_, _>>()?;
    if modes.is_empty() {
        return Err(CliError::Usage("no loss modes given".into()));
    }
    Ok(modes)
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let mut cfg = args.config.resolve()?;
    if let Some(t) = args.polarity_threshold {
        cfg.train.polarity_threshold = t;
    }
    let modes = parse_modes(&args.modes)?;
    let loaded = load_data(&args.data)?;
    let steps = args.steps.unwrap_or(cfg.train.total_steps);
    let runs = run_in_pool(|| {
        experiments::compare_losses(
            &cfg,
            &loaded.lexicon,
            &loaded.word_corpus,
            &loaded.sent_corpus,
            &modes,
            steps,
        )
        .map_err(CliError::from)
    })?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    for run in &runs {
        let dir = args.out_dir.join(run.mode.as_str());
        write_file(&dir.join("train_log.csv"), &log_to_csv(&run.records))?;
        let mut reports = run.summary.probe.clone();
        reports.push(MetricReport::new(
            "uniformity",
            run.summary.diagnostics.uniformity,
            run.summary.n,
        ));
        if let Some(a) = run.summary.diagnostics.alignment {
            reports.push(MetricReport::new("alignment", a, run.summary.n));
        }
        if let Some(c) = run.summary.diagnostics.valence_rank_corr {
            reports.push(MetricReport::new("valence_rank_corr", c, run.summary.n));
        }
        write_file(&dir.join("diagnostics.csv"), &reports_to_csv(&reports))?;
    }
    write_file(&args.out_dir.join("compare.csv"), &compare_to_csv(&runs))?;
    println!(
        "compared {} modes; results in {}",
        runs.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let (encoder, params, vocab) = load_checkpoint_with_vocab(&args.checkpoint, &args.vocab)?;
    let lexicon = match &args.lexicon {
        Some(path) => load_lexicon(path)?,
        None => Lexicon::empty("(none)"),
    };
    let corpus = load_corpus(&args.corpus)?;
    let max_len = encoder.config().max_len;
    let tokens: Vec<_> = corpus
        .iter()
        .map(|s| softmcl::affect::tokenize(s, &vocab, &lexicon, max_len))
        .collect();
    let dim = encoder.config().hidden_dim;
    let mut out = String::from("id,valence");
    for d in 0..dim {
        out.push_str(&format!(",dim{d}"));
    }
    out.push('\n');
    match args.level.as_str() {
        "sentence" => {
            for (chunk_start, chunk) in tokens.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
                let tape = softmcl::autodiff::Tape::new();
                let pvars = params.register_const(&tape);
                let ids: Vec<Vec<u32>> = chunk.iter().map(|s| s.token_ids.clone()).collect();
                let encoded = encoder
                    .encode(&tape, &pvars, &ids)
                    .map_err(TrainError::from)?;
                let cls = encoded.cls.value();
                for (i, sent) in chunk.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{}",
                        chunk_start + i,
                        sent.token_valences[0].value()
                    ));
                    for v in cls.row(i).map_err(TrainError::from)? {
                        out.push_str(&format!(",{v}"));
                    }
                    out.push('\n');
                }
            }
        }
        "word" => {
            for (s_idx, chunk) in tokens.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
                let tape = softmcl::autodiff::Tape::new();
                let pvars = params.register_const(&tape);
                let ids: Vec<Vec<u32>> = chunk.iter().map(|s| s.token_ids.clone()).collect();
                let encoded = encoder
                    .encode(&tape, &pvars, &ids)
                    .map_err(TrainError::from)?;
                for (i, sent) in chunk.iter().enumerate() {
                    let hidden = encoded.sentences[i].value();
                    for (p, valence) in sent.token_valences.iter().enumerate().skip(1) {
                        if valence.is_sentinel() {
                            continue;
                        }
                        out.push_str(&format!("{}:{},{}", s_idx + i, p, valence.value()));
                        for v in hidden.row(p).map_err(TrainError::from)? {
                            out.push_str(&format!(",{v}"));
                        }
                        out.push('\n');
                    }
                }
            }
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown --level {other:?} (sentence|word)"
            )))
        }
    }
    write_file(&args.out, &out)?;
    println!("wrote embeddings to {}", args.out.display());
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), CliError> {
    let data = generate(&SynthConfig::new(args.n, args.vocab, args.seed))?;
    let (lex_path, corpus_path) = data.write_to(&args.out)?;
    println!("wrote {lex_path} and {corpus_path}");
    Ok(())
}
