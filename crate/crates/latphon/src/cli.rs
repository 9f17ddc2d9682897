//! Command-line surface: prepare, train, eval, predict, bench, plot-data.
//!
//! Every failure maps to a stable exit code:
//! 1 generic, 2 missing language file, 3 insufficient corpus data,
//! 4 non-finite loss, 5 vocabulary mismatch, 6 unknown language code,
//! 7 too few benchmark words.

use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::{write_atomic, KvConfig};
use crate::corpus::{self, CorpusError, LanguageId, NormalizationPolicy, WordEntry};
use crate::eval::{self, EvalError, EvalSubset, ParetoRow};
use crate::model::{CheckpointManifest, Model, ModelConfig};
use crate::train::{self, TrainConfig, TrainError};
use crate::vocab::{self, VocabPair};

pub const EXIT_MISSING_LANG_FILE: i32 = 2;
pub const EXIT_INSUFFICIENT_DATA: i32 = 3;
pub const EXIT_NON_FINITE_LOSS: i32 = 4;
pub const EXIT_VOCAB_MISMATCH: i32 = 5;
pub const EXIT_UNKNOWN_LANG: i32 = 6;
pub const EXIT_TOO_FEW_WORDS: i32 = 7;

/// Grapheme-to-phoneme toolkit for six Latin-script languages.
#[derive(Debug, Parser)]
#[command(name = "latphon", version, about)]
pub struct Cli {
    /// Worker threads; only the deterministic single-threaded mode exists.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the six dictionary files, split them, and build vocabularies.
    Prepare(PrepareArgs),
    /// Train a transducer against a prepared split.
    Train(TrainArgs),
    /// Score a checkpoint on held-out data, optionally against a second one.
    Eval(EvalArgs),
    /// Phonemize words from the command line or standard input.
    Predict(PredictArgs),
    /// Measure single-word decoding throughput.
    Bench(BenchArgs),
    /// Emit accuracy-versus-size plot data from evaluation summaries.
    PlotData(PlotDataArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory holding en.txt, es.txt, fr.txt, it.txt, pt.txt, ro.txt.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Output directory for manifest.txt, vocab.txt, stats.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Keep primary/secondary stress marks as phoneme tokens.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub keep_stress: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split manifest from `prepare` (file key: data.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Vocabulary from `prepare` (file key: data.vocab).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output directory for best.ckpt and metrics.jsonl (file key: out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Desk-scale preset: small model, 2k steps.
    #[arg(long)]
    pub toy: bool,
    /// Full-scale preset: the 7.5M-parameter configuration trained for
    /// 100k steps. This is already the default; the flag makes it explicit.
    #[arg(long, conflicts_with = "toy")]
    pub reference: bool,
    /// Drop the language-ID token from every source sequence.
    #[arg(long)]
    pub ablate_no_langid: bool,
    /// Language sampling temperature; 1 keeps proportional sampling.
    #[arg(long)]
    pub lang_temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Held-out subset to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Second checkpoint; adds a delta report with significance tests
    /// (delta = compare minus checkpoint).
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Output directory for report files.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Language code: en, es, fr, it, pt, ro.
    #[arg(long)]
    pub lang: String,
    /// Words to phonemize; use --stdin to stream instead.
    pub words: Vec<String>,
    /// Read words from standard input, one per line.
    #[arg(long)]
    pub stdin: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Word list: one `word<TAB>lang` per line.
    #[arg(long)]
    pub words_file: PathBuf,
    /// Words to time (taken from the front of the file).
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value = "cpu")]
    pub device: String,
    /// Output directory for bench.txt and bench.jsonl.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotDataArgs {
    /// summary.json files produced by `eval`.
    #[arg(long, num_args = 0..)]
    pub reports: Vec<PathBuf>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    fn general(message: impl std::fmt::Display) -> Self {
        CliError::new(1, message.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

macro_rules! impl_from_general {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::general(e)
            }
        }
    )*};
}
impl_from_general!(std::io::Error, crate::config::ConfigError, crate::model::ModelError);

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InsufficientData { .. } => {
                CliError::new(EXIT_INSUFFICIENT_DATA, e.to_string())
            }
            CorpusError::UnknownLanguage(_) => CliError::new(EXIT_UNKNOWN_LANG, e.to_string()),
            other => CliError::general(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => {
                CliError::new(EXIT_NON_FINITE_LOSS, e.to_string())
            }
            TrainError::Eval(inner) => CliError::from(inner),
            other => CliError::general(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::VocabMismatch { .. } => {
                CliError::new(EXIT_VOCAB_MISMATCH, e.to_string())
            }
            EvalError::TooFewWords { .. } => CliError::new(EXIT_TOO_FEW_WORDS, e.to_string()),
            other => CliError::general(other),
        }
    }
}

/// Parse argv and run; returns the process exit code.
pub fn main_entry<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap handles --help/--version; usage errors exit 1.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads != 1 {
        return Err(CliError::general(
            "only the deterministic single-threaded mode is implemented; use --threads 1",
        ));
    }
    match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
        Command::PlotData(a) => cmd_plot_data(a),
    }
}

/// Everything that determined a training run; embedded in the checkpoint
/// manifest and written beside it for provenance.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub vocab: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub toy: bool,
    pub ablate_no_langid: bool,
    pub lang_temperature: Option<f64>,
    pub threads: usize,
}

fn cmd_prepare(a: PrepareArgs) -> Result<(), CliError> {
    let policy = NormalizationPolicy { keep_stress: a.keep_stress, ..Default::default() };
    let mut entries: Vec<WordEntry> = Vec::new();
    for lang in LanguageId::ALL {
        let path = a.data_dir.join(format!("{}.txt", lang.code()));
        if !path.is_file() {
            return Err(CliError::new(
                EXIT_MISSING_LANG_FILE,
                format!("missing language file {}", path.display()),
            ));
        }
        entries.extend(corpus::load_language_file(&path, lang, &policy)?);
    }
    let split = corpus::split_corpus(entries, a.seed, &policy)?;
    let vocab = vocab::build_vocabs(&split.train_all())
        .map_err(|e| CliError::general(format!("building vocabulary: {e}")))?;

    std::fs::create_dir_all(&a.out)?;
    let mut manifest_buf = Vec::new();
    corpus::write_manifest(&split, &mut manifest_buf)?;
    write_atomic(&a.out.join("manifest.txt"), &manifest_buf)?;
    let mut vocab_buf = Vec::new();
    vocab::write_vocab(&vocab, &mut vocab_buf)?;
    write_atomic(&a.out.join("vocab.txt"), &vocab_buf)?;
    let stats = corpus::corpus_stats(&split).render_text();
    write_atomic(&a.out.join("stats.txt"), stats.as_bytes())?;
    print!("{stats}");
    println!(
        "wrote {}, vocab ({} graphemes, {} phonemes), stats",
        a.out.join("manifest.txt").display(),
        vocab.n_content_graphemes(),
        vocab.n_content_phonemes(),
    );
    Ok(())
}

/// Merge precedence for train settings: preset defaults, then config file,
/// then command-line flags.
fn merge_train_config(
    file: &KvConfig,
    a: &TrainArgs,
    vocab: &VocabPair,
) -> Result<(ModelConfig, TrainConfig), CliError> {
    let mut model = if a.toy {
        ModelConfig::toy(vocab.n_content_graphemes(), vocab.n_content_phonemes())
    } else {
        ModelConfig {
            grapheme_vocab_size: vocab.n_content_graphemes(),
            phoneme_vocab_size: vocab.n_content_phonemes(),
            ..ModelConfig::reference()
        }
    };
    let mut train = if a.toy { TrainConfig::toy() } else { TrainConfig::default() };

    if let Some(v) = file.get_usize("model.d_model")? {
        model.d_model = v;
    }
    if let Some(v) = file.get_usize("model.n_heads")? {
        model.n_heads = v;
    }
    if let Some(v) = file.get_usize("model.n_enc_layers")? {
        model.n_enc_layers = v;
    }
    if let Some(v) = file.get_usize("model.n_dec_layers")? {
        model.n_dec_layers = v;
    }
    if let Some(v) = file.get_usize("model.d_ffn")? {
        model.d_ffn = v;
    }
    if let Some(v) = file.get_f64("model.dropout")? {
        model.dropout = v;
    }
    if let Some(v) = file.get_f64("model.rope_theta")? {
        model.rope_theta = v;
    }
    if let Some(v) = file.get_usize("model.max_len")? {
        model.max_len = v;
    }
    if let Some(v) = file.get_u64("train.total_steps")? {
        train.total_steps = v;
    }
    if let Some(v) = file.get_u64("train.warmup_steps")? {
        train.warmup_steps = v;
    }
    if let Some(v) = file.get_f64("train.peak_lr")? {
        train.peak_lr = v;
    }
    if let Some(v) = file.get_usize("train.batch_size")? {
        train.batch_size = v;
    }
    if let Some(v) = file.get_f64("train.beta1")? {
        train.beta1 = v;
    }
    if let Some(v) = file.get_f64("train.beta2")? {
        train.beta2 = v;
    }
    if let Some(v) = file.get_f64("train.eps")? {
        train.eps = v;
    }
    if let Some(v) = file.get_f64("train.weight_decay")? {
        train.weight_decay = v;
    }
    if let Some(v) = file.get_f64("train.grad_clip_norm")? {
        train.grad_clip_norm = v;
    }
    if let Some(v) = file.get_u64("train.val_every")? {
        train.val_every = v;
    }
    if let Some(v) = file.get_u64("train.seed")? {
        train.seed = v;
    }
    if let Some(seed) = a.seed {
        train.seed = seed;
    }
    if a.ablate_no_langid {
        model.use_lang_id = false;
    }
    Ok((model, train))
}

fn require_path(
    flag: Option<&Path>,
    file: &KvConfig,
    key: &str,
    what: &str,
) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| file.get(key).map(PathBuf::from))
        .ok_or_else(|| {
            CliError::general(format!("{what} required: pass --{what} or set {key}"))
        })
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file = match &a.config {
        Some(path) => KvConfig::read(path)?,
        None => KvConfig::new(),
    };
    let manifest_path = require_path(a.manifest.as_deref(), &file, "data.manifest", "manifest")?;
    let vocab_path = require_path(a.vocab.as_deref(), &file, "data.vocab", "vocab")?;
    let out_dir = require_path(a.out.as_deref(), &file, "out_dir", "out")?;
    let lang_temperature = match a.lang_temperature {
        Some(t) => Some(t),
        None => file.get_f64("lang_temperature")?,
    };

    let split = corpus::read_manifest_file(&manifest_path)?;
    let vocab = vocab::read_vocab_file(&vocab_path)
        .map_err(|e| CliError::general(format!("reading vocabulary: {e}")))?;
    let (model_cfg, train_cfg) = merge_train_config(&file, &a, &vocab)?;

    let run_config = RunConfig {
        manifest: manifest_path,
        vocab: vocab_path,
        out_dir: out_dir.clone(),
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        toy: a.toy,
        ablate_no_langid: a.ablate_no_langid,
        lang_temperature,
        threads: 1,
    };
    let run_config_json =
        serde_json::to_value(&run_config).map_err(CliError::general)?;
    std::fs::create_dir_all(&out_dir)?;
    write_atomic(
        &out_dir.join("run_config.json"),
        serde_json::to_string_pretty(&run_config_json)
            .map_err(CliError::general)?
            .as_bytes(),
    )?;

    let report = train::run_training(
        &split,
        &vocab,
        &model_cfg,
        &train_cfg,
        &out_dir,
        Some(run_config_json),
        lang_temperature,
    )?;
    println!(
        "trained {} steps, final loss {:.4}",
        report.steps_run, report.final_train_loss
    );
    match report.best {
        Some((step, per)) => {
            println!("best checkpoint: step {step}, mean val PER {per:.2}%")
        }
        None => println!("no validation data; kept the final model"),
    }
    println!("checkpoint: {}", report.checkpoint_path.display());
    println!("metrics:    {}", report.metrics_path.display());
    Ok(())
}

fn load_checkpoint_with_vocab(
    checkpoint: &Path,
    vocab_path: &Path,
) -> Result<(Model<f32>, CheckpointManifest, VocabPair), CliError> {
    let (model, manifest) = Model::load_checkpoint(checkpoint)?;
    let vocab = vocab::read_vocab_file(vocab_path)
        .map_err(|e| CliError::general(format!("reading vocabulary: {e}")))?;
    if vocab.digest() != manifest.vocab_sha256 {
        return Err(CliError::from(EvalError::VocabMismatch {
            checkpoint: manifest.vocab_sha256.clone(),
            loaded: vocab.digest(),
        }));
    }
    Ok((model, manifest, vocab))
}

fn parse_subset(s: &str) -> Result<EvalSubset, CliError> {
    match s {
        "test" => Ok(EvalSubset::Test),
        "val" => Ok(EvalSubset::Val),
        other => Err(CliError::general(format!("--split must be test or val, got {other}"))),
    }
}

fn file_size_mb(path: &Path) -> Result<f64, CliError> {
    Ok(std::fs::metadata(path)?.len() as f64 / (1024.0 * 1024.0))
}

fn system_name(checkpoint: &Path, manifest: &CheckpointManifest) -> String {
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "latphon".into());
    if manifest.config.use_lang_id {
        stem
    } else {
        format!("{stem}-nolangid")
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let subset = parse_subset(&a.split)?;
    let (model, manifest, vocab) = load_checkpoint_with_vocab(&a.checkpoint, &a.vocab)?;
    let split = corpus::read_manifest_file(&a.manifest)?;
    let report = eval::evaluate(&model, &manifest.vocab_sha256, &vocab, &split, subset)?;

    std::fs::create_dir_all(&a.out)?;
    let table = eval::render_eval_table(&report);
    print!("{table}");
    write_atomic(&a.out.join("report.txt"), table.as_bytes())?;
    write_atomic(
        &a.out.join("report.jsonl"),
        eval::eval_records_jsonl(&report).as_bytes(),
    )?;
    let summary = json!({
        "name": system_name(&a.checkpoint, &manifest),
        "params": report.model_params,
        "mean_per_pct": report.mean_per_pct,
        "footprint_mb": file_size_mb(&a.checkpoint)?,
        "subset": report.subset.to_string(),
        "vocab_sha256": report.vocab_sha256,
        "split_digest": report.split_digest,
        "run_config": manifest.run_config,
    });
    write_atomic(
        &a.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(CliError::general)?
            .as_bytes(),
    )?;

    if let Some(other_path) = &a.compare {
        let (other, other_manifest, _) = load_checkpoint_with_vocab(other_path, &a.vocab)?;
        let other_report =
            eval::evaluate(&other, &other_manifest.vocab_sha256, &vocab, &split, subset)?;
        let ablation = eval::ablation_compare(&report, &other_report)?;
        let atable = eval::render_ablation_table(&ablation);
        print!("{atable}");
        write_atomic(&a.out.join("ablation.txt"), atable.as_bytes())?;
        let mut lines = String::new();
        for row in &ablation.rows {
            lines.push_str(
                &json!({
                    "lang": row.lang.code(),
                    "per_base": row.per_with,
                    "per_compare": row.per_without,
                    "delta": row.delta,
                    "z": row.sig.z,
                    "p_one_sided": row.sig.p_one_sided,
                    "degenerate_pool": row.sig.degenerate_pool,
                })
                .to_string(),
            );
            lines.push('\n');
        }
        write_atomic(&a.out.join("ablation.jsonl"), lines.as_bytes())?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let lang = LanguageId::from_code(&a.lang)
        .map_err(|e| CliError::new(EXIT_UNKNOWN_LANG, e.to_string()))?;
    let (model, _, vocab) = load_checkpoint_with_vocab(&a.checkpoint, &a.vocab)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut emit = |word: &str| -> Result<(), CliError> {
        let phones = eval::greedy_decode(&model, word, lang, &vocab, None)?;
        writeln!(out, "{word}\t/{}/", phones.concat())?;
        Ok(())
    };
    for word in &a.words {
        emit(word)?;
    }
    if a.stdin {
        for line in std::io::stdin().lock().lines() {
            let line = line?;
            let word = line.trim();
            if !word.is_empty() {
                emit(word)?;
            }
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let (model, _, vocab) = load_checkpoint_with_vocab(&a.checkpoint, &a.vocab)?;
    let text = std::fs::read_to_string(&a.words_file)?;
    let mut words = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, lang) = line.split_once('\t').ok_or_else(|| {
            CliError::general(format!(
                "{}:{}: expected `word<TAB>lang`",
                a.words_file.display(),
                i + 1
            ))
        })?;
        let lang = LanguageId::from_code(lang.trim())
            .map_err(|e| CliError::new(EXIT_UNKNOWN_LANG, e.to_string()))?;
        words.push((word.to_string(), lang));
        if words.len() == a.n {
            break;
        }
    }
    let report = eval::throughput_bench(&model, &vocab, &words, 20, &a.device)?;
    let table = eval::render_throughput_table(&report);
    print!("{table}");
    std::fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("bench.txt"), table.as_bytes())?;
    let record = json!({
        "device": report.device,
        "n_words": report.n_words,
        "words_per_s": report.words_per_s,
        "chars_per_s": report.chars_per_s,
        "wall_seconds": report.wall_seconds,
    });
    write_atomic(&a.out.join("bench.jsonl"), format!("{record}\n").as_bytes())?;
    Ok(())
}

fn cmd_plot_data(a: PlotDataArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in &a.reports {
        let text = std::fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            CliError::general(format!("{}: not a summary file: {e}", path.display()))
        })?;
        let field = |k: &str| -> Result<f64, CliError> {
            v[k].as_f64().ok_or_else(|| {
                CliError::general(format!("{}: missing numeric `{k}`", path.display()))
            })
        };
        rows.push(ParetoRow {
            name: v["name"].as_str().unwrap_or("latphon").to_string(),
            params: Some(field("params")?),
            per_pct: field("mean_per_pct")?,
            footprint_mb: Some(field("footprint_mb")?),
        });
    }
    let csv = eval::pareto_plot_data(&rows);
    match &a.out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}
