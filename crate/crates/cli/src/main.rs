//! `hiercrf` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure. Set `RUST_LOG` to change log verbosity (default `info`).

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiercrf::corpus::{load_corpus, synth_corpus, Batch, Corpus, LabelMap, Split, SynthScheme, SynthSizes};
use hiercrf::fsutil::write_atomic;
use hiercrf::model::Tagger;
use hiercrf::train::{ablate, build_model, evaluate, predictions_tsv, train, StopReason, TrainConfig};
use hiercrf::Scalar;

use config::{echo_sizes, synth_sizes, ConfigError, Precision, RunConfig, Settings};

#[derive(Parser)]
#[command(name = "hiercrf", version, about = "Hierarchical Bi-LSTM-CRF dialogue-act tagger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and history.
    Train(Common),
    /// Score a checkpoint on a labeled corpus.
    Eval(Scoring),
    /// Write per-utterance predictions of a checkpoint.
    Predict(Scoring),
    /// Train and test all six variant × classifier cells.
    Ablate(Common),
    /// Finite-difference check of the full model at toy size.
    Gradcheck(Common),
    /// Write a synthetic corpus file.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (output file for `synth`).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct Scoring {
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_parser = parse_scheme)]
    scheme: SynthScheme,
    #[command(flatten)]
    common: Common,
}

fn parse_scheme(s: &str) -> Result<SynthScheme, String> {
    s.parse().map_err(|e: hiercrf::Error| e.to_string())
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<hiercrf::Error> for Failure {
    fn from(e: hiercrf::Error) -> Self {
        use hiercrf::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::InvalidArgument(_) => Failure::Usage(msg),
            E::Parse { .. } | E::Data(_) | E::Io(_) | E::Json(_) => Failure::Data(msg),
            E::NonFinite(_) | E::Shape { .. } => Failure::Numeric(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

macro_rules! dispatch {
    ($rc:expr, $f:ident) => {
        match $rc.precision {
            Precision::F32 => $f::<f32>(&$rc),
            Precision::F64 => $f::<f64>(&$rc),
        }
    };
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(c) => run_config(&c, TrainConfig::default()).and_then(|rc| dispatch!(rc, cmd_train)),
        Command::Ablate(c) => run_config(&c, TrainConfig::default()).and_then(|rc| dispatch!(rc, cmd_ablate)),
        Command::Gradcheck(c) => run_config(&c, gradcheck_base()).and_then(|rc| dispatch!(rc, cmd_gradcheck)),
        Command::Eval(s) => scoring(&s).and_then(|p| match p {
            Precision::F32 => cmd_eval::<f32>(&s),
            Precision::F64 => cmd_eval::<f64>(&s),
        }),
        Command::Predict(s) => scoring(&s).and_then(|p| match p {
            Precision::F32 => cmd_predict::<f32>(&s),
            Precision::F64 => cmd_predict::<f64>(&s),
        }),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn settings(c: &Common) -> Result<Settings, Failure> {
    let mut s = match &c.config {
        Some(p) => Settings::parse_file(p)?,
        None => Settings::default(),
    };
    for pair in &c.set {
        s.set_pair(pair)?;
    }
    Ok(s)
}

fn run_config(c: &Common, base: TrainConfig) -> Result<RunConfig, Failure> {
    let mut s = settings(c)?;
    if let Some(seed) = c.seed {
        s.set("seed", &seed.to_string());
    }
    if let Some(out) = &c.out {
        s.set("out", &out.display().to_string());
    }
    Ok(RunConfig::from_settings(base, &s)?)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn load(path: &Path, split: Split) -> Result<Corpus, Failure> {
    let c = load_corpus(path, split)?;
    if c.is_empty() {
        return Err(Failure::Data(format!("{}: no conversations", path.display())));
    }
    Ok(c)
}

fn label_map(rc: &RunConfig) -> Result<Option<LabelMap>, Failure> {
    Ok(rc.path("labels").map(LabelMap::load).transpose()?)
}

fn cmd_train<T: Scalar>(rc: &RunConfig) -> Outcome {
    let out = rc.require("out")?;
    let cfg = &rc.train;
    let train_set = load(rc.require("train")?, Split::Train)?;
    let valid = load(rc.require("valid")?, Split::Valid)?;
    let test = rc.path("test").map(|p| load(p, Split::Test)).transpose()?;
    let mut tagger = build_model::<T>(cfg, &train_set, label_map(rc)?, rc.path("embeddings"))?;
    let (tr, va) = (tagger.encode(&train_set)?, tagger.encode(&valid)?);
    let te = test.as_ref().map(|t| tagger.encode(t)).transpose()?;
    let outcome = train(&mut tagger, &tr, &va, cfg)?;
    let test_eval = te.as_ref().map(|te| evaluate(&tagger, te)).transpose()?;

    std::fs::create_dir_all(out).map_err(hiercrf::Error::from)?;
    tagger.save(out.join("checkpoint"))?;
    outcome.history.save(out.join("history.tsv"))?;
    if let Some(ev) = &test_eval {
        write_text(&out.join("test_confusion.csv"), &ev.metrics.to_csv(false))?;
    }
    write_text(&out.join("config.txt"), &rc.echo())?;

    println!(
        "best epoch {} of {}, validation accuracy {:.4}",
        outcome.best_epoch,
        outcome.history.records.len(),
        outcome.best_valid_acc
    );
    if let Some(ev) = &test_eval {
        println!("test accuracy {:.4}", ev.metrics.accuracy());
    }
    if outcome.stop == StopReason::Diverged {
        return Err(Failure::Numeric(format!(
            "training diverged; kept the parameters of epoch {}",
            outcome.best_epoch
        )));
    }
    Ok(())
}

fn cmd_ablate<T: Scalar>(rc: &RunConfig) -> Outcome {
    let out = rc.require("out")?;
    let train_set = load(rc.require("train")?, Split::Train)?;
    let valid = load(rc.require("valid")?, Split::Valid)?;
    let test = load(rc.require("test")?, Split::Test)?;
    let table = ablate::<T>(&rc.train, &train_set, &valid, &test, label_map(rc)?, rc.path("embeddings"))?;
    let text = table.to_string();
    std::fs::create_dir_all(out).map_err(hiercrf::Error::from)?;
    write_text(&out.join("ablation.txt"), &text)?;
    write_text(&out.join("config.txt"), &rc.echo())?;
    print!("{text}");
    Ok(())
}

/// Largest hidden size `gradcheck` accepts.
const GRADCHECK_MAX_HIDDEN: usize = 8;
const GRADCHECK_EPS: f64 = 1e-5;
const GRADCHECK_TOL: f64 = 1e-4;

/// Toy full model: both extensions on, every width tiny.
fn gradcheck_base() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.embedding_dim = 6;
    cfg.model.encoder.hidden_size = 4;
    cfg.model.attention.enabled = true;
    cfg.model.pos.enabled = true;
    cfg.model.pos.dim = 4;
    cfg
}

fn cmd_gradcheck<T: Scalar>(rc: &RunConfig) -> Outcome {
    let cfg = &rc.train;
    if cfg.model.encoder.hidden_size > GRADCHECK_MAX_HIDDEN {
        return Err(Failure::Usage(format!(
            "gradcheck needs hidden_size <= {GRADCHECK_MAX_HIDDEN}, got {}",
            cfg.model.encoder.hidden_size
        )));
    }
    let corpus = match rc.path("train") {
        Some(p) => {
            let c = load(p, Split::Train)?;
            Corpus::new(c.conversations[..1].to_vec(), Split::Train)?
        }
        None => {
            let sizes = SynthSizes {
                conversations: 1,
                min_utterances: 3,
                max_utterances: 3,
                labels: 3,
                ..SynthSizes::default()
            };
            synth_corpus(SynthScheme::MarkovLabels, sizes, cfg.seed)?
        }
    };
    let mut tagger = build_model::<T>(cfg, &corpus, label_map(rc)?, rc.path("embeddings"))?;
    let enc = tagger.encode(&corpus)?;
    let report = tagger.grad_check(&Batch::new(&enc, vec![0])?, GRADCHECK_EPS)?;
    let mut text = String::new();
    for (name, err) in &report.per_param {
        let _ = writeln!(text, "{name}\t{err:.3e}");
    }
    let _ = writeln!(text, "max\t{:.3e}", report.max_rel_err);
    if let Some(out) = rc.path("out") {
        std::fs::create_dir_all(out).map_err(hiercrf::Error::from)?;
        write_text(&out.join("gradcheck.tsv"), &text)?;
        write_text(&out.join("config.txt"), &rc.echo())?;
    }
    print!("{text}");
    let failures = report.failures(GRADCHECK_TOL);
    if failures.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|(n, _)| n.as_str()).collect();
        Err(Failure::Numeric(format!(
            "relative error >= {GRADCHECK_TOL:e} in: {}",
            names.join(", ")
        )))
    }
}

/// Settings for `eval` and `predict`; only `precision` is configurable.
fn scoring(s: &Scoring) -> Result<Precision, Failure> {
    let mut settings = settings(&s.common)?;
    let precision = match settings.take("precision") {
        Some(v) => v.parse().map_err(Failure::Usage)?,
        None => Precision::default(),
    };
    if let Some(k) = settings.keys().next() {
        return Err(Failure::Usage(format!("unknown config key {k:?} (eval and predict accept only precision)")));
    }
    Ok(precision)
}

fn scoring_echo(s: &Scoring) -> Result<String, Failure> {
    Ok(format!(
        "checkpoint = {}\ncorpus = {}\nprecision = {}\n",
        s.checkpoint.display(),
        s.corpus.display(),
        scoring(s)?
    ))
}

fn cmd_eval<T: Scalar>(s: &Scoring) -> Outcome {
    let tagger = Tagger::<T>::load(&s.checkpoint)?;
    let corpus = load(&s.corpus, Split::Test)?;
    let ev = evaluate(&tagger, &tagger.encode(&corpus)?)?;
    let out = s.common.out.as_deref().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out).map_err(hiercrf::Error::from)?;
    write_text(&out.join("confusion.csv"), &ev.metrics.to_csv(false))?;
    write_text(&out.join("confusion_percent.csv"), &ev.metrics.to_csv(true))?;
    write_text(&out.join("eval_config.txt"), &scoring_echo(s)?)?;
    println!(
        "accuracy {:.4} ({} of {} utterances)",
        ev.metrics.accuracy(),
        ev.metrics.correct(),
        ev.metrics.total()
    );
    Ok(())
}

fn cmd_predict<T: Scalar>(s: &Scoring) -> Outcome {
    let tagger = Tagger::<T>::load(&s.checkpoint)?;
    let corpus = load(&s.corpus, Split::Test)?;
    let enc = tagger.encode(&corpus)?;
    let preds = tagger.predict(&enc)?;
    let text = predictions_tsv(&enc, &preds, &tagger.labels);
    match &s.common.out {
        Some(out) => {
            std::fs::create_dir_all(out).map_err(hiercrf::Error::from)?;
            write_text(&out.join("predictions.tsv"), &text)?;
            write_text(&out.join("predict_config.txt"), &scoring_echo(s)?)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Outcome {
    let sizes = synth_sizes(&settings(&a.common)?)?;
    let out = a
        .common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("synth needs --out FILE".into()))?;
    let seed = a.common.seed.unwrap_or(TrainConfig::default().seed);
    let corpus = synth_corpus(a.scheme, sizes, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(hiercrf::Error::from)?;
    }
    corpus.save(out)?;
    let echo = format!("scheme = {}\nseed = {seed}\n{}", a.scheme, echo_sizes(&sizes));
    let mut config_path = out.as_os_str().to_owned();
    config_path.push(".config.txt");
    write_text(Path::new(&config_path), &echo)?;
    println!(
        "{} conversations, {} utterances",
        corpus.len(),
        corpus.num_utterances()
    );
    Ok(())
}
