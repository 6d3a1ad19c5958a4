//! `ctxclip` command line: corpus generation, training, fine-tuning,
//! gradient checks, evaluation, projection and the α comparison harness.
//!
//! Exit codes: 0 success, 1 usage, 2 data or I/O, 3 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use ctxclip::autodiff::{grad_check, Tape, Tensor};
use ctxclip::data::{generate, CorpusSpec, PairCorpus};
use ctxclip::encoders::ModelParams;
use ctxclip::eval::{
    build_class_embeddings, image_embeddings, metrics_csv, project_2d, projection_csv, synthetic_prompts,
    text_to_image_recall, zero_shot_classify, RetrievalIndex, Relevance,
};
use ctxclip::losses::{contextual_affinity, contextual_loss, contrastive_loss, total_loss, LossConfig};
use ctxclip::trainer::{fine_tune, train, Checkpoint};

pub mod settings;
pub use settings::Settings;

/// Largest relative error accepted by `grad-check`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ctxclip::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed: max relative error {0} exceeds {GRAD_CHECK_TOLERANCE}")]
    GradCheck(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(ctxclip::Error::InvalidArgument(_)) => 1,
            CliError::Core(_) | CliError::Io { .. } => 2,
            CliError::GradCheck(_) => 3,
        }
    }
}

/// Flags shared by every subcommand; each one ignores those it has no use for.
#[derive(Args, Clone, Debug, Default, PartialEq)]
pub struct Flags {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Corpus file; when absent a corpus is generated from the settings.
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Weight of the contextual term.
    #[arg(long, value_name = "REAL")]
    pub alpha: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "INT")]
    pub k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Write a synthetic corpus to <out>/corpus.jsonl.
    GenData,
    /// Train on the corpus minus its held-out tail; writes checkpoint.txt and losses.csv.
    Train,
    /// Fine-tune a checkpoint with a classifier head (default corpus: noise-free).
    FineTune,
    /// Finite-difference check of every loss gradient; writes gradcheck.csv and affinity.txt.
    GradCheck,
    /// Zero-shot classification with synthetic class prompts.
    EvalZeroshot,
    /// Text-to-image retrieval and recall@k.
    EvalRetrieve,
    /// 2-D principal-component coordinates of image embeddings.
    Project,
    /// Train with alpha = 0 and alpha = 0.5 on the same data and report both.
    Compare,
}

#[derive(Parser, Debug)]
#[command(name = "ctxclip", version, about = "Contrastive + contextual image-text alignment experiments")]
#[command(arg_required_else_help = true, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    #[command(about = "Write a synthetic corpus to <out>/corpus.jsonl")]
    GenData(Flags),
    #[command(about = "Train on the corpus minus its held-out tail")]
    Train(Flags),
    #[command(about = "Fine-tune a checkpoint with a linear classifier head")]
    FineTune(Flags),
    #[command(about = "Finite-difference check of the loss gradients")]
    GradCheck(Flags),
    #[command(about = "Zero-shot classification with synthetic class prompts")]
    EvalZeroshot(Flags),
    #[command(about = "Text-to-image retrieval and recall@k")]
    EvalRetrieve(Flags),
    #[command(about = "2-D principal-component coordinates of image embeddings")]
    Project(Flags),
    #[command(about = "Train with alpha = 0 and alpha = 0.5 and report both")]
    Compare(Flags),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    pub kind: Kind,
    pub flags: Flags,
}

/// Parses `argv` (including the program name). Help and version requests
/// come back as `Usage` errors carrying the rendered text.
pub fn parse_args<I, S>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.render().to_string()))?;
    let (kind, flags) = match cli.command {
        Sub::GenData(f) => (Kind::GenData, f),
        Sub::Train(f) => (Kind::Train, f),
        Sub::FineTune(f) => (Kind::FineTune, f),
        Sub::GradCheck(f) => (Kind::GradCheck, f),
        Sub::EvalZeroshot(f) => (Kind::EvalZeroshot, f),
        Sub::EvalRetrieve(f) => (Kind::EvalRetrieve, f),
        Sub::Project(f) => (Kind::Project, f),
        Sub::Compare(f) => (Kind::Compare, f),
    };
    Ok(Command { kind, flags })
}

/// Parses and runs one command, printing a summary to `out` and errors to
/// `err`; returns the process exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<S> = argv.into_iter().collect();
    let is_info = argv.iter().skip(1).any(|a| {
        let a: OsString = a.clone().into();
        a == "--help" || a == "-h" || a == "--version" || a == "-V"
    });
    let result = parse_args(argv).and_then(|cmd| dispatch(&cmd));
    match result {
        Ok(summary) => {
            let _ = out.write_all(summary.as_bytes());
            0
        }
        Err(CliError::Usage(text)) if is_info => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        // clap renders its own "error:" prefix and usage text.
        Err(CliError::Usage(text)) if text.contains("Usage:") => {
            let _ = err.write_all(text.as_bytes());
            1
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn load_or_generate(flags: &Flags, spec: &CorpusSpec) -> Result<PairCorpus, CliError> {
    match &flags.corpus {
        Some(path) => Ok(PairCorpus::load(path)?),
        None => Ok(generate(spec)?),
    }
}

fn require_checkpoint(flags: &Flags) -> Result<Checkpoint<f64>, CliError> {
    let path = flags.checkpoint.as_ref().ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    Ok(Checkpoint::load(path)?)
}

/// Train part and held-out tail: at most `held_out` pairs, and never more
/// than half the corpus, are held out.
pub fn split_corpus(corpus: &PairCorpus, held_out: usize) -> (PairCorpus, PairCorpus) {
    let held = held_out.min(corpus.len() / 2);
    corpus.split_at(corpus.len() - held)
}

/// Metrics shared by `compare` and the acceptance suite.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub final_loss: f64,
    pub recall_at_1: f64,
    pub recall_at_1_pair: f64,
    pub zeroshot_top1: f64,
    pub zeroshot_top5: f64,
}

/// Zero-shot accuracy on `corpus` with synthetic prompts for `spec`'s classes.
pub fn zero_shot(
    params: &ModelParams<f64>,
    corpus: &PairCorpus,
    spec: &CorpusSpec,
    k: usize,
) -> Result<ctxclip::eval::EvalResult, CliError> {
    if corpus.is_empty() {
        return Err(ctxclip::Error::EmptyCorpus.into());
    }
    let n_classes = spec.n_classes.max(corpus.n_classes());
    let prompts = synthetic_prompts(&CorpusSpec { n_classes, ..*spec });
    let class_embeds = build_class_embeddings(params, &prompts)?;
    let labels: Vec<usize> = corpus.records.iter().map(|r| r.class_id).collect();
    Ok(zero_shot_classify(params, &corpus.images()?, &labels, &class_embeds, k)?)
}

/// Trains from a fresh init on the train split and evaluates on the held-out split.
pub fn train_and_evaluate(s: &Settings, corpus: &PairCorpus) -> Result<(Checkpoint<f64>, RunMetrics), CliError> {
    let (train_part, held) = split_corpus(corpus, s.held_out);
    if held.is_empty() {
        return Err(ctxclip::Error::EmptyCorpus.into());
    }
    let params = ModelParams::init(s.train.seed, s.dims)?;
    let (ckpt, report) = train(&s.train, &train_part, &params)?;
    let n_classes = s.corpus.n_classes.max(held.n_classes());
    let zs = zero_shot(&ckpt.params, &held, &s.corpus, 5.min(n_classes))?;
    let metrics = RunMetrics {
        final_loss: report.epochs.last().map_or(f64::NAN, |e| e.total),
        recall_at_1: text_to_image_recall(&ckpt.params, &held, 1, Relevance::SameClass)?,
        recall_at_1_pair: text_to_image_recall(&ckpt.params, &held, 1, Relevance::SamePair)?,
        zeroshot_top1: zs.top1,
        zeroshot_top5: zs.top_k,
    };
    Ok((ckpt, metrics))
}

/// Runs a parsed command and returns the text to print.
pub fn dispatch(cmd: &Command) -> Result<String, CliError> {
    let flags = &cmd.flags;
    let s = Settings::resolve(flags)?;
    let mut summary = String::new();
    match cmd.kind {
        Kind::GenData => {
            let corpus = generate(&s.corpus)?;
            let path = flags.out.join("corpus.jsonl");
            ensure_dir(&flags.out)?;
            corpus.save(&path)?;
            let _ = writeln!(summary, "wrote {} pairs to {}", corpus.len(), path.display());
        }
        Kind::Train => {
            let corpus = load_or_generate(flags, &s.corpus)?;
            let (train_part, _) = split_corpus(&corpus, s.held_out);
            let params = ModelParams::init(s.train.seed, s.dims)?;
            let (ckpt, report) = train(&s.train, &train_part, &params)?;
            write_file(&flags.out, "checkpoint.txt", &ckpt.to_text())?;
            let mut csv = String::from("epoch,L,L_CLIP,L_CX\n");
            for e in &report.epochs {
                let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.total, e.contrastive, e.contextual);
            }
            write_file(&flags.out, "losses.csv", &csv)?;
            summary.push_str(&csv);
        }
        Kind::FineTune => {
            let ckpt = require_checkpoint(flags)?;
            let labeled = load_or_generate(flags, &CorpusSpec { noise_sigma: 0.0, ..s.corpus })?;
            let n_classes = s.corpus.n_classes.max(labeled.n_classes());
            let cfg = ctxclip::trainer::TrainConfig { epochs: s.finetune_epochs, ..s.train };
            let (tuned, rep) = fine_tune(&ckpt, &labeled, n_classes, &cfg)?;
            write_file(&flags.out, "finetuned.txt", &tuned.to_text())?;
            let csv = metrics_csv(&[
                ("top1", rep.top1),
                ("top5", rep.top5),
                ("val_top1", rep.val_top1),
                ("n_train", rep.n_train as f64),
                ("n_val", rep.n_val as f64),
                ("n_test", rep.n_test as f64),
                ("final_loss", rep.losses.last().copied().unwrap_or(f64::NAN)),
            ]);
            write_file(&flags.out, "finetune.csv", &csv)?;
            summary.push_str(&csv);
        }
        Kind::GradCheck => {
            let (rows, dump) = grad_check_suite(&s)?;
            let mut csv = String::from("loss,wrt,max_rel_error\n");
            let mut worst: f64 = 0.0;
            for (loss, wrt, e) in &rows {
                let _ = writeln!(csv, "{loss},{wrt},{e}");
                worst = worst.max(*e);
            }
            write_file(&flags.out, "gradcheck.csv", &csv)?;
            write_file(&flags.out, "affinity.txt", &dump)?;
            summary.push_str(&csv);
            let _ = writeln!(summary, "max_rel_error,{worst}");
            if !(worst < GRAD_CHECK_TOLERANCE) {
                return Err(CliError::GradCheck(worst));
            }
        }
        Kind::EvalZeroshot => {
            let ckpt = require_checkpoint(flags)?;
            let corpus = eval_corpus(flags, &s)?;
            let zs = zero_shot(&ckpt.params, &corpus, &s.corpus, s.k)?;
            let csv = metrics_csv(&[
                ("top1", zs.top1),
                (&format!("top{}", zs.k), zs.top_k),
                ("n_items", corpus.len() as f64),
            ]);
            let mut preds = String::from("id,class,predicted\n");
            for (r, p) in corpus.records.iter().zip(&zs.predictions) {
                let _ = writeln!(preds, "{},{},{}", r.id, r.class_id, p);
            }
            write_file(&flags.out, "zeroshot.csv", &csv)?;
            write_file(&flags.out, "zeroshot_predictions.csv", &preds)?;
            summary.push_str(&csv);
        }
        Kind::EvalRetrieve => {
            let ckpt = require_checkpoint(flags)?;
            let corpus = eval_corpus(flags, &s)?;
            let k = s.k.min(corpus.len());
            let index = RetrievalIndex::build(&ckpt.params, &corpus)?;
            let queries: Vec<&[u32]> = corpus.records.iter().map(|r| r.tokens.as_slice()).collect();
            let ranked = index.retrieve(&ckpt.params, &queries, k)?;
            let mut rankings = String::from("query_id,rank,image_id,score\n");
            for (q, list) in corpus.records.iter().zip(&ranked) {
                for (rank, (id, score)) in list.iter().enumerate() {
                    let _ = writeln!(rankings, "{},{},{},{}", q.id, rank + 1, id, score);
                }
            }
            let recall = |k, rel| text_to_image_recall(&ckpt.params, &corpus, k, rel);
            let csv = metrics_csv(&[
                ("recall@1", recall(1, Relevance::SameClass)?),
                (&format!("recall@{k}"), recall(k, Relevance::SameClass)?),
                ("recall@1_pair", recall(1, Relevance::SamePair)?),
                (&format!("recall@{k}_pair"), recall(k, Relevance::SamePair)?),
            ]);
            write_file(&flags.out, "retrieval.csv", &csv)?;
            write_file(&flags.out, "rankings.csv", &rankings)?;
            summary.push_str(&csv);
        }
        Kind::Project => {
            let ckpt = require_checkpoint(flags)?;
            let corpus = eval_corpus(flags, &s)?;
            let emb = image_embeddings(&ckpt.params, &corpus.images()?)?;
            let coords = project_2d(&emb)?;
            let ids: Vec<u64> = corpus.records.iter().map(|r| r.id).collect();
            let classes: Vec<usize> = corpus.records.iter().map(|r| r.class_id).collect();
            let path = write_file(&flags.out, "projection.csv", &projection_csv(&ids, &classes, &coords)?)?;
            let _ = writeln!(summary, "wrote {} points to {}", ids.len(), path.display());
        }
        Kind::Compare => {
            let corpus = load_or_generate(flags, &s.corpus)?;
            let second = flags.alpha.unwrap_or(0.5);
            let run = |alpha: f64| {
                let mut cfg = s.clone();
                cfg.train.loss.alpha = alpha;
                train_and_evaluate(&cfg, &corpus).map(|(_, m)| m)
            };
            let (a, b) = (run(0.0)?, run(second)?);
            let label = if second == 0.5 { "alpha05".to_string() } else { format!("alpha{second}") };
            let mut csv = format!("metric,alpha0,{label}\n");
            let rows = [
                ("recall@1", a.recall_at_1, b.recall_at_1),
                ("recall@1_pair", a.recall_at_1_pair, b.recall_at_1_pair),
                ("zeroshot_top1", a.zeroshot_top1, b.zeroshot_top1),
                ("zeroshot_top5", a.zeroshot_top5, b.zeroshot_top5),
                ("final_loss", a.final_loss, b.final_loss),
            ];
            for (name, x, y) in rows {
                let _ = writeln!(csv, "{name},{x},{y}");
            }
            write_file(&flags.out, "compare.csv", &csv)?;
            summary.push_str(&csv);
        }
    }
    Ok(summary)
}

/// The given corpus, or the held-out tail of the generated one.
fn eval_corpus(flags: &Flags, s: &Settings) -> Result<PairCorpus, CliError> {
    match &flags.corpus {
        Some(path) => Ok(PairCorpus::load(path)?),
        None => Ok(split_corpus(&generate(&s.corpus)?, s.held_out).1),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `(loss, wrt, max_rel_error)`.
pub type GradCheckRow = (&'static str, &'static str, f64);

/// Checks the contrastive, contextual and total loss gradients with respect
/// to both raw point sets (normalized inside the objective). Returns one
/// row per check and the affinity dump of the normalized point sets.
pub fn grad_check_suite(s: &Settings) -> Result<(Vec<GradCheckRow>, String), CliError> {
    let (n, d) = (s.grad_n, s.grad_d);
    if n == 0 || d == 0 {
        return Err(CliError::Usage("grad_n and grad_d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.train.seed);
    let u = random_matrix(&mut rng, n, d);
    let v = random_matrix(&mut rng, n, d);
    let cfg = s.train.loss;
    let mut rows = Vec::new();
    type LossFn = fn(&Tape<f64>, &Tensor<f64>, &Tensor<f64>, &LossConfig<f64>) -> ctxclip::Result<Tensor<f64>>;
    let losses: [(&str, LossFn); 3] = [
        ("contrastive", |t, a, b, c| contrastive_loss(t, a, b, c)),
        ("contextual", |t, a, b, c| contextual_loss(t, a, b, c)),
        ("total", |t, a, b, c| total_loss(t, a, b, a, b, c).map(|(l, _)| l)),
    ];
    for (name, loss) in losses {
        for (wrt, x, other) in [("image", &u, &v), ("text", &v, &u)] {
            let report = grad_check(
                |tape: &Tape<f64>, leaf: &Tensor<f64>| {
                    let guard = 1e-12;
                    let moving = tape.l2_normalize_rows(&tape.reshape(leaf, &[n, d])?, guard)?;
                    let fixed = tape.l2_normalize_rows(&tape.constant(&Tensor::matrix(n, d, other.clone())?), guard)?;
                    if wrt == "image" {
                        loss(tape, &moving, &fixed, &cfg)
                    } else {
                        loss(tape, &fixed, &moving, &cfg)
                    }
                },
                x,
                GRAD_CHECK_STEP,
            )?;
            rows.push((name, wrt, report.max_rel_error));
        }
    }
    let tape = Tape::new();
    let un = tape.l2_normalize_rows(&Tensor::matrix(n, d, u)?, 1e-12)?;
    let vn = tape.l2_normalize_rows(&Tensor::matrix(n, d, v)?, 1e-12)?;
    let dump = contextual_affinity(&tape, &un, &vn, &cfg)?.to_delimited();
    Ok((rows, dump))
}
