//! `pulse-seq`: train, evaluate, combine and sample melody models from the
//! command line.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (including
//! unreadable inputs), 3 when feature discovery stopped without converging.
//! Partial results are still written in the last case.

pub mod config;
pub mod grid;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pulse_core::corpus::{self, split_folds, train_test_split, Alphabet, Corpus, FoldAssignment, FoldSource};
use pulse_core::ensemble::{self, indices, mean_bits, select_bias, CombinationConfig, NGramModel};
use pulse_core::evalgen::{self, cross_entropy, entropy_profile, EvalReport, ModelPredictor};
use pulse_core::features::{DataSet, KeyPolicy};
use pulse_core::model::PredictiveDistribution;
use pulse_core::pulse::{fit_ltm, fit_predict_stm, StmConfig, TrainedModel, ValueRanges};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::RunConfig;
use crate::grid::{apply, grid_search, GridSpec, Point};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NotConverged(_) => 3,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "pulse-seq", version, about = "Feature-discovering melody prediction models")]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for shuffling, fold splits, validation splits and sampling
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (capped by PULSE_SEQ_THREADS when set)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a corpus (and optional fold file) and print a summary
    IngestCheck(CorpusArgs),
    /// Train a long-term model and write it with its per-iteration log
    TrainLtm(TrainArgs),
    /// Evaluate fresh short-term models on every sequence of a corpus
    StmEval(StmEvalArgs),
    /// k-fold cross-validation
    Cv(CvArgs),
    /// Combine two or more predictors per event
    Hybrid(HybridArgs),
    /// Generate a melody from a trained model
    Generate(GenerateArgs),
    /// Write weight and structure summaries of a trained model
    Analyze(AnalyzeArgs),
    /// Tune hyperparameters on a validation split
    GridSearch(GridArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus file in the line format
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Fold file with `<sequence-id> <fold>` lines
    #[arg(long)]
    pub folds: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Model file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV (defaults to the model path with `.log.csv`)
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShortTerm {
    Pulse,
    Ngram,
}

#[derive(Debug, Args)]
pub struct StmEvalArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Per-sequence report CSV
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ShortTerm::Pulse)]
    pub model: ShortTerm,
    /// Directory for per-sequence entropy profiles (`t,pitch,bits`)
    #[arg(long)]
    pub profiles: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CvModel {
    Ltm,
    Stm,
    Ngram,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Number of folds when no fold file is given
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value_t = CvModel::Ltm)]
    pub model: CvModel,
    /// Inner grid search per fold on 10% of its training data, as
    /// `name=v1,v2,...`; repeatable
    #[arg(long)]
    pub tune: Vec<String>,
    /// Fold report CSV (k rows plus a `mean` row)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HybridArgs {
    /// Test corpus
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Training corpus, used to choose the bias and to fit n-gram sources
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// `model:FILE`, `stm`, `ngram:ORDER`, `ngram-stm:ORDER` or
    /// `csv:TEST_FILE[,TRAIN_FILE]`; repeat for each source
    #[arg(long = "source", required = true)]
    pub sources: Vec<String>,
    /// `sum` or `product`
    #[arg(long)]
    pub rule: Option<String>,
    /// Fixed bias; otherwise chosen on the training corpus
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Beam,
    Walk,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prime pitches, comma separated
    #[arg(long, value_delimiter = ',')]
    pub prime: Option<Vec<i32>>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub beams: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Total length including the prime
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Output file in the corpus line format
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Interval-gram lengths for the motif table
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    pub motif_lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Ltm,
    Stm,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Target::Ltm)]
    pub target: Target,
    /// `name=v1,v2,...`; repeatable
    #[arg(long)]
    pub grid: Vec<String>,
    /// Log-uniform range `name=low:high` for random search; repeatable
    #[arg(long)]
    pub range: Vec<String>,
    /// Number of random points (requires --range)
    #[arg(long)]
    pub random: Option<usize>,
    /// Share of sequences held out for validation
    #[arg(long, default_value_t = 0.1)]
    pub validation: f64,
    /// Directory for `trace.csv` and `best.toml`
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Resolved global settings.
pub struct Context {
    pub config: RunConfig,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self, CliError> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        if let Some(t) = cli.threads {
            config.threads = Some(t);
        }
        if config.threads == Some(0) {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        Ok(Context { config })
    }

    fn corpus_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        flag.clone()
            .or_else(|| self.config.corpus.path.clone())
            .ok_or_else(|| CliError::Usage("no corpus given (use --corpus or [corpus].path)".into()))
    }

    fn corpus(&self, flag: &Option<PathBuf>) -> Result<Corpus, CliError> {
        corpus::ingest(self.corpus_path(flag)?).map_err(usage)
    }
}

/// Worker count: the requested number (or all cores), capped by
/// `PULSE_SEQ_THREADS`.
pub fn thread_count(requested: Option<usize>) -> usize {
    let base = requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cap = std::env::var("PULSE_SEQ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    cap.map_or(base, |c| base.min(c)).max(1)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Context::new(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(ctx.config.threads))
        .build()
        .map_err(usage)?;
    pool.install(|| match &cli.command {
        Command::IngestCheck(a) => ingest_check(&ctx, a),
        Command::TrainLtm(a) => train_ltm(&ctx, a),
        Command::StmEval(a) => stm_eval(&ctx, a),
        Command::Cv(a) => cv(&ctx, a),
        Command::Hybrid(a) => hybrid(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::GridSearch(a) => grid(&ctx, a),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    let f = File::create(path).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(usage)?;
    for r in rows {
        w.write_record(&r).map_err(usage)?;
    }
    w.flush().map_err(usage)
}

fn read_folds(path: &Path, corpus: &Corpus) -> Result<FoldAssignment, CliError> {
    let folds = FoldAssignment::read(path).map_err(usage)?;
    folds.validate(corpus).map_err(usage)?;
    Ok(folds)
}

fn ingest_check(ctx: &Context, a: &CorpusArgs) -> Result<(), CliError> {
    let corpus = ctx.corpus(&a.corpus)?;
    let p = corpus.alphabet.pitches();
    println!("sequences: {}", corpus.len());
    println!("events: {}", corpus.event_count());
    println!("alphabet: {} pitches ({}..={})", p.len(), p[0], p[p.len() - 1]);
    println!("content hash: {}", corpus.content_hash());
    if let Some(f) = a.folds.as_ref().or(ctx.config.corpus.folds.as_ref()) {
        let folds = read_folds(f, &corpus)?;
        println!("folds: k={} sizes={:?}", folds.k, folds.fold_sizes());
    }
    Ok(())
}

fn train_ltm(ctx: &Context, a: &TrainArgs) -> Result<(), CliError> {
    let corpus = ctx.corpus(&a.corpus)?;
    let cfg = ctx.config.ltm()?;
    let model = fit_ltm(&corpus, &cfg).map_err(usage)?;
    model.save(&a.out).map_err(usage)?;
    let log = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"));
    write_rows(
        &log,
        &["iteration", "candidates", "after_filter", "features", "epochs", "stop_reason", "loss_nats", "validation_bits"],
        model.log.iter().map(|l| {
            vec![
                l.iteration.to_string(),
                l.candidates.to_string(),
                l.after_filter.to_string(),
                l.after_shrink.to_string(),
                l.epochs.to_string(),
                l.reason.to_string(),
                l.loss.to_string(),
                l.validation_bits.map_or(String::new(), |v| v.to_string()),
            ]
        }),
    )?;
    println!(
        "features: {}  iterations: {}  epochs: {}  converged: {}",
        model.features.len(),
        model.provenance.iterations,
        model.provenance.epochs,
        model.converged
    );
    if !model.converged {
        return Err(CliError::NotConverged(format!(
            "feature discovery did not converge; partial model written to {}",
            a.out.display()
        )));
    }
    Ok(())
}

/// Fresh short-term model per sequence. Candidate values come from the whole
/// corpus so every sequence searches the same space.
pub fn stm_distributions(corpus: &Corpus, cfg: &StmConfig, keys: Option<&KeyPolicy>) -> Result<Vec<Vec<PredictiveDistribution>>, CliError> {
    let data = DataSet::from_corpus(corpus, keys);
    let ranges = ValueRanges::from_views(data.views.iter().map(|v| v.as_ref()));
    data.views
        .par_iter()
        .map(|v: &Arc<_>| fit_predict_stm(v, &corpus.alphabet, &ranges, cfg).map_err(usage))
        .collect()
}

pub fn ngram_stm_distributions(corpus: &Corpus, order: usize) -> Vec<Vec<PredictiveDistribution>> {
    corpus
        .sequences
        .iter()
        .map(|s| NGramModel::predict_online(order, corpus.alphabet.len(), &indices(s.pitches(), &corpus.alphabet)))
        .collect()
}

pub fn ngram_ltm_distributions(train: &Corpus, test: &Corpus, order: usize) -> Vec<Vec<PredictiveDistribution>> {
    let mut m = NGramModel::new(order, test.alphabet.len());
    for s in &train.sequences {
        m.observe_sequence(&indices(s.pitches(), &test.alphabet));
    }
    test.sequences
        .iter()
        .map(|s| m.predict_sequence(&indices(s.pitches(), &test.alphabet)))
        .collect()
}

fn stm_eval(ctx: &Context, a: &StmEvalArgs) -> Result<(), CliError> {
    let corpus = ctx.corpus(&a.corpus)?;
    let dists = match a.model {
        ShortTerm::Pulse => {
            let (cfg, keys) = ctx.config.stm()?;
            stm_distributions(&corpus, &cfg, keys.as_ref())?
        }
        ShortTerm::Ngram => ngram_stm_distributions(&corpus, ctx.config.ngram.order),
    };
    let report = cross_entropy(&corpus, &dists).map_err(usage)?;
    write_report(&a.out, &report)?;
    if let Some(dir) = &a.profiles {
        fs::create_dir_all(dir).map_err(usage)?;
        for (s, ds) in corpus.sequences.iter().zip(&dists) {
            let prof = entropy_profile(s, ds, &corpus.alphabet).map_err(usage)?;
            write_rows(
                &dir.join(format!("{}.csv", s.id)),
                &["t", "pitch", "bits"],
                prof.into_iter().map(|(t, p, b)| vec![t.to_string(), p.to_string(), b.to_string()]),
            )?;
        }
    }
    println!("mean bits: {:.4}  accuracy: {:.4}  events: {}", report.mean_bits, report.accuracy, report.events);
    Ok(())
}

fn write_report(path: &Path, r: &EvalReport) -> Result<(), CliError> {
    let mut rows: Vec<Vec<String>> = r
        .sequences
        .iter()
        .map(|s| vec![s.id.clone(), s.events.to_string(), s.mean_bits.to_string()])
        .collect();
    rows.push(vec!["mean".into(), r.events.to_string(), r.mean_bits.to_string()]);
    write_rows(path, &["sequence_id", "events", "mean_bits"], rows)
}

struct FoldResult {
    train: usize,
    test: usize,
    report: EvalReport,
    features: Option<usize>,
    converged: bool,
    tuned: String,
}

fn validation_bits(ctx_cfg: &RunConfig, train: &Corpus, fraction: f64, target: Target) -> Result<f64, CliError> {
    let (inner, val) = train.holdout(fraction, ctx_cfg.seed).map_err(usage)?;
    let dists = match target {
        Target::Ltm => {
            let m = fit_ltm(&inner, &ctx_cfg.ltm()?).map_err(usage)?;
            m.predict_corpus(&val)
        }
        Target::Stm => {
            let (cfg, keys) = ctx_cfg.stm()?;
            stm_distributions(&val, &cfg, keys.as_ref())?
        }
    };
    Ok(cross_entropy(&val, &dists).map_err(usage)?.mean_bits)
}

fn tune(base: &RunConfig, train: &Corpus, entries: &[String], target: Target) -> Result<(RunConfig, String), CliError> {
    if entries.is_empty() {
        return Ok((base.clone(), String::new()));
    }
    let points = GridSpec::explicit(entries)?.points();
    let trace = grid_search(points, |p| validation_bits(&apply(base, p), train, 0.1, target).unwrap_or(f64::INFINITY));
    let best = &trace.points[trace.best];
    Ok((apply(base, best), describe(best)))
}

fn describe(p: &Point) -> String {
    p.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

fn cv(ctx: &Context, a: &CvArgs) -> Result<(), CliError> {
    let corpus = ctx.corpus(&a.corpus)?;
    let cfg = &ctx.config;
    let folds = match a.folds.as_ref().or(cfg.corpus.folds.as_ref()) {
        Some(f) => {
            let folds = read_folds(f, &corpus)?;
            if a.k.is_some_and(|k| k != folds.k) {
                return Err(CliError::Usage(format!("--k {} disagrees with the fold file (k={})", a.k.unwrap_or(0), folds.k)));
            }
            folds
        }
        None => split_folds(&corpus, a.k.unwrap_or(cfg.corpus.k), FoldSource::Seed(cfg.seed)).map_err(usage)?,
    };
    let target = match a.model {
        CvModel::Stm => Target::Stm,
        _ => Target::Ltm,
    };
    if a.model == CvModel::Ngram && !a.tune.is_empty() {
        return Err(CliError::Usage("the n-gram baseline has no tunable parameters".into()));
    }
    let results: Vec<FoldResult> = (0..folds.k)
        .into_par_iter()
        .map(|k| -> Result<FoldResult, CliError> {
            let (train, test) = train_test_split(&corpus, &folds, k).map_err(usage)?;
            let (fold_cfg, tuned) = tune(cfg, &train, &a.tune, target)?;
            let (dists, features, converged) = match a.model {
                CvModel::Ltm => {
                    let m = fit_ltm(&train, &fold_cfg.ltm()?).map_err(usage)?;
                    (m.predict_corpus(&test), Some(m.features.len()), m.converged)
                }
                CvModel::Stm => {
                    let (stm, keys) = fold_cfg.stm()?;
                    (stm_distributions(&test, &stm, keys.as_ref())?, None, true)
                }
                CvModel::Ngram => (ngram_ltm_distributions(&train, &test, cfg.ngram.order), None, true),
            };
            Ok(FoldResult {
                train: train.len(),
                test: test.len(),
                report: cross_entropy(&test, &dists).map_err(usage)?,
                features,
                converged,
                tuned,
            })
        })
        .collect::<Result<_, _>>()?;

    let k = results.len() as f64;
    let mean = results.iter().map(|r| r.report.mean_bits).sum::<f64>() / k;
    let acc = results.iter().map(|r| r.report.accuracy).sum::<f64>() / k;
    let mut rows: Vec<Vec<String>> = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                i.to_string(),
                r.train.to_string(),
                r.test.to_string(),
                r.report.events.to_string(),
                r.report.mean_bits.to_string(),
                r.report.accuracy.to_string(),
                r.features.map_or(String::new(), |f| f.to_string()),
                r.converged.to_string(),
                r.tuned.clone(),
            ]
        })
        .collect();
    let all_converged = results.iter().all(|r| r.converged);
    rows.push(vec![
        "mean".into(),
        String::new(),
        String::new(),
        results.iter().map(|r| r.report.events).sum::<usize>().to_string(),
        mean.to_string(),
        acc.to_string(),
        String::new(),
        all_converged.to_string(),
        String::new(),
    ]);
    write_rows(
        &a.out,
        &["fold", "train_sequences", "test_sequences", "test_events", "mean_bits", "accuracy", "features", "converged", "tuned"],
        rows,
    )?;
    println!("{}-fold mean bits: {mean:.4}  accuracy: {acc:.4}", folds.k);
    if !all_converged {
        return Err(CliError::NotConverged("feature discovery did not converge on every fold".into()));
    }
    Ok(())
}

enum Source {
    Model(Box<TrainedModel>),
    Stm,
    NGram(usize),
    NGramStm(usize),
    Csv(PathBuf, Option<PathBuf>),
}

fn parse_source(s: &str) -> Result<Source, CliError> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let order = |a: &str| a.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| CliError::Usage(format!("bad n-gram order in {s:?}")));
    match kind {
        "model" => Ok(Source::Model(Box::new(TrainedModel::load(arg).map_err(usage)?))),
        "stm" if arg.is_empty() => Ok(Source::Stm),
        "ngram" => Ok(Source::NGram(order(arg)?)),
        "ngram-stm" => Ok(Source::NGramStm(order(arg)?)),
        "csv" => {
            let (test, train) = match arg.split_once(',') {
                Some((t, tr)) => (t, Some(PathBuf::from(tr))),
                None => (arg, None),
            };
            Ok(Source::Csv(PathBuf::from(test), train))
        }
        _ => Err(CliError::Usage(format!("unknown source {s:?}"))),
    }
}

fn source_name(s: &str) -> String {
    s.to_string()
}

fn source_dists(src: &Source, ctx: &Context, corpus: &Corpus, train: Option<&Corpus>, on_train: bool) -> Result<Vec<Vec<PredictiveDistribution>>, CliError> {
    match src {
        Source::Model(m) => Ok(m.predict_corpus(corpus)),
        Source::Stm => {
            let (cfg, keys) = ctx.config.stm()?;
            stm_distributions(corpus, &cfg, keys.as_ref())
        }
        Source::NGram(n) => {
            let train = train.ok_or_else(|| CliError::Usage("an ngram source needs --train".into()))?;
            Ok(ngram_ltm_distributions(train, corpus, *n))
        }
        Source::NGramStm(n) => Ok(ngram_stm_distributions(corpus, *n)),
        Source::Csv(test, tr) => {
            let path = if on_train {
                tr.as_ref().ok_or_else(|| CliError::Usage("choosing the bias needs training distributions for every csv source (csv:TEST,TRAIN)".into()))?
            } else {
                test
            };
            let f = File::open(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            ensemble::read_distributions(f, corpus).map_err(usage)
        }
    }
}

/// Rebuilds `c` over `alphabet`, failing if some pitch is outside it.
fn over_alphabet(c: Corpus, alphabet: &Alphabet) -> Result<Corpus, CliError> {
    if let Some(p) = c.alphabet.pitches().iter().find(|p| !alphabet.contains(**p)) {
        return Err(CliError::Usage(format!("pitch {p} is outside the model alphabet")));
    }
    Ok(Corpus::with_alphabet(c.sequences, alphabet.clone()))
}

fn flat_truths(c: &Corpus) -> Vec<usize> {
    c.sequences.iter().flat_map(|s| indices(s.pitches(), &c.alphabet)).collect()
}

fn hybrid(ctx: &Context, a: &HybridArgs) -> Result<(), CliError> {
    if a.sources.len() < 2 {
        return Err(CliError::Usage("a hybrid needs at least two sources".into()));
    }
    let sources: Vec<Source> = a.sources.iter().map(|s| parse_source(s)).collect::<Result<_, _>>()?;
    let mut alphabet: Option<Alphabet> = None;
    for s in &sources {
        if let Source::Model(m) = s {
            match &alphabet {
                Some(al) if *al != m.alphabet => return Err(CliError::Usage("model sources use different alphabets".into())),
                _ => alphabet = Some(m.alphabet.clone()),
            }
        }
    }
    let test = ctx.corpus(&a.corpus)?;
    let train = a.train.as_ref().map(|p| corpus::ingest(p).map_err(usage)).transpose()?;
    let alphabet = alphabet.unwrap_or_else(|| {
        let mut p: Vec<i32> = test.alphabet.pitches().to_vec();
        if let Some(t) = &train {
            p.extend_from_slice(t.alphabet.pitches());
        }
        Alphabet::new(p)
    });
    let test = over_alphabet(test, &alphabet)?;
    let train = train.map(|t| over_alphabet(t, &alphabet)).transpose()?;

    let rule = match &a.rule {
        Some(r) => r.parse().map_err(usage)?,
        None => ctx.config.rule()?,
    };
    let flatten = |d: Vec<Vec<PredictiveDistribution>>| d.into_iter().flatten().collect::<Vec<_>>();
    let bias = match a.bias.or(ctx.config.combination.bias) {
        Some(b) => b,
        None => {
            let train = train
                .as_ref()
                .ok_or_else(|| CliError::Usage("give --bias or a --train corpus to choose it on".into()))?;
            let streams = sources
                .iter()
                .map(|s| source_dists(s, ctx, train, Some(train), true).map(flatten))
                .collect::<Result<Vec<_>, _>>()?;
            let (b, _) = select_bias(&streams, &flat_truths(train), rule, &ctx.config.combination.grid).map_err(usage)?;
            b
        }
    };
    let per_source = sources
        .iter()
        .map(|s| source_dists(s, ctx, &test, train.as_ref(), false))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (name, d) in a.sources.iter().zip(&per_source) {
        let r = cross_entropy(&test, d).map_err(usage)?;
        rows.push(vec![source_name(name), r.mean_bits.to_string(), r.accuracy.to_string()]);
    }
    let streams: Vec<Vec<PredictiveDistribution>> = per_source.into_iter().map(flatten).collect();
    let merged = ensemble::combine_streams(&streams, &CombinationConfig { rule, bias }).map_err(usage)?;
    let truths = flat_truths(&test);
    let bits = mean_bits(&merged, &truths);
    let acc = merged.iter().zip(&truths).filter(|(d, y)| d.argmax() == **y).count() as f64 / truths.len().max(1) as f64;
    rows.push(vec![format!("hybrid {rule} b={bias}"), bits.to_string(), acc.to_string()]);
    write_rows(&a.out, &["source", "mean_bits", "accuracy"], rows)?;
    println!("hybrid ({rule}, b={bias}) mean bits: {bits:.4}");
    Ok(())
}

fn generate(ctx: &Context, a: &GenerateArgs) -> Result<(), CliError> {
    let model = TrainedModel::load(&a.model).map_err(usage)?;
    let mut g = ctx.config.generation()?;
    if let Some(p) = &a.prime {
        g.prime = p.clone();
    }
    if let Some(m) = a.method {
        g.method = match m {
            Method::Beam => evalgen::GenerationMethod::Beam,
            Method::Walk => evalgen::GenerationMethod::IterativeRandomWalk,
        };
    }
    g.beams = a.beams.unwrap_or(g.beams);
    g.threshold = a.threshold.unwrap_or(g.threshold);
    g.length = a.length.unwrap_or(g.length);
    g.restarts = a.restarts.unwrap_or(g.restarts);
    g.validate(&model.alphabet).map_err(usage)?;
    let pred = ModelPredictor::new(&model, &g.prime).map_err(usage)?;
    let out = evalgen::generate(&pred, &g).map_err(usage)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(usage)?;
    }
    fs::write(&a.out, format!("{}\n", out.to_sequence("generated").to_line())).map_err(usage)?;
    let fmt = |p: &[i32]| p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    println!("prime: {}", fmt(&out.pitches[..out.prime_len]));
    println!("generated: {}", fmt(&out.pitches[out.prime_len..]));
    println!("mean bits: {:.4}", out.mean_bits);
    Ok(())
}

fn analyze(_ctx: &Context, a: &AnalyzeArgs) -> Result<(), CliError> {
    let model = TrainedModel::load(&a.model).map_err(usage)?;
    let r = evalgen::analyze(&model, &a.motif_lengths, a.top);
    let d = &a.out_dir;
    write_rows(
        &d.join("type_shares.csv"),
        &["feature_type", "count", "abs_weight", "share"],
        r.type_shares
            .iter()
            .map(|t| vec![t.feature_type.clone(), t.count.to_string(), t.abs_weight.to_string(), t.share.to_string()]),
    )?;
    write_rows(
        &d.join("zero_order.csv"),
        &["viewpoint", "value", "weight"],
        r.zero_order.iter().map(|(vp, v, w)| vec![vp.to_string(), v.to_string(), w.to_string()]),
    )?;
    write_rows(
        &d.join("motifs.csv"),
        &["length", "rank", "weight", "feature"],
        r.motifs
            .iter()
            .map(|m| vec![m.length.to_string(), m.rank.to_string(), m.weight.to_string(), m.feature.to_string()]),
    )?;
    write_rows(
        &d.join("extent.csv"),
        &["max_offset", "length", "abs_weight"],
        r.extent.iter().map(|((s, l), w)| vec![s.to_string(), l.to_string(), w.to_string()]),
    )?;
    write_rows(
        &d.join("holes.csv"),
        &["length", "holes", "count"],
        r.holes.iter().map(|((l, h), c)| vec![l.to_string(), h.to_string(), c.to_string()]),
    )?;
    println!("features: {}  written to {}", model.features.len(), d.display());
    Ok(())
}

fn grid(ctx: &Context, a: &GridArgs) -> Result<(), CliError> {
    let corpus = ctx.corpus(&a.corpus)?;
    let spec = match (a.random, a.grid.is_empty(), a.range.is_empty()) {
        (None, false, true) => GridSpec::explicit(&a.grid)?,
        (Some(n), true, false) => GridSpec::random(&a.range, n, ctx.config.seed)?,
        _ => return Err(CliError::Usage("give either --grid entries or --random N with --range entries".into())),
    };
    let points = spec.points();
    let names: Vec<String> = points[0].keys().cloned().collect();
    let trace = grid_search(points, |p| validation_bits(&apply(&ctx.config, p), &corpus, a.validation, a.target).unwrap_or(f64::INFINITY));
    let mut header: Vec<&str> = vec!["point"];
    header.extend(names.iter().map(|s| s.as_str()));
    header.push("validation_bits");
    write_rows(
        &a.out_dir.join("trace.csv"),
        &header,
        trace.points.iter().zip(&trace.scores).enumerate().map(|(i, (p, s))| {
            let mut row = vec![i.to_string()];
            row.extend(p.values().map(|v| v.to_string()));
            row.push(s.to_string());
            row
        }),
    )?;
    let best = &trace.points[trace.best];
    fs::write(a.out_dir.join("best.toml"), apply(&ctx.config, best).to_toml()).map_err(usage)?;
    println!("best: {}  validation bits: {:.4}", describe(best), trace.scores[trace.best]);
    Ok(())
}
