//! Command implementations behind the `narrative` binary.
//!
//! Each `cmd_*` function does the work of one subcommand and returns a
//! structured result; `main` handles printing, seeds and exit codes.

use std::fs;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use narrative_core::arc::{
    compute_arc, default_max_score, NarrativeArc, ShapingConfig, DEFAULT_MAX_SAMPLES,
};
use narrative_core::conversation::{
    ConversationModel, ExternalScoreTable, RandomModel, RetrievalIndex, RetrievalModel,
    DEFAULT_UNIGRAM_FLOOR,
};
use narrative_core::corpus::{
    load_dialogue_dir, load_labeled_corpus, load_script, load_utterance_pool, Utterance,
};
use narrative_core::harness::{
    alpha_sweep_prepared, build_episodes, evaluate_prepared, prepare_episodes, read_episodes,
    report, select_alpha, split_files, wps_of, write_episodes, Episode, Report, Scorer, Split,
    WpsStats, DEFAULT_SWEEP,
};
use narrative_core::shaping::{
    generate_dialogue_with, GenerateOptions, LineSource, Method, Transcript, DEFAULT_K,
};
use narrative_core::stats::mean_std;
use narrative_core::synth::{topic_corpus, TopicCorpusConfig};
use narrative_core::universe::{
    train_with, LabelMap, NaiveBayesModel, TrainOptions, UniverseModel, DEFAULT_SMOOTHING,
};
use narrative_core::Exec;
use narrative_service::{AppState, ServiceConfig};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

pub const GENERATE_BATCH_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "narrative",
    version,
    about = "Narrative-arc analysis, shaped generation and next-line prediction"
)]
pub struct Cli {
    /// Seed for every randomized step; drawn at random and printed when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log filter, e.g. `info` or `narrative_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a naive Bayes universe model on a labeled corpus.
    Train(TrainArgs),
    /// Compute the narrative arc of a script.
    Arc(ArcArgs),
    /// Generate a dialogue shaped toward revealing or concealing.
    Generate(GenerateArgs),
    /// Run the next-line prediction benchmark.
    Predict(PredictArgs),
    /// Serve interactive dialogue sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// `label<TAB>text` file or a `<root>/<label>/*.txt` tree.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `raw<TAB>universe` label map; identity when omitted.
    #[arg(long, conflicts_with = "newsgroups")]
    pub label_map: Option<PathBuf>,
    /// Use the built-in 20 Newsgroups to 5 topics map.
    #[arg(long)]
    pub newsgroups: bool,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    pub smoothing: f64,
    /// Keep stop words in the features.
    #[arg(long)]
    pub keep_stopwords: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArcFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct ArcArgs {
    /// One utterance per line, optionally `SPEAKER: text`.
    #[arg(long)]
    pub script: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = ArcFormat::Json)]
    pub format: ArcFormat,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConversationKind {
    /// Uniform draws from the pool.
    Random,
    /// Nearest neighbours of the last line.
    Retrieval,
}

#[derive(Debug, Clone, Args)]
pub struct PoolArgs {
    /// One utterance per line.
    #[arg(long)]
    pub pool: PathBuf,
    /// Drop pool lines shorter than this many characters.
    #[arg(long, default_value_t = narrative_core::corpus::DEFAULT_MIN_CHARS)]
    pub min_chars: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// A seed line; repeat for several.
    #[arg(long = "line")]
    pub lines: Vec<String>,
    /// Take seed lines from the start of this script.
    #[arg(long)]
    pub prime_from: Option<PathBuf>,
    /// How many script lines to take with `--prime-from`.
    #[arg(long, default_value_t = 2)]
    pub prime: usize,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Greedy)]
    pub method: MethodArg,
    /// Total dialogue length, seed lines included.
    #[arg(short, long, default_value_t = 20)]
    pub n: usize,
    /// Candidates per greedy turn.
    #[arg(short, long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Score cap M; `min(exp(|alpha| ln |U|), 10)` when omitted.
    #[arg(long)]
    pub max_score: Option<f64>,
    /// Rejection draws S before falling back.
    #[arg(long, default_value_t = DEFAULT_MAX_SAMPLES)]
    pub max_samples: usize,
    #[arg(long, value_enum, default_value_t = ConversationKind::Retrieval)]
    pub conversation: ConversationKind,
    /// Independent generations; run `r` uses seed `seed + r`.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Transcript JSON (a batch file when `--runs` > 1).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Greedy,
    Rejection,
    Base,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Greedy => Method::Greedy,
            MethodArg::Rejection => Method::Rejection,
            MethodArg::Base => Method::Base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerKind {
    Unigram,
    External,
    Random,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Directory of dialogue files (`*.txt`) to split and build episodes from.
    #[arg(long, conflicts_with_all = ["val_episodes", "synthetic"])]
    pub corpus: Option<PathBuf>,
    /// Prebuilt validation episodes (JSONL).
    #[arg(long, requires = "test_episodes")]
    pub val_episodes: Option<PathBuf>,
    /// Prebuilt test episodes (JSONL).
    #[arg(long, requires = "val_episodes")]
    pub test_episodes: Option<PathBuf>,
    /// Generate a topic-coherent synthetic corpus with this many files and
    /// train its universe model, instead of reading files.
    #[arg(long, conflicts_with = "val_episodes")]
    pub synthetic: Option<usize>,
    /// Universe model; required unless `--synthetic`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScorerKind::Unigram)]
    pub scorer: ScorerKind,
    /// Perplexity table for `--scorer external`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Probability floor for unseen tokens in the unigram scorer.
    #[arg(long, default_value_t = DEFAULT_UNIGRAM_FLOOR)]
    pub floor: f64,
    /// Share of files used for validation.
    #[arg(long, default_value_t = 0.5)]
    pub val_fraction: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = DEFAULT_SWEEP.0)]
    pub alpha_lo: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = DEFAULT_SWEEP.1)]
    pub alpha_hi: f64,
    #[arg(long, default_value_t = DEFAULT_SWEEP.2)]
    pub steps: usize,
    /// Save the episodes as `validation.jsonl` and `test.jsonl` here.
    #[arg(long)]
    pub write_episodes: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub pool: PoolArgs,
    /// Utterance-response pairs per session.
    #[arg(long, default_value_t = narrative_service::DEFAULT_TURN_LIMIT)]
    pub turn_limit: usize,
    #[arg(short, long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Greedy)]
    pub method: MethodArg,
    /// Write all sessions here on shutdown.
    #[arg(long)]
    pub persist: Option<PathBuf>,
    /// Allowed browser origin; repeat for several, any origin when omitted.
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
}

/// What `train` reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSummary {
    /// `(universe, documents)` in model order.
    pub doc_counts: Vec<(String, usize)>,
    pub vocab_size: usize,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let docs = load_labeled_corpus(&args.corpus)?;
    let map = if args.newsgroups {
        LabelMap::newsgroups()
    } else if let Some(p) = &args.label_map {
        LabelMap::load(p)?
    } else {
        LabelMap::identity(&docs)
    };
    let opts = TrainOptions {
        smoothing: args.smoothing,
        remove_stopwords: !args.keep_stopwords,
    };
    let model = train_with(&docs, &map, opts)?;
    model.save(&args.out)?;
    Ok(TrainSummary {
        doc_counts: model
            .universe_set()
            .labels()
            .iter()
            .cloned()
            .zip(model.doc_counts().iter().copied())
            .collect(),
        vocab_size: model.tfidf().vocab_size(),
    })
}

fn load_model(path: &Path) -> Result<NaiveBayesModel> {
    NaiveBayesModel::load(path)
        .with_context(|| format!("loading universe model {}", path.display()))
}

/// Compute the arc and render it in `format`.
pub fn cmd_arc(args: &ArcArgs) -> Result<(NarrativeArc, String)> {
    let model = load_model(&args.model)?;
    let script = load_script(&args.script)?;
    let arc = compute_arc(&script, &model)?;
    let text = match args.format {
        ArcFormat::Json => arc.to_json(),
        ArcFormat::Csv => arc.to_csv(),
    };
    if let Some(out) = &args.out {
        write(out, &text)?;
    }
    Ok((arc, text))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_pool(args: &PoolArgs) -> Result<Vec<Utterance>> {
    let pool = load_utterance_pool(&args.pool, args.min_chars, true)?;
    ensure!(!pool.is_empty(), "{}: no usable lines", args.pool.display());
    Ok(pool)
}

/// Mean and spread of one quantity over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub runs: usize,
    pub alpha: f64,
    pub method: Method,
    pub final_entropy: Spread,
    /// Words per sentence of the generated lines.
    pub generated_wps: WpsStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateBatch {
    pub version: u32,
    pub summary: GenerateSummary,
    pub transcripts: Vec<Transcript>,
}

pub fn cmd_generate(args: &GenerateArgs, seed: u64, exec: Exec) -> Result<GenerateBatch> {
    ensure!(args.runs >= 1, "--runs must be at least 1");
    let universe: Arc<dyn UniverseModel> = Arc::new(load_model(&args.model)?);
    let pool = load_pool(&args.pool)?;
    let conversation: Arc<dyn ConversationModel> = match args.conversation {
        ConversationKind::Random => Arc::new(RandomModel::new(pool)?),
        ConversationKind::Retrieval => Arc::new(RetrievalModel::new(
            RetrievalIndex::from_pool(pool)?,
            args.k,
        )),
    };
    let mut seed_lines = Vec::new();
    if let Some(script) = &args.prime_from {
        let d = load_script(script)?;
        ensure!(
            d.len() >= args.prime,
            "{} has fewer than {} lines",
            script.display(),
            args.prime
        );
        seed_lines.extend(d.utterances()[..args.prime].iter().cloned());
    }
    for l in &args.lines {
        seed_lines.push(Utterance::new(l)?);
    }
    if seed_lines.is_empty() {
        bail!("no seed lines: pass --line or --prime-from");
    }
    let n_universes = universe.universe_set().len();
    let max_score = args
        .max_score
        .unwrap_or_else(|| default_max_score(args.alpha, n_universes));
    let config = ShapingConfig::new(args.alpha, max_score, args.max_samples)?;
    let method = Method::from(args.method);

    let mut transcripts = Vec::with_capacity(args.runs);
    for r in 0..args.runs {
        let opts = GenerateOptions {
            n: args.n,
            method,
            k: args.k,
            seed: seed.wrapping_add(r as u64),
        };
        let g = generate_dialogue_with(
            exec,
            universe.clone(),
            conversation.clone(),
            &seed_lines,
            config,
            opts,
        )?;
        transcripts.push(g.transcript);
    }
    let finals: Vec<f64> = transcripts
        .iter()
        .map(final_entropy)
        .collect::<Result<_>>()?;
    let (mean, std) = mean_std(&finals)?;
    let generated: Vec<Utterance> = transcripts
        .iter()
        .flat_map(|t| &t.lines)
        .filter(|l| l.source == LineSource::Generated)
        .map(|l| Utterance::new(&l.text))
        .collect::<narrative_core::Result<_>>()?;
    let generated_wps = if generated.is_empty() {
        WpsStats {
            mean: 0.0,
            std: 0.0,
            utterances: 0,
        }
    } else {
        wps_of(&generated)?
    };
    let summary = GenerateSummary {
        runs: args.runs,
        alpha: args.alpha,
        method,
        final_entropy: Spread { mean, std },
        generated_wps,
    };
    let batch = GenerateBatch {
        version: GENERATE_BATCH_VERSION,
        summary,
        transcripts,
    };
    if let Some(out) = &args.out {
        let json = if args.runs == 1 {
            batch.transcripts[0].to_json()
        } else {
            serde_json::to_string_pretty(&batch)?
        };
        write(out, &json)?;
    }
    Ok(batch)
}

fn final_entropy(t: &Transcript) -> Result<f64> {
    let arc = NarrativeArc::from_json(&t.arc.to_string())?;
    Ok(arc.last().entropy)
}

/// Output of `predict`.
#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub report: Report,
    pub validation_episodes: usize,
}

pub fn cmd_predict(args: &PredictArgs, seed: u64, exec: Exec) -> Result<PredictOutcome> {
    let (model, val, test): (NaiveBayesModel, Vec<Episode>, Vec<Episode>) =
        if let Some(files) = args.synthetic {
            let cfg = TopicCorpusConfig {
                files,
                ..Default::default()
            };
            let corpus = topic_corpus(&cfg, seed)?;
            let model = match &args.model {
                Some(p) => load_model(p)?,
                None => train_with(&corpus.training, &corpus.label_map, TrainOptions::default())?,
            };
            let (v, t) = split(exec, &corpus.files, args.val_fraction, seed)?;
            (model, v, t)
        } else {
            let model_path = args
                .model
                .as_ref()
                .context("--model is required unless --synthetic is given")?;
            let model = load_model(model_path)?;
            if let Some(dir) = &args.corpus {
                let files = load_dialogue_dir(dir)?;
                let (v, t) = split(exec, &files, args.val_fraction, seed)?;
                (model, v, t)
            } else if let (Some(v), Some(t)) = (&args.val_episodes, &args.test_episodes) {
                (model, read_episodes(v)?, read_episodes(t)?)
            } else {
                bail!("pass one of --corpus, --val-episodes/--test-episodes or --synthetic");
            }
        };
    ensure!(
        !val.is_empty() && !test.is_empty(),
        "both splits need at least one episode"
    );
    if let Some(dir) = &args.write_episodes {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_episodes(dir.join("validation.jsonl"), &val)?;
        write_episodes(dir.join("test.jsonl"), &test)?;
    }
    let scorer = match args.scorer {
        ScorerKind::Unigram => Scorer::Unigram { floor: args.floor },
        ScorerKind::Random => Scorer::Random {
            seed: seed.wrapping_add(4),
        },
        ScorerKind::External => {
            let p = args
                .scores
                .as_ref()
                .context("--scorer external needs --scores")?;
            Scorer::External(ExternalScoreTable::load(p)?)
        }
    };
    let val_prepared = prepare_episodes(exec, &val, &scorer, &model)?;
    let sweep = alpha_sweep_prepared(
        exec,
        &val_prepared,
        args.alpha_lo,
        args.alpha_hi,
        args.steps,
    )?;
    let alpha = select_alpha(&sweep)?;
    let test_prepared = prepare_episodes(exec, &test, &scorer, &model)?;
    let modulated = evaluate_prepared(exec, &test_prepared, alpha)?;
    let baseline = evaluate_prepared(exec, &test_prepared, 0.0)?;
    let report = report(scorer.name(), "naive-bayes", &modulated, &baseline, &sweep)?;
    if let Some(out) = &args.out {
        write(out, &report.to_json())?;
    }
    Ok(PredictOutcome {
        report,
        validation_episodes: val.len(),
    })
}

/// Split files into validation and test and build both episode sets.
/// Streams: split `seed + 1`, validation `seed + 2`, test `seed + 3`.
fn split(
    exec: Exec,
    files: &[narrative_core::corpus::Dialogue],
    frac: f64,
    seed: u64,
) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let (v, t) = split_files(files, frac, seed.wrapping_add(1));
    Ok((
        build_episodes(exec, &v, seed.wrapping_add(2), Split::Validation)?,
        build_episodes(exec, &t, seed.wrapping_add(3), Split::Test)?,
    ))
}

/// Load both models and bind the listener. Model errors surface here,
/// before any port is taken.
pub async fn bind_service(args: &ServeArgs) -> Result<(TcpListener, Arc<AppState>)> {
    let universe = Arc::new(load_model(&args.model)?);
    let pool = load_pool(&args.pool)?;
    let conversation = Arc::new(RetrievalModel::new(
        RetrievalIndex::from_pool(pool)?,
        args.k,
    ));
    ensure!(args.turn_limit >= 1, "--turn-limit must be at least 1");
    let config = ServiceConfig {
        turn_limit: args.turn_limit,
        k: args.k,
        method: args.method.into(),
        persist_path: args.persist.clone(),
        cors_origins: args.cors_origins.clone(),
        conversation_model: "retrieval".into(),
        universe_model: "naive-bayes".into(),
    };
    let state = AppState::new(universe, conversation, config);
    let addr = format!("{}:{}", args.host, args.port);
    let listener = TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    Ok((listener, state))
}

pub async fn cmd_serve(
    args: &ServeArgs,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let (listener, state) = bind_service(args).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    narrative_service::serve(listener, state, shutdown).await?;
    Ok(())
}
