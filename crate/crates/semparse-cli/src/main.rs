//! Command-line experiment harness: build cross-lingual unit embeddings,
//! train parsers in the four feature modes, decode, evaluate, and tune the
//! embedding rank, all reproducibly from a single seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semparse::corpus::{dev_split, head_split, load_corpus, standard_split, Corpus, SplitSpec};
use semparse::embeddings::{
    export_embeddings, export_embeddings_binary, load_embeddings, UnitEmbeddings,
};
use semparse::evaluator::evaluate;
use semparse::hybridtree::{decode_batch, GrammarMode, ModelParams};
use semparse::logic::{serialize_mrl, MeaningTree};
use semparse::trainer::{auxiliary_embeddings, train, tune_rank, TrainConfig, TrainReport};
use semparse::Error;

#[derive(Parser)]
#[command(
    name = "semparse",
    version,
    about = "Hybrid-tree semantic parsing with cross-lingual unit embeddings"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Seed for every random choice (dev split, neural init)
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build rank-d unit embeddings from the auxiliary languages
    Embed(EmbedArgs),
    /// Train a parser for one language
    Train(TrainArgs),
    /// Parse one sentence with a trained model
    Parse(ParseArgs),
    /// Decode and score the test split
    Eval(EvalArgs),
    /// Select the embedding rank on the 80/20 dev protocol
    TuneRank(TuneRankArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    #[value(name = "ht-d")]
    HtD,
    #[value(name = "ht-d+o")]
    HtDO,
    #[value(name = "ht-d+nn")]
    HtDNn,
    #[value(name = "ht-d+nn+o")]
    HtDNnO,
}

impl Mode {
    fn uses_embeddings(self) -> bool {
        matches!(self, Mode::HtDO | Mode::HtDNnO)
    }
    fn uses_neural(self) -> bool {
        matches!(self, Mode::HtDNn | Mode::HtDNnO)
    }
    fn as_str(self) -> &'static str {
        match self {
            Mode::HtD => "ht-d",
            Mode::HtDO => "ht-d+o",
            Mode::HtDNn => "ht-d+nn",
            Mode::HtDNnO => "ht-d+nn+o",
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Corpus file (three `%%`-separated sections)
    #[arg(long)]
    corpus: PathBuf,
    /// Target language tag
    #[arg(long)]
    lang: String,
    /// Training instances taken from the head of the language's data
    #[arg(long, default_value_t = 600)]
    train_count: usize,
}

#[derive(Args)]
struct HyperArgs {
    /// Maximum optimization iterations
    #[arg(long, default_value_t = 150)]
    iterations: usize,
    /// L2 regularization strength
    #[arg(long, default_value_t = 0.01)]
    l2: f64,
    /// Co-occurrence counting: freq or binary
    #[arg(long, default_value = "freq")]
    cooc_mode: String,
    /// Decoding grammar: observed or typed
    #[arg(long, default_value = "observed")]
    grammar: String,
    /// Neural window size J (0, 1 or 2; used by the +nn modes)
    #[arg(long, default_value_t = 0)]
    nn_window: usize,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Embedding rank d (default: per-language table, else 10)
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value = "freq")]
    cooc_mode: String,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Feature mode
    #[arg(long, default_value = "ht-d")]
    mode: Mode,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Embedding rank d; omitted with a +o mode, runs the dev tuning protocol
    #[arg(long)]
    rank: Option<usize>,
    /// Candidate ranks for the tuning protocol
    #[arg(long, default_value = "10,20,30", value_delimiter = ',')]
    ranks: Vec<usize>,
    /// Load unit embeddings from a TSV file instead of building them
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ParseArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Cap on decoded tree size (default 2|n|-1, the structural bound)
    #[arg(long)]
    max_nodes: Option<usize>,
    /// The sentence, as whitespace-separated tokens
    #[arg(trailing_var_arg = true, required = true)]
    sentence: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Cap on decoded tree size (default 2|n|-1, the structural bound)
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TuneRankArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Candidate ranks
    #[arg(long, default_value = "10,20,30", value_delimiter = ',')]
    ranks: Vec<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// The standard split (600/280 over the first 880) when it applies,
/// otherwise the head split.
fn make_split(corpus: &Corpus, lang: &str, train_count: usize) -> semparse::Result<SplitSpec> {
    if train_count == 600 {
        if let Ok(s) = standard_split(corpus, lang) {
            return Ok(s);
        }
    }
    head_split(corpus, lang, train_count)
}

fn train_config(h: &HyperArgs, mode: Mode, seed: u64) -> semparse::Result<TrainConfig> {
    Ok(TrainConfig {
        max_iterations: h.iterations.max(1),
        l2_lambda: h.l2,
        seed,
        grammar: h.grammar.parse::<GrammarMode>()?,
        cooc_mode: h.cooc_mode.parse()?,
        nn_window: mode.uses_neural().then_some(h.nn_window),
        use_embeddings: mode.uses_embeddings(),
        ..TrainConfig::default()
    })
}

fn write_train_log(path: &Path, report: &TrainReport) -> semparse::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration\tobjective\tgrad_norm\tdev_f1")?;
    for (i, obj) in report.objective_trace.iter().enumerate() {
        let dev = match report.dev_f1_trace.get(i) {
            Some(Some(v)) => format!("{v:.6}"),
            _ => "-".to_string(),
        };
        writeln!(
            f,
            "{}\t{:.9e}\t{:.9e}\t{}",
            i + 1,
            obj,
            report.grad_norm_trace[i],
            dev
        )?;
    }
    Ok(())
}

fn write_predictions(
    path: &Path,
    ids: &[u32],
    golds: &[MeaningTree],
    preds: &[Option<MeaningTree>],
) -> semparse::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "id\tgold\tprediction\tverdict")?;
    for ((id, gold), pred) in ids.iter().zip(golds).zip(preds) {
        let gold_s = serialize_mrl(gold);
        let (pred_s, verdict) = match pred {
            Some(p) => {
                let s = serialize_mrl(p);
                let v = if s == gold_s { "correct" } else { "wrong" };
                (s, v)
            }
            None => ("NO_PARSE".to_string(), "no_parse"),
        };
        writeln!(f, "{id}\t{gold_s}\t{pred_s}\t{verdict}")?;
    }
    Ok(())
}

fn snapshot_config(path: &Path, entries: &[(&str, String)]) -> semparse::Result<()> {
    let map: BTreeMap<&str, &String> = entries.iter().map(|(k, v)| (*k, v)).collect();
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &map)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// Structural guard on decoded trees; sizes past the cap count as no-parse.
fn apply_max_nodes(preds: &mut [Option<MeaningTree>], lens: &[usize], cap: Option<usize>) {
    for (pred, &len) in preds.iter_mut().zip(lens) {
        let bound = cap.unwrap_or(2 * len.max(1) - 1);
        if pred.as_ref().map_or(false, |t| t.node_count() > bound) {
            *pred = None;
        }
    }
}

fn cmd_embed(args: &EmbedArgs) -> semparse::Result<()> {
    let corpus = load_corpus(&args.data.corpus)?;
    let rank = args
        .rank
        .or_else(|| semparse::embeddings::default_language_rank(&args.data.lang))
        .unwrap_or(10);
    let emb = auxiliary_embeddings(&corpus, &args.data.lang, args.cooc_mode.parse()?, rank)?;
    let dir = args.out.join(&args.data.lang);
    std::fs::create_dir_all(&dir)?;
    let tsv = dir.join(format!("embeddings_d{rank}.tsv"));
    let bin = dir.join(format!("embeddings_d{rank}.bin"));
    export_embeddings(&emb, &tsv)?;
    export_embeddings_binary(&emb, &bin)?;
    println!(
        "embedded {} units at rank {rank} -> {}",
        emb.units().len(),
        tsv.display()
    );
    Ok(())
}

fn load_or_build_embeddings(
    args: &TrainArgs,
    corpus: &Corpus,
    split: &SplitSpec,
    config: &TrainConfig,
) -> semparse::Result<(Option<UnitEmbeddings>, Option<usize>, Vec<(usize, f64)>)> {
    if !args.mode.uses_embeddings() {
        return Ok((None, None, Vec::new()));
    }
    if let Some(path) = &args.embeddings {
        let emb = load_embeddings(path)?;
        let rank = emb.rank();
        return Ok((Some(emb), Some(rank), Vec::new()));
    }
    let mut tuning = Vec::new();
    let rank = match args.rank {
        Some(r) => r,
        None => {
            let dev = dev_split(split, config.seed);
            let report = tune_rank(corpus, &dev, &args.ranks, config)?;
            eprintln!(
                "rank tuning: {}",
                report
                    .candidates
                    .iter()
                    .map(|(d, f1)| format!("d={d} F1={:.4}", f1))
                    .collect::<Vec<_>>()
                    .join("  ")
            );
            tuning = report.candidates.clone();
            report.selected
        }
    };
    let emb = auxiliary_embeddings(corpus, &split.language, config.cooc_mode, rank)?;
    Ok((Some(emb), Some(rank), tuning))
}

fn cmd_train(args: &TrainArgs, seed: u64) -> semparse::Result<()> {
    let corpus = load_corpus(&args.data.corpus)?;
    let split = make_split(&corpus, &args.data.lang, args.data.train_count)?;
    let config = train_config(&args.hyper, args.mode, seed)?;
    let (emb, rank, tuning) = load_or_build_embeddings(args, &corpus, &split, &config)?;

    let (train_set, _, _) = split.materialize(&corpus);
    let (model, report) = train(&train_set, None, &config, emb.as_ref())?;
    if report.skipped_instances > 0 {
        eprintln!(
            "warning: {} training instances skipped (sentence shorter than the tree)",
            report.skipped_instances
        );
    }

    let dir = args.out.join(&args.data.lang).join(args.mode.as_str());
    std::fs::create_dir_all(&dir)?;
    let mut meta = BTreeMap::new();
    meta.insert("language".to_string(), args.data.lang.clone());
    meta.insert("mode".to_string(), args.mode.as_str().to_string());
    meta.insert("seed".to_string(), config.seed.to_string());
    meta.insert(
        "iterations".to_string(),
        report.objective_trace.len().to_string(),
    );
    if let Some(r) = rank {
        meta.insert("rank".to_string(), r.to_string());
    }
    model.save(dir.join("model.json"), &meta)?;
    write_train_log(&dir.join("train_log.tsv"), &report)?;
    if let Some(emb) = &emb {
        export_embeddings(emb, dir.join("embeddings.tsv"))?;
    }
    let mut entries = vec![
        ("corpus", args.data.corpus.display().to_string()),
        ("lang", args.data.lang.clone()),
        ("mode", args.mode.as_str().to_string()),
        ("train_count", split.train_ids.len().to_string()),
        ("iterations", args.hyper.iterations.to_string()),
        ("l2", args.hyper.l2.to_string()),
        ("seed", config.seed.to_string()),
        ("cooc_mode", args.hyper.cooc_mode.clone()),
        ("grammar", args.hyper.grammar.clone()),
        ("nn_window", args.hyper.nn_window.to_string()),
    ];
    if let Some(r) = rank {
        entries.push(("rank", r.to_string()));
    }
    if !tuning.is_empty() {
        entries.push((
            "rank_tuning",
            tuning
                .iter()
                .map(|(d, f1)| format!("{d}:{f1:.6}"))
                .collect::<Vec<_>>()
                .join(","),
        ));
    }
    snapshot_config(&dir.join("config.json"), &entries)?;

    println!(
        "trained {} on {} instances in {} iterations (objective {:.4}) -> {}",
        args.mode.as_str(),
        train_set.len(),
        report.objective_trace.len(),
        report.objective_trace.last().copied().unwrap_or(f64::NAN),
        dir.join("model.json").display()
    );
    Ok(())
}

fn cmd_parse(args: &ParseArgs) -> semparse::Result<()> {
    let (model, _) = ModelParams::load(&args.model)?;
    let tokens: Vec<String> = args
        .sentence
        .iter()
        .flat_map(|chunk| chunk.split_whitespace())
        .map(|t| t.to_lowercase())
        .collect();
    if tokens.is_empty() {
        return Err(Error::Data("empty sentence".into()));
    }
    let mut preds = vec![semparse::hybridtree::decode(&tokens, &model)];
    apply_max_nodes(&mut preds, &[tokens.len()], args.max_nodes);
    match &preds[0] {
        Some(tree) => println!("{}", serialize_mrl(tree)),
        None => println!("NO_PARSE"),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> semparse::Result<()> {
    let (model, meta) = ModelParams::load(&args.model)?;
    let corpus = load_corpus(&args.data.corpus)?;
    let split = make_split(&corpus, &args.data.lang, args.data.train_count)?;
    let (_, _, test) = split.materialize(&corpus);
    let golds: Vec<MeaningTree> = test.iter().map(|i| i.tree.clone()).collect();
    let ids: Vec<u32> = test.iter().map(|i| i.id).collect();
    let lens: Vec<usize> = test.iter().map(|i| i.tokens.len()).collect();
    let mut preds = decode_batch(test.iter().map(|i| i.tokens.as_slice()), &model);
    apply_max_nodes(&mut preds, &lens, args.max_nodes);
    let result = evaluate(&preds, &golds)?;

    let mode = meta.get("mode").cloned().unwrap_or_else(|| "model".into());
    let dir = args.out.join(&args.data.lang).join(&mode);
    std::fs::create_dir_all(&dir)?;
    write_predictions(&dir.join("predictions.tsv"), &ids, &golds, &preds)?;
    println!(
        "test {} instances: parsed {} correct {}  Acc {:.2}%  P {:.2}%  R {:.2}%  F1 {:.2}% (exact canonical-form match; stricter than execution-based scoring)",
        result.total,
        result.parsed,
        result.correct,
        100.0 * result.accuracy(),
        100.0 * result.precision(),
        100.0 * result.recall(),
        100.0 * result.f1(),
    );
    println!("predictions -> {}", dir.join("predictions.tsv").display());
    Ok(())
}

fn cmd_tune_rank(args: &TuneRankArgs, seed: u64) -> semparse::Result<()> {
    let corpus = load_corpus(&args.data.corpus)?;
    let split = make_split(&corpus, &args.data.lang, args.data.train_count)?;
    let mode = Mode::HtDO;
    let config = train_config(&args.hyper, mode, seed)?;
    let dev = dev_split(&split, config.seed);
    let report = tune_rank(&corpus, &dev, &args.ranks, &config)?;
    let dir = args.out.join(&args.data.lang);
    std::fs::create_dir_all(&dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("rank_tuning.tsv"))?);
    writeln!(f, "rank\tdev_f1")?;
    println!("rank\tdev_f1");
    for (d, f1) in &report.candidates {
        writeln!(f, "{d}\t{f1:.6}")?;
        println!("{d}\t{f1:.6}");
    }
    drop(f);
    println!("selected rank: {}", report.selected);
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) | Error::Diverged(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let result = match &cli.cmd {
        Cmd::Embed(a) => cmd_embed(a),
        Cmd::Train(a) => cmd_train(a, cli.seed),
        Cmd::Parse(a) => cmd_parse(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::TuneRank(a) => cmd_tune_rank(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
