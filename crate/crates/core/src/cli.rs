//! The `lapr` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
#[cfg(feature = "parallel")]
use log::warn;
use serde::Serialize;

use crate::error::{LaprError, Result};
use crate::gradcheck::run_gradcheck;
use crate::io::{format_g6, read_cache, read_checkpoint, read_embeddings, write_cache, write_checkpoint, DataDir, RunConfig, Split};
use crate::retrieval::{build_cache, retrieve, QueryRecord};
use crate::synth::{
    evaluate, expert_activation_analysis, generate, scorer_seed, BaselineRetriever, EvalView, LaprRetriever, Metrics,
    ProxyScorer,
};
use crate::training::{init_and_train, Supervision};

#[derive(Debug, Parser)]
#[command(name = "lapr", version, about = "Label-aware prompt retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed override for commands that draw random numbers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with proxy scores.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a data directory.
    Train(TrainArgs),
    /// Precompute prompt mode embeddings.
    Cache {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank prompts for each query in an embedding file.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(short, default_value_t = 1)]
        k: usize,
    },
    /// Top-1 metrics of the model and the image-cosine baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
    },
    /// Per-category expert activation table as CSV.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config; defaults to the data directory's config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-epoch losses as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub no_router: bool,
    #[arg(long)]
    pub no_label: bool,
    #[arg(long)]
    pub single_stage: bool,
    #[arg(long)]
    pub drop_pg: bool,
    #[arg(long)]
    pub drop_lg: bool,
    #[arg(long)]
    pub drop_lb: bool,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig, seed: Option<u64>) {
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.experts {
            t.experts = v;
        }
        if let Some(v) = self.momentum {
            t.momentum = v;
        }
        if let Some(v) = self.temperature {
            t.temperature = v;
        }
        if let Some(v) = seed {
            t.seed = v;
        }
        let a = &mut t.ablation;
        a.no_router |= self.no_router;
        a.no_label |= self.no_label;
        a.single_stage |= self.single_stage;
        a.drop_pg |= self.drop_pg;
        a.drop_lg |= self.drop_lg;
        a.drop_lb |= self.drop_lb;
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(code) => code,
        Err(LaprError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(LaprError::invalid("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        warn!("thread pool already initialized: {e}");
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    set_threads(cli.global.threads)?;
    let seed = cli.global.seed;
    match cli.command {
        Command::GenSynth { config, out: dir } => gen_synth(config.as_deref(), &dir, seed)?,
        Command::Train(args) => train(&args, seed)?,
        Command::Cache { checkpoint, data, out: path } => {
            let model = read_checkpoint(&checkpoint)?;
            let prompts = DataDir::new(data).load_prompts()?;
            write_cache(&path, &build_cache(&prompts, &model)?)?;
            info!("cached {} prompts x {} experts", prompts.len(), model.config.experts);
        }
        Command::Retrieve { checkpoint, cache, query, k } => {
            let model = read_checkpoint(&checkpoint)?;
            let cache = read_cache(&cache)?;
            cache.check_fresh(&model)?;
            let file = read_embeddings(&query)?;
            for (i, row) in file.rows.into_iter().enumerate() {
                let q = QueryRecord::ingest(i, row, None, None)?;
                if i > 0 {
                    writeln!(out)?;
                }
                for (id, score) in retrieve(q.embedding.as_slice(), &model, &cache, k)?.entries {
                    writeln!(out, "{id}\t{}", format_g6(score))?;
                }
            }
        }
        Command::Eval { checkpoint, data, split } => {
            let report = eval(&checkpoint, &DataDir::new(data), split.into())?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
        }
        Command::Analyze { checkpoint, data, out: path, split } => {
            let model = read_checkpoint(&checkpoint)?;
            let dir = DataDir::new(data);
            let cfg = dir.load_config()?;
            let queries = dir.load_queries(split.into())?;
            let table = expert_activation_analysis(&model, &queries, cfg.synth.num_categories)?;
            std::fs::write(&path, table.to_csv())?;
        }
        Command::Gradcheck { instances } => {
            let report = run_gradcheck(seed.unwrap_or(0), instances)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            if !report.passed() {
                eprintln!("gradient check failed: max relative error {:e}", report.max_relative_error());
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn gen_synth(config: Option<&Path>, dir: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    let ds = generate(&cfg.synth)?;
    let mut scorer = ProxyScorer::new(cfg.synth.proxy(), scorer_seed(cfg.synth.seed));
    let sup = Supervision::build(&ds.train_queries, &ds.prompts, &mut scorer, &cfg.train)?;
    DataDir::new(dir).write(&cfg, &ds, &sup.scores)?;
    info!(
        "wrote {} prompts, {} train and {} eval queries to {}",
        ds.prompts.len(),
        ds.train_queries.len(),
        ds.eval_queries.len(),
        dir.display()
    );
    Ok(())
}

fn train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let dir = DataDir::new(&args.data);
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => dir.load_config()?,
    };
    args.apply(&mut cfg, seed);
    cfg.train.validate()?;
    let prompts = dir.load_prompts()?;
    let queries = dir.load_queries(Split::Train)?;
    let scores = dir.load_scores()?;
    let pool = crate::training::build_candidate_pool(&queries, &prompts, cfg.train.pool_size)?;
    let sup = Supervision::from_table(pool, scores, cfg.train.mine_count)?;
    let (model, report) = init_and_train(&prompts, &queries, &sup, &cfg.train)?;
    write_checkpoint(&args.out, &model)?;
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    queries: usize,
    lapr: Metrics,
    baseline: Metrics,
}

fn eval(checkpoint: &Path, dir: &DataDir, split: Split) -> Result<EvalReport> {
    let model = read_checkpoint(checkpoint)?;
    let cfg = dir.load_config()?;
    let prompts = dir.load_prompts()?;
    let queries = dir.load_queries(split)?;
    let (prompt_modes, query_modes) = dir.load_modes(split)?;
    let cache = build_cache(&prompts, &model)?;
    let view = EvalView {
        prompts: &prompts,
        prompt_modes: &prompt_modes,
        queries: &queries,
        query_modes: &query_modes,
        proxy: cfg.synth.proxy(),
    };
    Ok(EvalReport {
        queries: queries.len(),
        lapr: evaluate(&LaprRetriever { model: &model, cache: &cache }, &view)?,
        baseline: evaluate(&BaselineRetriever { prompts: &prompts }, &view)?,
    })
}
