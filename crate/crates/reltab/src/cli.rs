//! Command-line front end. [`run`] parses arguments, executes one pipeline
//! stage and returns the process exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use reltab_core::baselines::{SkipGramConfig, WalkConfig};
use reltab_core::encoder::Activation;
use reltab_core::eval::TieBreak;
use reltab_core::train::{TrainConfig, Variant};

use crate::config::{resolve_seed, resolve_train_config, Precision, TrainOverrides};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::pipeline::{self, BaselineMethod, BaselineOptions, DataArgs, EvalOptions, EvalSplit, TaskChoice};
use crate::synthetic;

#[derive(Debug, Parser)]
#[command(name = "reltab", version, about = "Contextual entity embeddings for relational tables")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Floating-point precision for training and evaluation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and tokenize a database; writes ingest.json and vocab.jsonl.
    Ingest(IngestArgs),
    /// Write one epoch of training instances as corpus.jsonl.
    Corpus(TrainArgs),
    /// Train an encoder; writes checkpoint/ and train_log.jsonl.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes metrics.json and rankings.jsonl.
    Eval(EvalArgs),
    /// Rank candidate values for a missing cell of one row.
    Impute(ImputeArgs),
    /// Rank candidate join partners for one row.
    JoinPredict(JoinPredictArgs),
    /// Train and evaluate a Table2Vec or EmbDi baseline.
    Baseline(BaselineArgs),
    /// Export attention maps and entity embeddings of a checkpoint as CSV.
    Export(ExportArgs),
    /// Run the gradient-check and metric-oracle suites.
    Selftest(SelftestArgs),
    /// Generate a synthetic database.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataOpts {
    /// Schema JSON (default: <data>/schema.json).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Directory with one <table>.csv per table.
    #[arg(long)]
    pub data: PathBuf,
    /// Cleaning rules JSON.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Bucket numeric columns into this many equal-frequency bins.
    #[arg(long)]
    pub numeric_bins: Option<usize>,
}

impl DataOpts {
    fn args(&self) -> DataArgs {
        DataArgs { schema: self.schema.clone(), data: self.data.clone(), rules: self.rules.clone(), numeric_bins: self.numeric_bins }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TaskOpts {
    /// Autocompletion target table.
    #[arg(long)]
    pub table: Option<String>,
    /// Autocompletion target column.
    #[arg(long)]
    pub column: Option<String>,
    /// Foreign key for join prediction, `table.column` or
    /// `table.column->table.column`; repeatable.
    #[arg(long = "fk")]
    pub fks: Vec<String>,
    /// Train/valid/test ratios, e.g. `0.7,0.15,0.15`.
    #[arg(long, value_parser = parse_ratios)]
    pub split: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    pub task: TaskOpts,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Falls back to the config file, then RELTAB_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_hidden: Option<usize>,
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Negative samples per positive pair.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub mask_keys: Option<bool>,
    #[arg(long)]
    pub w2v_init: Option<bool>,
    #[arg(long)]
    pub finetune_nsp: Option<bool>,
    /// Do not print per-epoch losses.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    fn overrides(&self) -> TrainOverrides {
        TrainOverrides {
            variant: self.variant,
            seed: self.seed,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff_hidden: self.ff_hidden,
            activation: self.activation,
            dropout: self.dropout,
            lr: self.lr,
            batch_size: self.batch_size,
            pretrain_epochs: self.pretrain_epochs,
            finetune_epochs: self.finetune_epochs,
            negatives: self.negatives,
            mask_keys: self.mask_keys,
            w2v_init: self.w2v_init,
            finetune_nsp: self.finetune_nsp,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelOpts {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// When given, must match the schema the model was trained on.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelOpts,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_parser = parse_tie, default_value = "token-id")]
    pub tie: TieBreak,
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    pub split: EvalSplit,
    /// Join prediction: candidates per query (default: every row).
    #[arg(long)]
    pub pool: Option<usize>,
    /// Join prediction: foreign key to evaluate.
    #[arg(long)]
    pub fk: Option<String>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub model: ModelOpts,
    #[arg(long)]
    pub table: String,
    #[arg(long)]
    pub column: String,
    /// JSON object mapping column names to values.
    #[arg(long)]
    pub row_file: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    /// Also write impute.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JoinPredictArgs {
    #[command(flatten)]
    pub model: ModelOpts,
    /// `table.column` or `table.column->table.column`.
    #[arg(long)]
    pub fk: String,
    /// JSON object with a row of the referenced table.
    #[arg(long)]
    pub row_file: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    /// Also write join_predictions.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    pub task: TaskOpts,
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    #[arg(long)]
    pub out: PathBuf,
    /// Falls back to RELTAB_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 300)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value_t = 0.025)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub walks_per_entity: usize,
    #[arg(long, default_value_t = 20)]
    pub walk_length: usize,
    /// Sliding window for EmbDi walks.
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub model: ModelOpts,
    #[arg(long)]
    pub out: PathBuf,
    /// Row of the task table to compute attention on.
    #[arg(long)]
    pub row: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Random points per primitive.
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write selftest.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// One table whose third column is a function of the other two.
    Fd,
    /// Two tables joined one to one by a foreign key.
    Join,
    /// Five movie tables.
    MiniImdb,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Keys of the join database.
    #[arg(long, default_value_t = 100)]
    pub keys: usize,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s.to_ascii_lowercase().as_str() {
        "a" => Ok(Variant::A),
        "j" => Ok(Variant::J),
        _ => Err(format!("expected a or j, got {s:?}")),
    }
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    match s {
        "gelu" => Ok(Activation::Gelu),
        "relu" => Ok(Activation::Relu),
        _ => Err(format!("expected gelu or relu, got {s:?}")),
    }
}

fn parse_tie(s: &str) -> std::result::Result<TieBreak, String> {
    match s {
        "token-id" => Ok(TieBreak::TokenId),
        "optimistic" => Ok(TieBreak::Optimistic),
        "pessimistic" => Ok(TieBreak::Pessimistic),
        _ => Err(format!("expected token-id, optimistic or pessimistic, got {s:?}")),
    }
}

fn parse_ratios(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    let r: [f64; 3] = v.try_into().map_err(|_| "expected three comma-separated ratios".to_string())?;
    if r.iter().any(|x| !(*x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err("ratios must be non-negative and sum to 1".into());
    }
    Ok(r)
}

/// Task from flags, else from the config file's `"task"` entry, else every
/// foreign key for variant J.
fn task_choice(opts: &TaskOpts, config_file: Option<&Path>, variant: Variant) -> Result<TaskChoice> {
    match (&opts.table, &opts.column) {
        (Some(table), Some(column)) => {
            return Ok(TaskChoice::Autocompletion { table: table.clone(), column: column.clone() });
        }
        (None, None) => {}
        _ => return Err(Error::Usage("--table and --column go together".into())),
    }
    if !opts.fks.is_empty() {
        return Ok(TaskChoice::Join { foreign_keys: Vec::new() });
    }
    if let Some(p) = config_file {
        let v: serde_json::Value = fsutil::read_json(p)?;
        if let Some(t) = v.get("task") {
            return serde_json::from_value(t.clone()).map_err(|e| Error::parse(p, e));
        }
    }
    match variant {
        Variant::J => Ok(TaskChoice::Join { foreign_keys: Vec::new() }),
        Variant::A => Err(Error::Usage("variant a needs a target: pass --table and --column".into())),
    }
}

fn resolve_choice(choice: TaskChoice, opts: &TaskOpts, schema: &reltab_core::DatabaseSchema) -> Result<TaskChoice> {
    match choice {
        TaskChoice::Join { foreign_keys } if !opts.fks.is_empty() && foreign_keys.is_empty() => {
            let fks = opts.fks.iter().map(|s| pipeline::parse_fk(schema, s)).collect::<Result<Vec<_>>>()?;
            Ok(TaskChoice::Join { foreign_keys: fks })
        }
        c => Ok(c),
    }
}

fn print_json(v: &impl serde::Serialize) {
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer_pretty(&mut out, v);
    let _ = writeln!(out);
}

fn prepare_training(a: &TrainArgs) -> Result<(pipeline::Loaded, pipeline::TaskData, TrainConfig)> {
    let config = resolve_train_config(a.config.as_deref(), &a.overrides())?;
    let choice = task_choice(&a.task, a.config.as_deref(), config.variant)?;
    let loaded = pipeline::load_data(&a.data.args())?;
    let choice = resolve_choice(choice, &a.task, &loaded.prep.schema)?;
    let spec = pipeline::task_spec(&choice, &loaded.prep.schema, &config, a.task.split)?;
    let task = pipeline::resolve_task(&spec, &loaded.prep.schema, &loaded.prep.db)?;
    Ok((loaded, task, config))
}

fn execute(cli: Cli) -> Result<()> {
    let precision = cli.precision;
    match cli.command {
        Command::Ingest(a) => {
            let loaded = pipeline::load_data(&a.data.args())?;
            let summary = pipeline::ingest(&loaded, &a.out)?;
            print_json(&summary);
        }
        Command::Corpus(a) => {
            let (loaded, task, config) = prepare_training(&a)?;
            print_json(&pipeline::write_corpus(&loaded, &task, &config, &a.out)?);
        }
        Command::Train(a) => {
            let (loaded, task, config) = prepare_training(&a)?;
            let quiet = a.quiet;
            let mut log = |r: &reltab_core::train::LossReport| {
                if !quiet {
                    eprintln!("{:?} epoch {:>4}  mlm {:.5}  nsp {:.5}  total {:.5}", r.stage, r.epoch, r.l_mlm, r.l_nsp, r.l_total);
                }
            };
            let run = pipeline::train(&loaded, &task, &config, precision, &a.out, &mut log)?;
            print_json(&serde_json::json!({
                "checkpoint": run.checkpoint,
                "epochs": run.reports.len(),
                "final": run.reports.last(),
            }));
        }
        Command::Eval(a) => {
            let ckpt = pipeline::open_checkpoint(&a.model.model, a.model.schema.as_deref())?;
            let (_, db) = pipeline::checkpoint_data(&ckpt, &a.model.data)?;
            let fk = a.fk.as_deref().map(|s| pipeline::parse_fk(&ckpt.schema, s)).transpose()?;
            let opts = EvalOptions { k: a.k, tie: a.tie, split: a.split, pool: a.pool, fk, precision };
            let file = pipeline::eval_to(&ckpt, &db, &opts, &a.out)?;
            print_json(&file.report);
        }
        Command::Impute(a) => {
            let ckpt = pipeline::open_checkpoint(&a.model.model, a.model.schema.as_deref())?;
            let (_, db) = pipeline::checkpoint_data(&ckpt, &a.model.data)?;
            let value: serde_json::Value = fsutil::read_json(&a.row_file)?;
            let row = pipeline::row_from_json(&ckpt.schema, &a.table, &value, &a.row_file)?;
            let candidates = pipeline::impute(&ckpt, &db, &a.table, &a.column, row, a.topk)?;
            let result = serde_json::json!({ "table": a.table, "column": a.column, "row": value, "candidates": candidates });
            if let Some(out) = &a.out {
                fsutil::write_json(&out.join("impute.json"), &result)?;
                let mut m = crate::artifacts::Manifest::load_or_default(out)?;
                m.record_run("impute", Some(ckpt.meta.config.seed), &result);
                m.add(out, "impute.json", "imputation", "impute")?;
                m.save(out)?;
            }
            print_json(&result);
        }
        Command::JoinPredict(a) => {
            let ckpt = pipeline::open_checkpoint(&a.model.model, a.model.schema.as_deref())?;
            let (tables, db) = pipeline::checkpoint_data(&ckpt, &a.model.data)?;
            let fk = pipeline::parse_fk(&ckpt.schema, &a.fk)?;
            let value: serde_json::Value = fsutil::read_json(&a.row_file)?;
            let row = pipeline::row_from_json(&ckpt.schema, &fk.to_table, &value, &a.row_file)?;
            let candidates = pipeline::join_predict(&ckpt, &tables, &db, &fk, row, a.topk)?;
            let result = serde_json::json!({ "foreign_key": fk, "row": value, "candidates": candidates });
            if let Some(out) = &a.out {
                fsutil::write_json(&out.join("join_predictions.json"), &result)?;
                let mut m = crate::artifacts::Manifest::load_or_default(out)?;
                m.record_run("join-predict", Some(ckpt.meta.config.seed), &result);
                m.add(out, "join_predictions.json", "join_predictions", "join-predict")?;
                m.save(out)?;
            }
            print_json(&result);
        }
        Command::Baseline(a) => {
            let seed = resolve_seed(a.seed, None)?;
            let (Some(table), Some(column)) = (&a.task.table, &a.task.column) else {
                return Err(Error::Usage("baseline needs --table and --column".into()));
            };
            let loaded = pipeline::load_data(&a.data.args())?;
            let config = TrainConfig { seed, ..TrainConfig::default() };
            let choice = TaskChoice::Autocompletion { table: table.clone(), column: column.clone() };
            let spec = pipeline::task_spec(&choice, &loaded.prep.schema, &config, a.task.split)?;
            let task = pipeline::resolve_task(&spec, &loaded.prep.schema, &loaded.prep.db)?;
            let opts = BaselineOptions {
                method: a.method,
                skipgram: SkipGramConfig {
                    dim: a.dim,
                    epochs: a.epochs,
                    negatives: a.negatives,
                    lr: a.lr,
                    seed,
                    window: reltab_core::baselines::Window::Sliding(a.window),
                },
                walks: WalkConfig { walks_per_entity: a.walks_per_entity, walk_length: a.walk_length, seed },
                k: a.k,
                tie: TieBreak::TokenId,
            };
            let run = pipeline::baseline(&loaded, &task, &opts, &a.out)?;
            print_json(&run.metrics);
        }
        Command::Export(a) => {
            let ckpt = pipeline::open_checkpoint(&a.model.model, a.model.schema.as_deref())?;
            let (_, db) = pipeline::checkpoint_data(&ckpt, &a.model.data)?;
            print_json(&pipeline::export(&ckpt, &db, a.row, &a.out)?);
        }
        Command::Selftest(a) => {
            let report = crate::selftest::run(a.points, a.seed).map_err(|e| Error::Config(e.to_string()))?;
            for g in &report.gradients {
                println!(
                    "{:<6} {:<20} points {:>4}  coords {:>7}  max rel err {:.3e}",
                    if g.passed { "ok" } else { "FAIL" },
                    g.name,
                    g.points,
                    g.coordinates,
                    g.max_rel_error
                );
            }
            let o = &report.oracle;
            println!(
                "{:<6} metric oracle        instances {}  mismatches {}  consistent {}  reference row {}",
                if o.passed() { "ok" } else { "FAIL" },
                o.instances,
                o.mismatches,
                o.reports_consistent,
                o.reference_row_consistent
            );
            if let Some(out) = &a.out {
                fsutil::write_json(&out.join("selftest.json"), &report)?;
            }
            if !report.passed() {
                return Err(Error::Config("selftest failed".into()));
            }
        }
        Command::Synth(a) => {
            let ds = match a.kind {
                SynthKind::Fd => synthetic::functional_dependency(a.seed),
                SynthKind::Join => synthetic::unique_join(a.seed, a.keys),
                SynthKind::MiniImdb => synthetic::mini_imdb(a.seed, Default::default()),
            };
            ds.write(&a.out)?;
            print_json(&serde_json::json!({ "tables": ds.schema.tables.len(), "rows": ds.num_rows(), "out": a.out }));
        }
    }
    Ok(())
}

/// Runs the command line `args` (program name first) and returns the exit
/// code: 0 on success, 1 on a domain error, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Usage(_) = e {
                eprintln!("\nRun `reltab --help` for usage.");
            }
            e.exit_code()
        }
    }
}
