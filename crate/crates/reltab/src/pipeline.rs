//! The stages behind each subcommand. A stage reads its inputs, writes its
//! artifacts under an output directory and indexes them in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use reltab_core::baselines::{
    build_tripartite_graph, random_walk_corpus, table2vec_corpus, train_embdi, train_table2vec, EntityEmbeddings,
    SkipGramConfig, WalkConfig, Window,
};
use reltab_core::corpus::{largest_remainder, pair_tokens, EncodedDatabase, Example, Token, DEFAULT_RATIOS};
use reltab_core::encoder::TableEncoderModel;
use reltab_core::eval::{
    baseline_autocompletion_scores, check_model_head, compute_metrics, join_queries, join_scores, join_tables,
    model_autocompletion_scores, rank_instance, rank_join_query, JoinEvalConfig, MetricsReport, RankingResult, TieBreak,
};
use reltab_core::rng::stream;
use reltab_core::schema::{ColumnRole, ForeignKeyDef, ValidationReport};
use reltab_core::task::{AutocompletionTask, HeldOut, TaskInstance};
use reltab_core::train::{train_relbert_a, train_relbert_j, LossReport, SchemeA, SchemeJ, TrainConfig, TrainInputs, Variant};
use reltab_core::vocab::{apply_cleaning_rules, encode_row, CleaningRule, RowRecord, VocabOptions, NUM_SPECIAL};
use reltab_core::{DatabaseSchema, Real};
use serde::{Deserialize, Serialize};

use crate::artifacts::{walks_text, write_corpus_jsonl, write_vocab_jsonl, Manifest, TrainLogLine};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TaskSpec};
use crate::config::Precision;
use crate::dataset::{load_rules, prepare, Dataset, Prepared};
use crate::error::{Error, Result};
use crate::export::{export_attention, export_baseline_embeddings, export_model_embeddings};
use crate::fsutil;
use crate::schema_io::{load_schema, schema_hash};

pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Where a stage reads its database from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataArgs {
    /// Defaults to `<data>/schema.json`.
    pub schema: Option<PathBuf>,
    pub data: PathBuf,
    pub rules: Option<PathBuf>,
    pub numeric_bins: Option<usize>,
}

pub struct Loaded {
    pub prep: Prepared,
    pub rules: Vec<CleaningRule>,
    pub vocab_options: VocabOptions,
}

pub fn load_data(args: &DataArgs) -> Result<Loaded> {
    let dataset = Dataset::open(args.schema.as_deref(), &args.data)?;
    let rules = match &args.rules {
        Some(p) => load_rules(p)?,
        None => Vec::new(),
    };
    let vocab_options = VocabOptions { numeric_bins: args.numeric_bins };
    let prep = prepare(dataset, &rules, &vocab_options)?;
    Ok(Loaded { prep, rules, vocab_options })
}

/// Loads `dir` with the schema, cleaning rules and vocabularies of a
/// checkpoint. Values the checkpoint never saw encode as `[UNK]`.
pub fn checkpoint_data(ckpt: &Checkpoint, dir: &Path) -> Result<(Vec<Vec<RowRecord>>, EncodedDatabase)> {
    let Dataset { tables, .. } = Dataset::load(ckpt.schema.clone(), dir)?.clean(&ckpt.meta.rules)?;
    let db = EncodedDatabase::encode(&ckpt.schema, &ckpt.vocabs, &tables);
    Ok((tables, db))
}

/// Opens a checkpoint; `schema`, when given, must match the one it was
/// trained on.
pub fn open_checkpoint(dir: &Path, schema: Option<&Path>) -> Result<Checkpoint> {
    let expected = schema.map(load_schema).transpose()?;
    load_checkpoint(dir, expected.as_ref())
}

fn record(out: &Path, command: &str, seed: Option<u64>, config: &impl Serialize, files: &[(&str, &str)]) -> Result<()> {
    let mut m = Manifest::load_or_default(out)?;
    m.record_run(command, seed, config);
    for (rel, kind) in files {
        m.add(out, rel, kind, command)?;
    }
    m.save(out)
}

fn rel(path: &Path, out: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub role: ColumnRole,
    pub entities: usize,
    pub nulls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSummary {
    pub name: String,
    pub rows: usize,
    pub columns: Vec<ColumnSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub schema_hash: String,
    pub tables: Vec<TableSummary>,
    pub spaces: usize,
    pub rules: Vec<CleaningRule>,
    pub validation: ValidationReport,
}

/// Validates and tokenizes the database; writes `ingest.json` and
/// `vocab.jsonl`.
pub fn ingest(loaded: &Loaded, out: &Path) -> Result<IngestSummary> {
    let p = &loaded.prep;
    let validation = reltab_core::schema::validate_data_against_schema(&p.schema, &p.tables);
    let tables = p
        .schema
        .tables
        .iter()
        .enumerate()
        .map(|(t, def)| TableSummary {
            name: def.name.clone(),
            rows: p.tables[t].len(),
            columns: def
                .columns
                .iter()
                .enumerate()
                .map(|(c, col)| ColumnSummary {
                    name: col.name.clone(),
                    role: col.role,
                    entities: p.vocabs.for_column(p.schema.column_id(&def.name, &col.name).expect("own column")).num_entities(),
                    nulls: p.tables[t].iter().filter(|r| r.cell(c).is_none()).count(),
                })
                .collect(),
        })
        .collect();
    let summary = IngestSummary {
        schema_hash: schema_hash(&p.schema),
        tables,
        spaces: p.vocabs.spaces.len(),
        rules: loaded.rules.clone(),
        validation,
    };
    fsutil::write_json(&out.join("ingest.json"), &summary)?;
    write_vocab_jsonl(&p.schema, &p.vocabs, &out.join("vocab.jsonl"))?;
    record(out, "ingest", None, &loaded.vocab_options, &[("ingest.json", "ingest_summary"), ("vocab.jsonl", "vocabulary")])?;
    Ok(summary)
}

// ---------------------------------------------------------------- tasks

/// Training target as given on the command line or in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskChoice {
    Autocompletion { table: String, column: String },
    /// An empty list means every foreign key of the schema.
    Join {
        #[serde(default)]
        foreign_keys: Vec<ForeignKeyDef>,
    },
}

/// Parses `table.column` (the FK side) or `table.column->table.column`
/// against the schema's foreign keys.
pub fn parse_fk(schema: &DatabaseSchema, s: &str) -> Result<ForeignKeyDef> {
    let side = |x: &str| -> Result<(String, String)> {
        let (t, c) = x.trim().split_once('.').ok_or_else(|| Error::Usage(format!("expected table.column, got {x:?}")))?;
        Ok((t.to_string(), c.to_string()))
    };
    let (from, to) = match s.split_once("->") {
        Some((a, b)) => (side(a)?, Some(side(b)?)),
        None => (side(s)?, None),
    };
    let found: Vec<&ForeignKeyDef> = schema
        .foreign_keys
        .iter()
        .filter(|fk| (fk.from_table.as_str(), fk.from_column.as_str()) == (from.0.as_str(), from.1.as_str()))
        .filter(|fk| to.as_ref().is_none_or(|(t, c)| fk.to_table == *t && fk.to_column == *c))
        .collect();
    match found.as_slice() {
        [fk] => Ok((*fk).clone()),
        [] => Err(Error::Usage(format!("no foreign key matches {s:?}"))),
        _ => Err(Error::Usage(format!("{s:?} is ambiguous; name the referenced column as table.column->table.column"))),
    }
}

/// Fixes the task of a training run. Autocompletion defaults to a grouped
/// 70/15/15 split; join prediction defaults to training on every row.
pub fn task_spec(choice: &TaskChoice, schema: &DatabaseSchema, config: &TrainConfig, ratios: Option<[f64; 3]>) -> Result<TaskSpec> {
    match (choice, config.variant) {
        (TaskChoice::Autocompletion { table, column }, Variant::A) => {
            AutocompletionTask::new(schema, table, column)?;
            Ok(TaskSpec::Autocompletion {
                table: table.clone(),
                column: column.clone(),
                split_seed: config.seed,
                ratios: ratios.unwrap_or(DEFAULT_RATIOS),
            })
        }
        (TaskChoice::Join { foreign_keys }, Variant::J) => {
            let fks = if foreign_keys.is_empty() { schema.foreign_keys.clone() } else { foreign_keys.clone() };
            for fk in &fks {
                if !schema.foreign_keys.contains(fk) {
                    return Err(Error::Usage(format!("{} is not a foreign key of the schema", fk.label())));
                }
            }
            Ok(TaskSpec::Join { foreign_keys: fks, split_seed: config.seed, ratios: ratios.unwrap_or([1.0, 0.0, 0.0]) })
        }
        (TaskChoice::Autocompletion { .. }, Variant::J) => {
            Err(Error::Usage("variant j trains join prediction; pass --fk instead of --table/--column".into()))
        }
        (TaskChoice::Join { .. }, Variant::A) => {
            Err(Error::Usage("variant a trains autocompletion; pass --table and --column".into()))
        }
    }
}

/// Row positions of one table in each split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRows {
    pub table: String,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Autocompletion(AutocompletionTask),
    Join(Vec<ForeignKeyDef>),
}

/// A task spec resolved against a database.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub kind: TaskKind,
    pub splits: Vec<SplitRows>,
    pub held_out: HeldOut,
}

impl TaskData {
    pub fn split_of(&self, table: &str) -> Option<&SplitRows> {
        self.splits.iter().find(|s| s.table == table)
    }
}

/// Join splits shuffle each PK-side table and cut it by `ratios`.
fn table_split(name: &str, n: usize, ratios: [f64; 3], seed: u64, t: usize) -> SplitRows {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 0x5117 + t as u64));
    let [a, b, _] = largest_remainder(n, ratios);
    let part = |r: std::ops::Range<usize>| {
        let mut v = order[r].to_vec();
        v.sort_unstable();
        v
    };
    SplitRows { table: name.into(), train: part(0..a), valid: part(a..a + b), test: part(a + b..n) }
}

pub fn resolve_task(spec: &TaskSpec, schema: &DatabaseSchema, db: &EncodedDatabase) -> Result<TaskData> {
    match spec {
        TaskSpec::Autocompletion { table, column, split_seed, ratios } => {
            let task = AutocompletionTask::new(schema, table, column)?;
            let split = task.split(db, *ratios, *split_seed)?;
            let held_out = task.held_out(&split);
            let rows = SplitRows { table: table.clone(), train: split.train(), valid: split.valid(), test: split.test() };
            Ok(TaskData { spec: spec.clone(), kind: TaskKind::Autocompletion(task), splits: vec![rows], held_out })
        }
        TaskSpec::Join { foreign_keys, split_seed, ratios } => {
            let mut splits: Vec<SplitRows> = Vec::new();
            let mut held_out = HeldOut::new();
            for fk in foreign_keys {
                let (tt, _) = join_tables(schema, fk)?;
                if splits.iter().any(|s| s.table == fk.to_table) {
                    continue;
                }
                let s = table_split(&fk.to_table, db.tables[tt].len(), *ratios, *split_seed, tt);
                held_out.extend(s.valid.iter().chain(&s.test).map(|&r| (tt, r)));
                splits.push(s);
            }
            Ok(TaskData { spec: spec.clone(), kind: TaskKind::Join(foreign_keys.clone()), splits, held_out })
        }
    }
}

fn inputs<'a>(p: &'a Prepared, held_out: &'a HeldOut) -> TrainInputs<'a> {
    TrainInputs { schema: &p.schema, vocabs: &p.vocabs, db: &p.db, held_out }
}

// ---------------------------------------------------------------- corpus

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub pretrain: usize,
    pub finetune: usize,
}

/// One epoch of both training stages, as `corpus.jsonl`, plus the split.
pub fn write_corpus(loaded: &Loaded, task: &TaskData, config: &TrainConfig, out: &Path) -> Result<CorpusSummary> {
    let inputs = inputs(&loaded.prep, &task.held_out);
    let mut rng = stream(config.seed, 1);
    let (pre, fine) = match &task.kind {
        TaskKind::Autocompletion(t) => {
            let s = SchemeA::new(inputs, t, &task.splits[0].train, config)?;
            (s.pretrain_batches(&mut rng)?, s.finetune_batches(&mut rng)?)
        }
        TaskKind::Join(fks) => {
            let s = SchemeJ::new(inputs, fks, config)?;
            (s.pretrain_batches(&mut rng)?, s.finetune_batches(&mut rng)?)
        }
    };
    let pre: Vec<Example> = pre.into_iter().flatten().collect();
    let fine: Vec<Example> = fine.into_iter().flatten().collect();
    write_corpus_jsonl(&out.join("corpus.jsonl"), pre.iter().chain(&fine))?;
    fsutil::write_json(&out.join("split.json"), &task.splits)?;
    let run = serde_json::json!({ "train": config, "task": task.spec });
    record(out, "corpus", Some(config.seed), &run, &[("corpus.jsonl", "corpus"), ("split.json", "split")])?;
    Ok(CorpusSummary { pretrain: pre.len(), finetune: fine.len() })
}

// ---------------------------------------------------------------- train

pub struct TrainRun {
    pub meta: CheckpointMeta,
    pub reports: Vec<LossReport>,
    pub checkpoint: PathBuf,
}

fn fit<S: Real>(
    inputs: TrainInputs<'_>,
    task: &TaskData,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&LossReport),
) -> Result<(TableEncoderModel<S>, Vec<LossReport>)> {
    let outcome = match &task.kind {
        TaskKind::Autocompletion(t) => train_relbert_a::<S>(inputs, t, &task.splits[0].train, config, on_epoch)?,
        TaskKind::Join(fks) => train_relbert_j::<S>(inputs, fks, config, on_epoch)?,
    };
    Ok((outcome.model, outcome.reports))
}

/// Trains and writes `checkpoint/`, `train_log.jsonl` and `split.json`.
/// `on_epoch` sees every loss report as it is produced.
pub fn train(
    loaded: &Loaded,
    task: &TaskData,
    config: &TrainConfig,
    precision: Precision,
    out: &Path,
    on_epoch: &mut dyn FnMut(&LossReport),
) -> Result<TrainRun> {
    let inputs = inputs(&loaded.prep, &task.held_out);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut hook = |r: &LossReport| {
        log.push(TrainLogLine::new(r, start.elapsed().as_millis() as u64));
        on_epoch(r);
    };
    let dir = out.join(CHECKPOINT_DIR);
    let p = &loaded.prep;
    let (meta, reports) = match precision {
        Precision::F64 => {
            let (m, r) = fit::<f64>(inputs, task, config, &mut hook)?;
            (save_checkpoint(&dir, &m, &p.schema, &p.vocabs, config, task.spec.clone(), &loaded.rules, loaded.vocab_options)?, r)
        }
        Precision::F32 => {
            let (m, r) = fit::<f32>(inputs, task, config, &mut hook)?;
            (save_checkpoint(&dir, &m, &p.schema, &p.vocabs, config, task.spec.clone(), &loaded.rules, loaded.vocab_options)?, r)
        }
    };
    fsutil::write_jsonl(&out.join("train_log.jsonl"), &log)?;
    fsutil::write_json(&out.join("split.json"), &task.splits)?;
    let mut files: Vec<(String, &str)> =
        ["meta.json", "params.bin", "schema.json", "vocab.json"].iter().map(|f| (format!("{CHECKPOINT_DIR}/{f}"), "checkpoint")).collect();
    files.push(("train_log.jsonl".into(), "loss_log"));
    files.push(("split.json".into(), "split"));
    let files: Vec<(&str, &str)> = files.iter().map(|(a, b)| (a.as_str(), *b)).collect();
    let run = serde_json::json!({ "train": config, "task": task.spec, "precision": precision });
    record(out, "train", Some(config.seed), &run, &files)?;
    Ok(TrainRun { meta, reports, checkpoint: dir })
}

// ---------------------------------------------------------------- eval

/// Which rows of the split are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Valid,
    #[default]
    Test,
    /// Every row, held out or not.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub tie: TieBreak,
    pub split: EvalSplit,
    /// Join prediction only: candidates per query, all FK-side rows if unset.
    pub pool: Option<usize>,
    /// Join prediction only: the foreign key to evaluate, the first one
    /// trained on if unset.
    pub fk: Option<ForeignKeyDef>,
    pub precision: Precision,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { k: 10, tie: TieBreak::TokenId, split: EvalSplit::Test, pool: None, fk: None, precision: Precision::F64 }
    }
}

/// `metrics.json`: the report plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    #[serde(flatten)]
    pub report: MetricsReport,
    /// The split actually evaluated. A join task with no held-out rows is
    /// evaluated on every row (`all`).
    pub split: EvalSplit,
    pub options: EvalOptions,
    pub config: TrainConfig,
    pub task: TaskSpec,
}

fn split_rows(rows: &SplitRows, split: EvalSplit, n: usize) -> Vec<usize> {
    match split {
        EvalSplit::Train => rows.train.clone(),
        EvalSplit::Valid => rows.valid.clone(),
        EvalSplit::Test => rows.test.clone(),
        EvalSplit::All => (0..n).collect(),
    }
}

fn rank_autocompletion<S: Real>(
    model: &TableEncoderModel<S>,
    instances: &[TaskInstance],
    tie: TieBreak,
) -> Result<Vec<RankingResult>> {
    check_model_head(model, instances)?;
    Ok(instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| rank_instance(i, inst, &model_autocompletion_scores(model, inst)?, tie))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

fn rank_joins<S: Real>(
    model: &TableEncoderModel<S>,
    schema: &DatabaseSchema,
    db: &EncodedDatabase,
    fk: &ForeignKeyDef,
    rows: &[usize],
    cfg: &JoinEvalConfig,
) -> Result<Vec<RankingResult>> {
    let tables = join_tables(schema, fk)?;
    let queries = join_queries(schema, db, fk, Some(rows), cfg)?;
    Ok(queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| rank_join_query(i, q, &join_scores(model, db, tables, q, 64)?, cfg.tie))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Evaluates a checkpoint on `db` (encoded with its vocabularies).
/// Instances are scored in parallel; results keep instance order.
pub fn evaluate(ckpt: &Checkpoint, db: &EncodedDatabase, opts: &EvalOptions) -> Result<(MetricsFile, Vec<RankingResult>)> {
    let task = resolve_task(&ckpt.meta.task, &ckpt.schema, db)?;
    let config = &ckpt.meta.config;
    let f32_model;
    let (results, split, name) = match &task.kind {
        TaskKind::Autocompletion(t) => {
            let rows = split_rows(&task.splits[0], opts.split, db.tables[t.table].len());
            let instances = t.instances(db, &rows);
            let results = match opts.precision {
                Precision::F64 => rank_autocompletion(&ckpt.model, &instances, opts.tie)?,
                Precision::F32 => {
                    f32_model = ckpt.model.cast::<f32>();
                    rank_autocompletion(&f32_model, &instances, opts.tie)?
                }
            };
            (results, opts.split, ("autocompletion", "relbert-a"))
        }
        TaskKind::Join(fks) => {
            let fk = match &opts.fk {
                Some(fk) if fks.contains(fk) => fk.clone(),
                Some(fk) => return Err(Error::Usage(format!("the model was not trained on {}", fk.label()))),
                None => fks[0].clone(),
            };
            let (tt, _) = join_tables(&ckpt.schema, &fk)?;
            let s = task.split_of(&fk.to_table).expect("one split per PK table");
            let split = if opts.split == EvalSplit::Test && s.test.is_empty() { EvalSplit::All } else { opts.split };
            let rows = split_rows(s, split, db.tables[tt].len());
            let cfg = JoinEvalConfig { pool: opts.pool, seed: config.seed, k: opts.k, tie: opts.tie };
            let results = match opts.precision {
                Precision::F64 => rank_joins(&ckpt.model, &ckpt.schema, db, &fk, &rows, &cfg)?,
                Precision::F32 => {
                    f32_model = ckpt.model.cast::<f32>();
                    rank_joins(&f32_model, &ckpt.schema, db, &fk, &rows, &cfg)?
                }
            };
            (results, split, ("join", "relbert-j"))
        }
    };
    let mut report = compute_metrics(&results, opts.k)?;
    report.task = name.0.into();
    report.model = name.1.into();
    report.seed = config.seed;
    let file = MetricsFile { report, split, options: opts.clone(), config: config.clone(), task: task.spec };
    Ok((file, results))
}

/// Runs [`evaluate`] and writes `metrics.json` and `rankings.jsonl`.
pub fn eval_to(ckpt: &Checkpoint, db: &EncodedDatabase, opts: &EvalOptions, out: &Path) -> Result<MetricsFile> {
    let (file, results) = evaluate(ckpt, db, opts)?;
    fsutil::write_json(&out.join("metrics.json"), &file)?;
    fsutil::write_jsonl(&out.join("rankings.jsonl"), &results)?;
    record(
        out,
        "eval",
        Some(file.config.seed),
        &serde_json::json!({ "options": opts, "train": file.config }),
        &[("metrics.json", "metrics"), ("rankings.jsonl", "rankings")],
    )?;
    Ok(file)
}

// ---------------------------------------------------------------- impute

/// A JSON object `{"column": value}` for one row of `table`. Strings,
/// numbers and booleans are taken as written; null and absent columns are
/// missing cells.
pub fn row_from_json(schema: &DatabaseSchema, table: &str, value: &serde_json::Value, source: &Path) -> Result<RowRecord> {
    let obj = value.as_object().ok_or_else(|| Error::parse(source, "expected a JSON object of column values"))?;
    let t = schema.table_index(table).ok_or_else(|| Error::Usage(format!("unknown table {table:?}")))?;
    let def = &schema.tables[t];
    if let Some(k) = obj.keys().find(|k| !def.columns.iter().any(|c| &c.name == *k)) {
        return Err(Error::parse(source, format!("table {table} has no column {k:?}")));
    }
    let cells = def
        .columns
        .iter()
        .map(|c| match obj.get(&c.name) {
            None | Some(serde_json::Value::Null) => Ok(None),
            Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
            Some(v @ (serde_json::Value::Number(_) | serde_json::Value::Bool(_))) => Ok(Some(v.to_string())),
            Some(v) => Err(Error::parse(source, format!("column {}: unsupported value {v}", c.name))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RowRecord { table: table.into(), cells, row_index: 0 })
}

fn clean_row(ckpt: &Checkpoint, row: RowRecord) -> Result<RowRecord> {
    apply_cleaning_rules(&ckpt.schema, vec![row], &ckpt.meta.rules)
        .pop()
        .ok_or_else(|| Error::Config("the cleaning rules drop the given row".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub value: String,
    pub token_id: u32,
    pub probability: f64,
}

/// Softmax over every entity of the column, best `topk` first (ties by
/// token id). The target cell of `row` is ignored.
pub fn impute(ckpt: &Checkpoint, db: &EncodedDatabase, table: &str, column: &str, row: RowRecord, topk: usize) -> Result<Vec<Candidate>> {
    let task = AutocompletionTask::new(&ckpt.schema, table, column)?;
    if !ckpt.model.has_head(task.column) {
        return Err(Error::Usage(format!("the model has no output head for {table}.{column}")));
    }
    let row = clean_row(ckpt, row)?;
    let sentence = encode_row(&ckpt.schema, &ckpt.vocabs, &row).expect("table checked");
    let (tokens, pos) = task.query(db, &task.key_index(db), &sentence).expect("target column is in the row");
    let logits = ckpt.model.predict_masked(&tokens, pos, task.column)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let mut order: Vec<usize> = (0..exp.len()).collect();
    order.sort_by(|&a, &b| exp[b].total_cmp(&exp[a]).then(a.cmp(&b)));
    let vocab = ckpt.vocabs.for_column(task.column);
    Ok(order
        .into_iter()
        .take(topk)
        .map(|i| {
            let id = i as u32 + NUM_SPECIAL;
            Candidate { value: vocab.decode(id).unwrap_or("?").into(), token_id: id, probability: exp[i] / total }
        })
        .collect())
}

// ---------------------------------------------------------------- join-predict

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinCandidate {
    /// Row position in the FK-side table.
    pub row: usize,
    pub cells: BTreeMap<String, Option<String>>,
    pub score: f64,
    /// `σ(score)`.
    pub probability: f64,
}

/// Ranks every row of the FK-side table of `fk` as a join partner of `row`
/// (a row of the PK-side table), best `topk` first.
pub fn join_predict(
    ckpt: &Checkpoint,
    tables: &[Vec<RowRecord>],
    db: &EncodedDatabase,
    fk: &ForeignKeyDef,
    row: RowRecord,
    topk: usize,
) -> Result<Vec<JoinCandidate>> {
    let (_, ft) = join_tables(&ckpt.schema, fk)?;
    let row = clean_row(ckpt, row)?;
    let first = encode_row(&ckpt.schema, &ckpt.vocabs, &row).expect("table checked").tokens;
    let seqs: Vec<Vec<Token>> = db.tables[ft].iter().map(|s| pair_tokens(&first, &s.tokens)).collect();
    let scores: Vec<f64> = seqs
        .par_chunks(64)
        .map(|c| ckpt.model.score_pairs(&c.iter().map(Vec::as_slice).collect::<Vec<_>>()))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .concat();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let def = &ckpt.schema.tables[ft];
    Ok(order
        .into_iter()
        .take(topk)
        .map(|j| {
            let rec = &tables[ft][j];
            JoinCandidate {
                row: j,
                cells: def.columns.iter().enumerate().map(|(c, col)| (col.name.clone(), rec.cell(c).map(String::from))).collect(),
                score: scores[j],
                probability: 1.0 / (1.0 + (-scores[j]).exp()),
            }
        })
        .collect())
}

// ---------------------------------------------------------------- baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Table2vec,
    Embdi,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Table2vec => "table2vec",
            Self::Embdi => "embdi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub method: BaselineMethod,
    pub skipgram: SkipGramConfig,
    /// EmbDi only.
    pub walks: WalkConfig,
    pub k: usize,
    pub tie: TieBreak,
}

pub struct BaselineRun {
    pub embeddings: EntityEmbeddings,
    pub metrics: MetricsReport,
}

/// Trains a baseline on every row outside the held-out split and ranks the
/// test instances of the autocompletion task by cosine similarity.
pub fn baseline(loaded: &Loaded, task: &TaskData, opts: &BaselineOptions, out: &Path) -> Result<BaselineRun> {
    let TaskKind::Autocompletion(t) = &task.kind else {
        return Err(Error::Usage("baselines rank autocompletion candidates; pass --table and --column".into()));
    };
    let p = &loaded.prep;
    let include = |tab: usize, r: usize| !task.held_out.contains(&(tab, r));
    let dir = out.join(format!("baseline_{}", opts.method.name()));
    let mut files = Vec::new();
    let embeddings = match opts.method {
        BaselineMethod::Table2vec => {
            let cfg = SkipGramConfig { window: Window::Sentence, ..opts.skipgram.clone() };
            train_table2vec(&table2vec_corpus(&p.db, &p.vocabs, include), &cfg)?
        }
        BaselineMethod::Embdi => {
            let graph = build_tripartite_graph(&p.db, &p.vocabs, include);
            let walks = random_walk_corpus(&graph, &opts.walks)?;
            fsutil::write(&dir.join("walks.txt"), walks_text(&graph, &p.schema, &p.vocabs, &walks))?;
            files.push(("walks.txt", "walks"));
            train_embdi(&graph, &walks, &opts.skipgram)?
        }
    };
    export_baseline_embeddings(&embeddings, &p.schema, &p.vocabs, &dir.join("embeddings.csv"))?;
    files.push(("embeddings.csv", "embeddings"));

    let instances = t.instances(&p.db, &task.splits[0].test);
    let results = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| rank_instance(i, inst, &baseline_autocompletion_scores(&embeddings, &p.vocabs, inst)?, opts.tie))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut metrics = compute_metrics(&results, opts.k)?;
    metrics.task = "autocompletion".into();
    metrics.model = opts.method.name().into();
    metrics.seed = opts.skipgram.seed;
    fsutil::write_json(&dir.join("metrics.json"), &serde_json::json!({ "report": metrics, "options": opts, "task": task.spec }))?;
    files.push(("metrics.json", "metrics"));

    let files: Vec<(String, &str)> = files.iter().map(|(f, k)| (rel(&dir.join(f), out), *k)).collect();
    let files: Vec<(&str, &str)> = files.iter().map(|(a, b)| (a.as_str(), *b)).collect();
    let command = format!("baseline:{}", opts.method.name());
    record(out, &command, Some(opts.skipgram.seed), &serde_json::json!({ "options": opts, "task": task.spec }), &files)?;
    Ok(BaselineRun { embeddings, metrics })
}

// ---------------------------------------------------------------- export

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub attention: Vec<String>,
    pub embeddings: String,
    pub entities: usize,
    /// The sequence the attention maps were computed on.
    pub tokens: Vec<String>,
}

/// Sample input for the attention export: the first test instance of an
/// autocompletion task, or the first join pair of a join task. `row`
/// picks a different row of the task (or PK-side) table.
fn sample_tokens(ckpt: &Checkpoint, db: &EncodedDatabase, task: &TaskData, row: Option<usize>) -> Result<Vec<Token>> {
    match &task.kind {
        TaskKind::Autocompletion(t) => {
            let index = t.key_index(db);
            let rows: Vec<usize> = match row {
                Some(r) => vec![r],
                None => task.splits[0].test.iter().chain(&task.splits[0].train).copied().collect(),
            };
            let n = db.tables[t.table].len();
            for r in rows {
                if r >= n {
                    return Err(Error::Usage(format!("row {r} is out of range ({n} rows)")));
                }
                if let Some(inst) = t.instance(db, &index, r) {
                    return Ok(inst.tokens().0);
                }
            }
            Err(Error::Config("no row of the task table has a known target".into()))
        }
        TaskKind::Join(fks) => {
            let fk = &fks[0];
            let (tt, ft) = join_tables(&ckpt.schema, fk)?;
            let (from, to) = ckpt.schema.fk_columns(fk).expect("checked at training");
            let by_key = db.key_index(ft, from);
            let start = row.unwrap_or(0);
            for i in start..db.tables[tt].len() {
                let key = db.tables[tt][i].token_of(to).map(|t| t.id);
                if let Some(j) = key.and_then(|k| by_key.get(&k)).and_then(|v| v.first()) {
                    return Ok(pair_tokens(&db.tables[tt][i].tokens, &db.tables[ft][*j].tokens));
                }
                if row.is_some() {
                    break;
                }
            }
            Err(Error::Config("no joining row pair to export attention for".into()))
        }
    }
}

/// Writes `attention/layer{l}_head{h}.csv` for one sample input and
/// `embeddings.csv` with every entity embedding.
pub fn export(ckpt: &Checkpoint, db: &EncodedDatabase, row: Option<usize>, out: &Path) -> Result<ExportSummary> {
    let task = resolve_task(&ckpt.meta.task, &ckpt.schema, db)?;
    let tokens = sample_tokens(ckpt, db, &task, row)?;
    let written = export_attention(&ckpt.model, &ckpt.schema, &tokens, &out.join("attention"))?;
    let entities = export_model_embeddings(&ckpt.model, &ckpt.schema, &ckpt.vocabs, &out.join("embeddings.csv"))?;
    let attention: Vec<String> = written.iter().map(|p| rel(p, out)).collect();
    let mut files: Vec<(&str, &str)> = attention.iter().map(|a| (a.as_str(), "attention")).collect();
    files.push(("embeddings.csv", "embeddings"));
    record(out, "export", Some(ckpt.meta.config.seed), &serde_json::json!({ "row": row, "train": ckpt.meta.config }), &files)?;
    Ok(ExportSummary {
        attention,
        embeddings: "embeddings.csv".into(),
        entities,
        tokens: crate::export::position_labels(&ckpt.schema, &tokens),
    })
}

