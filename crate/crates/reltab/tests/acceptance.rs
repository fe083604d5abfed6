//! End-to-end acceptance checks. Each test prints one `[n] ... PASS|FAIL`
//! line before asserting, so `cargo test --test acceptance -- --nocapture`
//! gives a compact scoreboard.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use reltab::checkpoint::load_checkpoint;
use reltab::config::Precision;
use reltab::dataset::{prepare, Dataset};
use reltab::pipeline::{self, BaselineMethod, BaselineOptions, EvalOptions, EvalSplit, Loaded, MetricsFile, TaskChoice};
use reltab::{selftest, synthetic};
use reltab_core::baselines::{build_tripartite_graph, random_walk_corpus, NodeKind, SkipGramConfig, WalkConfig};
use reltab_core::corpus::{pair_tokens, Token};
use reltab_core::encoder::{EncoderConfig, ModelLayout, TableEncoderModel};
use reltab_core::eval::{random_mrr, random_rr_std, TieBreak};
use reltab_core::rng::seeded;
use reltab_core::train::{AdamConfig, LossReport, Stage, TrainConfig, Variant};
use reltab_core::ColumnId;

fn report(n: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    println!("[{n:>2}] {name:<28} {}  {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
}

fn loaded(ds: Dataset) -> Loaded {
    Loaded { prep: prepare(ds, &[], &Default::default()).unwrap(), rules: Vec::new(), vocab_options: Default::default() }
}

struct Run {
    metrics: MetricsFile,
    reports: Vec<LossReport>,
    elapsed: Duration,
}

fn train_and_eval(data: &Loaded, choice: TaskChoice, config: &TrainConfig, opts: &EvalOptions) -> Run {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let schema = &data.prep.schema;
    let spec = pipeline::task_spec(&choice, schema, config, None).unwrap();
    let task = pipeline::resolve_task(&spec, schema, &data.prep.db).unwrap();
    let run = pipeline::train(data, &task, config, Precision::F64, dir.path(), &mut |_| {}).unwrap();
    let ckpt = load_checkpoint(&run.checkpoint, Some(schema)).unwrap();
    let (metrics, _) = pipeline::evaluate(&ckpt, &data.prep.db, opts).unwrap();
    Run { metrics, reports: run.reports, elapsed: start.elapsed() }
}

fn encoder(d_model: usize, ff_hidden: usize) -> EncoderConfig {
    EncoderConfig { d_model, layers: 2, heads: 4, ff_hidden, ..Default::default() }
}

// ------------------------------------------------------------------ 1

#[test]
fn c01_gradient_checks() {
    let start = Instant::now();
    let r = selftest::run(100, 0).unwrap();
    let elapsed = start.elapsed();
    let worst = r.gradients.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let names: Vec<&str> = r.gradients.iter().map(|g| g.name.as_str()).collect();
    let covered = names.contains(&"encoder_mlm") && names.contains(&"encoder_nsp") && names.len() >= 25;
    let pass = r.gradients.iter().all(|g| g.passed && g.max_rel_error < 1e-4) && covered && elapsed < Duration::from_secs(120);
    report(1, "gradient checks", pass, format!("{} cases, worst rel err {worst:.2e}, {:.1?}", names.len(), elapsed));
    assert!(pass, "{:#?}", r.gradients);
}

// ------------------------------------------------------------------ 2

#[test]
fn c02_permutation_equivariance() {
    let ds = synthetic::mini_imdb(2, synthetic::MiniImdbSize { directors: 10, movies: 60, actors: 40, max_cast: 3 });
    let data = loaded(ds);
    let p = &data.prep;
    let heads = (0..p.schema.num_columns() as u32).map(ColumnId);
    let config = EncoderConfig { init_std: 0.3, ..encoder(32, 64) };
    let model = TableEncoderModel::<f64>::new(config, ModelLayout::new(&p.vocabs, heads), 9).unwrap();
    let mut rng = seeded(2024);
    let fks = &p.schema.foreign_keys;

    let (mut encode_dev, mut logit_dev) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        // A single row or an FK-PK joined pair.
        let tokens: Vec<Token> = if rng.random_bool(0.5) {
            let t = rng.random_range(0..p.db.tables.len());
            let rows = &p.db.tables[t];
            rows[rng.random_range(0..rows.len())].tokens.clone()
        } else {
            let fk = &fks[rng.random_range(0..fks.len())];
            let pairs = reltab_core::corpus::materialize_join_sentences(
                &p.schema,
                fk,
                &p.db.tables[p.schema.table_index(&fk.to_table).unwrap()],
                &p.db.tables[p.schema.table_index(&fk.from_table).unwrap()],
            );
            let pair = &pairs[rng.random_range(0..pairs.len())];
            pair_tokens(&pair.first.tokens, &pair.second.tokens)
        };
        let mut perm: Vec<usize> = (0..tokens.len()).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Token> = perm.iter().map(|&i| tokens[i]).collect();
        let (out, _) = model.encode(&tokens).unwrap();
        let (out_p, _) = model.encode(&permuted).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in out_p.row(new).iter().zip(out.row(old)) {
                encode_dev = encode_dev.max((a - b).abs());
            }
        }

        let cells: Vec<usize> = (0..tokens.len()).filter(|&i| !tokens[i].is_special()).collect();
        let pos = cells[rng.random_range(0..cells.len())];
        let col = tokens[pos].column;
        let mut masked = tokens.clone();
        masked[pos] = Token::mask(col);
        let masked_p: Vec<Token> = perm.iter().map(|&i| masked[i]).collect();
        let new_pos = perm.iter().position(|&i| i == pos).unwrap();
        let a = model.predict_masked(&masked, pos, col).unwrap();
        let b = model.predict_masked(&masked_p, new_pos, col).unwrap();
        for (x, y) in a.iter().zip(&b) {
            logit_dev = logit_dev.max((x - y).abs());
        }
    }
    let pass = encode_dev < 1e-5 && logit_dev < 1e-5;
    report(2, "permutation equivariance", pass, format!("100 sentences, max dev {encode_dev:.2e}, logits {logit_dev:.2e}"));
    assert!(pass);
}

// ------------------------------------------------------------------ 3

#[test]
fn c03_metric_oracle() {
    let r = selftest::metric_oracle(1000, 3);
    report(
        3,
        "metric oracle",
        r.passed(),
        format!("{} instances, {} mismatches, reference row consistent {}", r.instances, r.mismatches, r.reference_row_consistent),
    );
    assert!(r.passed(), "{r:?}");
}

// ------------------------------------------------------------------ 4, 6

fn fd_config(seed: u64) -> TrainConfig {
    TrainConfig {
        variant: Variant::A,
        encoder: encoder(64, 256),
        adam: AdamConfig { lr: 1e-3, ..Default::default() },
        batch_size: 32,
        pretrain_epochs: 20,
        finetune_epochs: 100,
        seed,
        w2v_init: false,
        finetune_nsp: false,
        ..Default::default()
    }
}

fn fd_choice() -> TaskChoice {
    TaskChoice::Autocompletion { table: synthetic::FD_TABLE.into(), column: synthetic::FD_TARGET.into() }
}

struct FdResult {
    relbert: Run,
    table2vec_mrr: f64,
}

/// The three seeded FD runs shared by the FD and baseline checks.
fn fd_runs() -> &'static [FdResult] {
    static RUNS: OnceLock<Vec<FdResult>> = OnceLock::new();
    RUNS.get_or_init(|| {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..3u64)
                .map(|seed| {
                    s.spawn(move || {
                        let data = loaded(synthetic::functional_dependency(seed));
                        let opts = EvalOptions { k: 1, ..Default::default() };
                        let relbert = train_and_eval(&data, fd_choice(), &fd_config(seed), &opts);
                        let spec = pipeline::task_spec(&fd_choice(), &data.prep.schema, &fd_config(seed), None).unwrap();
                        let task = pipeline::resolve_task(&spec, &data.prep.schema, &data.prep.db).unwrap();
                        let dir = tempfile::tempdir().unwrap();
                        let bopts = BaselineOptions {
                            method: BaselineMethod::Table2vec,
                            skipgram: SkipGramConfig { seed, ..Default::default() },
                            walks: WalkConfig::default(),
                            k: 1,
                            tie: TieBreak::TokenId,
                        };
                        let t2v = pipeline::baseline(&data, &task, &bopts, dir.path()).unwrap();
                        FdResult { relbert, table2vec_mrr: t2v.metrics.mrr }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    })
}

#[test]
fn c04_functional_dependency() {
    let run = &fd_runs()[0].relbert;
    let m = &run.metrics.report;
    let epochs = fd_config(0).pretrain_epochs + fd_config(0).finetune_epochs;
    let pass = m.hits_at_k >= 0.95 && m.k == 1 && run.metrics.split == EvalSplit::Test && epochs <= 200 && run.elapsed < Duration::from_secs(600);
    report(4, "functional dependency", pass, format!("Hits@1 {:.3} on {} held-out rows, {epochs} epochs, {:.1?}", m.hits_at_k, m.n, run.elapsed));
    assert!(pass);
}

#[test]
fn fd_finetune_loss_falls() {
    let reports = &fd_runs()[0].relbert.reports;
    let ft: Vec<&LossReport> = reports.iter().filter(|r| r.stage == Stage::Finetune).collect();
    assert!(ft.len() >= 50);
    assert!(ft[49].l_total < ft[0].l_total, "{} vs {}", ft[49].l_total, ft[0].l_total);
    for r in reports {
        assert_eq!(r.l_total, r.l_mlm + r.l_nsp);
    }
}

#[test]
fn c06_baseline_ordering() {
    let runs = fd_runs();
    let relbert = runs.iter().map(|r| r.relbert.metrics.report.mrr).sum::<f64>() / 3.0;
    let t2v = runs.iter().map(|r| r.table2vec_mrr).sum::<f64>() / 3.0;
    let pass = relbert >= t2v;
    report(6, "relbert-a vs table2vec", pass, format!("mean MRR over 3 seeds {relbert:.3} vs {t2v:.3}"));
    assert!(pass);
}

// ------------------------------------------------------------------ 5

#[test]
fn c05_join_prediction() {
    let start = Instant::now();
    let data = loaded(synthetic::unique_join(0, 100));
    let choice = TaskChoice::Join { foreign_keys: Vec::new() };
    let opts = EvalOptions { k: 10, pool: Some(100), ..Default::default() };
    let runs: Vec<(usize, Run)> = std::thread::scope(|s| {
        let handles: Vec<_> = [1usize, 5, 10]
            .into_iter()
            .map(|k| {
                let (data, choice, opts) = (&data, choice.clone(), opts.clone());
                s.spawn(move || {
                    let config = TrainConfig {
                        variant: Variant::J,
                        encoder: encoder(32, 128),
                        adam: AdamConfig { lr: 3e-3, ..Default::default() },
                        pretrain_epochs: 5,
                        finetune_epochs: 120,
                        negatives: k,
                        seed: 0,
                        ..Default::default()
                    };
                    (k, train_and_eval(data, choice, &config, &opts))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let elapsed = start.elapsed();
    let m: Vec<_> = runs.iter().map(|(_, r)| &r.metrics.report).collect();
    let best = m.iter().map(|r| r.hits_at_k).fold(0.0, f64::max);
    let monotone = m.windows(2).all(|w| w[1].hits_at_k >= w[0].hits_at_k && w[1].mrr >= w[0].mrr && w[1].mean_rank <= w[0].mean_rank);
    let pools = m.iter().all(|r| r.pool == 100.0);
    let pass = best >= 0.9 && monotone && pools && elapsed < Duration::from_secs(900);
    let line: Vec<String> =
        runs.iter().map(|(k, r)| format!("k={k}: H@10 {:.2} MR {:.2} MRR {:.3}", r.metrics.report.hits_at_k, r.metrics.report.mean_rank, r.metrics.report.mrr)).collect();
    report(5, "join prediction", pass, format!("{}, {:.1?}", line.join("; "), elapsed));
    assert!(pass);
}

// ------------------------------------------------------------------ 7

#[test]
fn c07_embdi_structure() {
    let data = loaded(synthetic::mini_imdb(7, synthetic::MiniImdbSize { directors: 20, movies: 150, actors: 100, max_cast: 3 }));
    let p = &data.prep;
    let graph = build_tripartite_graph(&p.db, &p.vocabs, |_, _| true);
    let cfg = WalkConfig { walks_per_entity: 50, walk_length: 20, seed: 7 };
    let walks = random_walk_corpus(&graph, &cfg).unwrap();

    let is_token = |i: u32| matches!(graph.nodes[i as usize], NodeKind::Token(_));
    let forbidden = graph
        .adj
        .iter()
        .enumerate()
        .flat_map(|(a, nb)| nb.iter().map(move |&b| (a as u32, b)))
        .filter(|&(a, b)| is_token(a) == is_token(b))
        .count();
    let entities = graph.token_nodes().count();
    let bad_walks = walks
        .iter()
        .enumerate()
        .filter(|(i, w)| w.len() != 20 || w[0] as usize != i / 50 || !w.windows(2).all(|s| graph.has_edge(s[0], s[1])))
        .count();
    let pass = forbidden == 0 && walks.len() == 50 * entities && bad_walks == 0;
    report(
        7,
        "embdi graph and walks",
        pass,
        format!("{} nodes, {entities} entities, {} walks, {forbidden} forbidden edges, {bad_walks} bad walks", graph.nodes.len(), walks.len()),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 8

fn cli(args: &[&str]) {
    let code = reltab::cli::run(std::iter::once("reltab").chain(args.iter().copied()));
    assert_eq!(code, 0, "reltab {}", args.join(" "));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth -> train -> eval with one worker thread; returns the bytes of
/// every checkpoint file and of metrics.json.
fn pipeline_bytes(root: &Path, kind: &str, task: &[&str]) -> Vec<(String, Vec<u8>)> {
    let data = root.join("data");
    let out = root.join("out");
    cli(&["synth", "--kind", kind, "--seed", "5", "--keys", "30", "--out", s(&data)]);
    let mut train = vec!["--threads", "1", "--precision", "f64", "train", "--data", s(&data), "--out", s(&out), "--seed", "5", "--quiet"];
    train.extend_from_slice(task);
    train.extend_from_slice(&[
        "--d-model", "16", "--layers", "1", "--heads", "2", "--ff-hidden", "32", "--pretrain-epochs", "2", "--finetune-epochs", "3",
        "--negatives", "2", "--dropout", "0.1",
    ]);
    cli(&train);
    cli(&["--threads", "1", "eval", "--model", s(&out.join("checkpoint")), "--data", s(&data), "--out", s(&out), "--pool", "20"]);
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out.join("checkpoint"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files.push(("metrics.json".into(), std::fs::read(out.join("metrics.json")).unwrap()));
    files
}

#[test]
fn c08_determinism() {
    let suites: [(&str, &[&str]); 2] = [("fd", &["--table", "fd", "--column", "c"]), ("join", &["--variant", "j"])];
    let mut detail = Vec::new();
    let mut pass = true;
    for (kind, task) in suites {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = pipeline_bytes(a.path(), kind, task);
        let second = pipeline_bytes(b.path(), kind, task);
        let same = first == second && first.len() == 5;
        pass &= same;
        detail.push(format!("{kind}: {} files {}", first.len(), if same { "identical" } else { "differ" }));
    }
    report(8, "determinism", pass, detail.join(", "));
    assert!(pass);
}

// ------------------------------------------------------------------ 9

#[test]
fn c09_untrained_calibration() {
    let mut detail = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let data = loaded(synthetic::functional_dependency(100 + seed));
        let config = TrainConfig { pretrain_epochs: 0, finetune_epochs: 0, ..fd_config(seed) };
        let run = train_and_eval(&data, fd_choice(), &config, &EvalOptions { split: EvalSplit::All, ..Default::default() });
        let m = &run.metrics.report;
        let n = m.pool as usize;
        let se = random_rr_std(n) / (m.n as f64).sqrt();
        let z = (m.mrr - random_mrr(n)) / se;
        pass &= z.abs() <= 3.0 && run.reports.is_empty();
        detail.push(format!("MRR {:.4} vs {:.4} (z {z:+.2}, n {n})", m.mrr, random_mrr(n)));
    }
    report(9, "untrained calibration", pass, detail.join("; "));
    assert!(pass);
}

// ------------------------------------------------------------------ 10

#[test]
fn c10_mini_imdb_end_to_end() {
    let start = Instant::now();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini_imdb");
    let config = data.join("config.json");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let rows: usize = ["movies", "directors", "actors", "movies_directors", "roles"]
        .iter()
        .map(|t| std::fs::read_to_string(data.join(format!("{t}.csv"))).unwrap().lines().count() - 1)
        .sum();
    cli(&["ingest", "--data", s(&data), "--out", s(out)]);
    cli(&["corpus", "--data", s(&data), "--config", s(&config), "--out", s(out)]);
    cli(&["train", "--data", s(&data), "--config", s(&config), "--out", s(out), "--quiet"]);
    let ckpt = out.join("checkpoint");
    cli(&["eval", "--model", s(&ckpt), "--data", s(&data), "--out", s(out)]);
    cli(&["export", "--model", s(&ckpt), "--data", s(&data), "--out", s(out)]);
    let elapsed = start.elapsed();

    let manifest = reltab::artifacts::Manifest::load_or_default(out).unwrap();
    let kinds: std::collections::BTreeSet<&str> = manifest.kinds().collect();
    let needed = ["metrics", "loss_log", "attention", "embeddings", "checkpoint"];
    let missing: Vec<&str> = needed.iter().copied().filter(|k| !kinds.contains(k)).collect();
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let mrr = metrics["mrr"].as_f64().unwrap();
    let pass = missing.is_empty() && rows <= 20_000 && elapsed < Duration::from_secs(1800) && mrr > 0.0;
    report(
        10,
        "mini-imdb end to end",
        pass,
        format!("{rows} rows, MRR {mrr:.3}, H@10 {:.3}, missing kinds {missing:?}, {:.1?}", metrics["hits_at_k"].as_f64().unwrap(), elapsed),
    );
    assert!(pass);
}
