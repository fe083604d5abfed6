//! Built-in checks: finite-difference gradients of every autograd primitive
//! and of the full encoder losses, and a brute-force metric oracle.

use rand::Rng;
use reltab_core::corpus::{mask_tokens, pair_tokens, Example};
use reltab_core::encoder::{EncoderConfig, ModelLayout, TableEncoderModel};
use reltab_core::eval::{compute_metrics, metrics_consistent, rank_of, RankingResult, TieBreak};
use reltab_core::rng::{seeded, stream, ChaCha8Rng};
use reltab_core::tensor::{grad_check, grad_check_params, GradCheckReport, SoftmaxMask, Tape, Tensor, TensorError, Var};
use reltab_core::train::batch_loss;
use serde::{Deserialize, Serialize};

use crate::dataset::prepare;
use crate::synthetic::unique_join;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose gradient
/// is (numerically) zero are judged by their absolute error.
pub const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCase {
    fn from_reports(name: &str, reports: &[GradCheckReport]) -> Self {
        let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        Self {
            name: name.into(),
            points: reports.len(),
            coordinates: reports.iter().map(|r| r.checked).sum(),
            max_rel_error,
            passed: max_rel_error < TOLERANCE,
        }
    }
}

type Op = fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, TensorError>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values in ±[0.05, 1], at least `5 * STEP` from the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Contracts an output with fixed random weights, so every output
/// coordinate contributes with a different sign and scale.
fn project(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(out).shape().to_vec();
    let w = uniform(&mut seeded(seed), &shape);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, bool, Op)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], false, |t, x| t.matmul(x[0], x[1])),
        ("batch_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], false, |t, x| t.batch_matmul(x[0], x[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], false, |t, x| t.add(x[0], x[1])),
        ("add_row_broadcast", vec![vec![3, 4], vec![4]], false, |t, x| t.add(x[0], x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], false, |t, x| t.mul(x[0], x[1])),
        ("scale", vec![vec![3, 4]], false, |t, x| t.scale(x[0], -1.7)),
        ("transpose", vec![vec![3, 4]], false, |t, x| t.transpose(x[0])),
        ("reshape", vec![vec![3, 4]], false, |t, x| t.reshape(x[0], &[2, 6])),
        ("permute", vec![vec![2, 3, 4]], false, |t, x| t.permute(x[0], &[1, 0, 2])),
        ("concat", vec![vec![2, 3], vec![1, 3]], false, |t, x| t.concat(&[x[0], x[1]], 0)),
        ("slice", vec![vec![3, 5]], false, |t, x| t.slice(x[0], 1, 1, 4)),
        ("gather_rows", vec![vec![4, 3]], false, |t, x| t.gather_rows(x[0], &[0, 2, 2, 3])),
        ("relu", vec![vec![3, 4]], true, |t, x| t.relu(x[0])),
        ("gelu", vec![vec![3, 4]], false, |t, x| t.gelu(x[0])),
        ("sigmoid", vec![vec![3, 4]], false, |t, x| t.sigmoid(x[0])),
        ("log_sigmoid", vec![vec![3, 4]], false, |t, x| t.log_sigmoid(x[0])),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], false, |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5)),
        ("row_softmax", vec![vec![3, 5]], false, |t, x| t.row_softmax(x[0], None)),
        ("row_softmax_masked", vec![vec![4, 3]], false, |t, x| {
            let mask = SoftmaxMask { keys: vec![true, true, false, true, false, true], rows_per_entry: 2 };
            t.row_softmax(x[0], Some(&mask))
        }),
        ("dropout", vec![vec![3, 4]], false, |t, x| t.dropout(x[0], 0.3, &mut seeded(11))),
        ("cross_entropy", vec![vec![3, 5]], false, |t, x| t.cross_entropy(x[0], &[0, 4, 2])),
        ("sum", vec![vec![3, 4]], false, |t, x| t.sum(x[0])),
        ("mean", vec![vec![3, 4]], false, |t, x| t.mean(x[0])),
    ]
}

/// Checks every primitive at `points` random points.
pub fn primitive_gradients(points: usize, seed: u64) -> Result<Vec<GradCase>, TensorError> {
    let mut out = Vec::new();
    for (i, (name, shapes, kink, op)) in primitive_cases().into_iter().enumerate() {
        let mut rng = stream(seed, i as u64);
        let mut reports = Vec::with_capacity(points);
        for p in 0..points {
            let inputs: Vec<Tensor<f64>> =
                shapes.iter().map(|s| if kink { off_kink(&mut rng, s) } else { uniform(&mut rng, s) }).collect();
            let proj = seed ^ ((i as u64) << 32) ^ p as u64;
            reports.push(grad_check(&inputs, |t, x| { let y = op(t, x)?; project(t, y, proj) }, STEP, FLOOR)?);
        }
        out.push(GradCase::from_reports(name, &reports));
    }
    Ok(out)
}

/// Embedding lookup reads parameters, so it is checked through the store.
pub fn embedding_gradient(points: usize, seed: u64) -> Result<GradCase, TensorError> {
    let mut rng = stream(seed, 999);
    let mut reports = Vec::new();
    for p in 0..points {
        let mut store = reltab_core::tensor::ParamStore::new();
        let a = store.add("a", uniform(&mut rng, &[5, 3]));
        let b = store.add("b", uniform(&mut rng, &[2, 3]));
        let proj = seed ^ 0xE0 ^ p as u64;
        reports.push(grad_check_params(
            &store,
            |t| {
                let y = t.embedding_lookup(&[(a, 1), (b, 0), (a, 4), (a, 1)])?;
                project(t, y, proj)
            },
            STEP,
            FLOOR,
            None,
        )?);
    }
    Ok(GradCase::from_reports("embedding_lookup", &reports))
}

/// Two layers, d = 8, two heads.
pub fn small_encoder_config() -> EncoderConfig {
    EncoderConfig { d_model: 8, layers: 2, heads: 2, ff_hidden: 16, init_std: 0.3, ..EncoderConfig::default() }
}

/// Full-model gradient checks of the MLM and NSP losses on a small
/// two-table database. The NSP head starts at zero, so it is randomized
/// first; otherwise no NSP gradient reaches the encoder.
pub fn encoder_gradients(seed: u64) -> Result<Vec<GradCase>, Box<dyn std::error::Error>> {
    let p = prepare(unique_join(seed, 6), &[], &Default::default())?;
    let heads = 0..p.schema.num_columns() as u32;
    let layout = ModelLayout::new(&p.vocabs, heads.map(reltab_core::ColumnId));
    let mut model = TableEncoderModel::<f64>::new(small_encoder_config(), layout, seed)?;
    let mut rng = stream(seed, 77);
    let (w, b) = model.nsp_params();
    for id in [w, b] {
        for v in model.params.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let (alpha, beta) = (&p.db.tables[0], &p.db.tables[1]);
    let join = |i: usize| beta.iter().position(|s| s.tokens[0].id == alpha[i].tokens[0].id).expect("one to one");
    let mut mlm = Vec::new();
    for i in 0..3 {
        let toks = pair_tokens(&alpha[i].tokens, &beta[join(i)].tokens);
        let (tokens, pos, target) = mask_tokens(&toks, |_| true, &mut rng)?;
        mlm.push(Example { tokens, target: Some((pos, target)), nsp: None });
    }
    let mut nsp = Vec::new();
    for i in 0..3 {
        nsp.push(Example { tokens: pair_tokens(&alpha[i].tokens, &beta[join(i)].tokens), target: None, nsp: Some(true) });
        let other = join((i + 1) % alpha.len());
        nsp.push(Example { tokens: pair_tokens(&alpha[i].tokens, &beta[other].tokens), target: None, nsp: Some(false) });
    }
    let mut out = Vec::new();
    for (name, examples) in [("encoder_mlm", &mlm), ("encoder_nsp", &nsp)] {
        let refs: Vec<&Example> = examples.iter().collect();
        let report = grad_check_params(
            &model.params,
            |tape| {
                batch_loss(&model, tape, &refs, None)
                    .map_err(|e| TensorError::Shape { op: "batch_loss", detail: e.to_string() })?
                    .map(|l| l.total)
                    .ok_or(TensorError::Shape { op: "batch_loss", detail: "empty loss".into() })
            },
            STEP,
            FLOOR,
            None,
        )?;
        out.push(GradCase::from_reports(name, &[report]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub mismatches: usize,
    pub reports_consistent: bool,
    pub reference_row_consistent: bool,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.reports_consistent && self.reference_row_consistent
    }
}

/// Rank by sorting every candidate (score descending, then index).
pub fn brute_force_rank(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
    order.iter().position(|&i| i == truth).expect("truth is a candidate") + 1
}

/// Compares the ranking code against [`brute_force_rank`] on `n` random
/// instances with heavy ties, then the aggregate metrics against direct
/// sums.
pub fn metric_oracle(n: usize, seed: u64) -> OracleReport {
    let mut rng = seeded(seed);
    let mut mismatches = 0;
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let pool = rng.random_range(1..60);
        let scores: Vec<f64> = (0..pool).map(|_| rng.random_range(0..8) as f64 * 0.25).collect();
        let truth = rng.random_range(0..pool);
        let expected = brute_force_rank(&scores, truth);
        match rank_of(&scores, truth, TieBreak::TokenId) {
            Ok(r) if r == expected => {}
            _ => mismatches += 1,
        }
        results.push(RankingResult { instance: i, true_id: truth as u32, rank: expected, pool });
    }
    let mut consistent = true;
    for k in [1, 5, 10] {
        let m = compute_metrics(&results, k).expect("non-empty");
        let hits = results.iter().filter(|r| r.rank <= k).count() as f64 / n as f64;
        let mr = results.iter().map(|r| r.rank as f64).sum::<f64>() / n as f64;
        let mrr = results.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / n as f64;
        if m.hits_at_k != hits || m.mean_rank != mr || m.mrr != mrr {
            mismatches += 1;
        }
        consistent &= metrics_consistent(m.hits_at_k, m.mean_rank, m.mrr);
    }
    OracleReport {
        instances: n,
        mismatches,
        reports_consistent: consistent,
        reference_row_consistent: metrics_consistent(0.801, 284.25, 0.656),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub gradients: Vec<GradCase>,
    pub oracle: OracleReport,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.gradients.iter().all(|g| g.passed) && self.oracle.passed()
    }
}

pub fn run(points: usize, seed: u64) -> Result<SelftestReport, Box<dyn std::error::Error>> {
    let mut gradients = primitive_gradients(points, seed)?;
    gradients.push(embedding_gradient(points, seed)?);
    gradients.extend(encoder_gradients(seed)?);
    Ok(SelftestReport { gradients, oracle: metric_oracle(1000, seed) })
}
