//! Losses, Adam, and the two training schedules.
//!
//! * Variant A: MLM over FK-PK joined row pairs, then joint MLM + NSP on the
//!   autocompletion task.
//! * Variant J: MLM per table in disjoint batches, then NSP over the join
//!   pairs of the chosen foreign keys.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{table2vec_corpus, train_table2vec, BaselineError, SkipGramConfig, Window};
use crate::corpus::{
    mask_tokens, pair_tokens, CorpusError, EncodedDatabase, Example, NegativeSampler, Token,
};
use crate::encoder::{EncoderConfig, EncoderError, ModelLayout, TableEncoderModel};
use crate::rng::{stream, ChaCha8Rng};
use crate::schema::{ColumnId, DatabaseSchema, ForeignKeyDef};
use crate::task::{AutocompletionTask, HeldOut, TaskInstance};
use crate::tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};
use crate::vocab::{VocabularySet, NUM_SPECIAL, UNK};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value in {op} during {stage:?} epoch {epoch}, batch {batch}")]
    NonFinite { stage: Stage, epoch: usize, batch: usize, op: &'static str },
    #[error("optimizer: parameter {index} has shape {param:?} but gradient {grad:?}")]
    Shape { index: usize, param: Vec<usize>, grad: Vec<usize> },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Encoder(e.into())
    }
}

pub type Result<T> = core::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    A,
    J,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S: Real = f64> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Adam<S> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self { config, step: 0, m: vec![None; num_params], v: vec![None; num_params] }
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TrainError::Config(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let (one_b1, one_b2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
        let (lr, eps) = (S::from_f64(c.lr), S::from_f64(c.eps));
        let (bc1, bc2) = (S::from_f64(bc1), S::from_f64(bc2));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(crate::tensor::ParamId(i));
            if p.shape() != g.shape() {
                return Err(TrainError::Shape { index: i, param: p.shape().to_vec(), grad: g.shape().to_vec() });
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj = *pj - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub epoch: usize,
    pub l_mlm: f64,
    pub l_nsp: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Negatives per positive pair (`k`).
    pub negatives: usize,
    pub seed: u64,
    /// Whether key columns may be masked during pretraining.
    pub mask_keys: bool,
    /// Initialize entity embeddings from a Table2Vec run of width `d_model`.
    pub w2v_init: bool,
    pub w2v_epochs: usize,
    /// Variant A only: add the NSP term in fine-tuning when the task has a
    /// second sequence.
    pub finetune_nsp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::A,
            encoder: EncoderConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            pretrain_epochs: 20,
            finetune_epochs: 50,
            negatives: 5,
            seed: 0,
            mask_keys: false,
            w2v_init: true,
            w2v_epochs: 5,
            finetune_nsp: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 || self.negatives == 0 {
            return Err(TrainError::Config("batch_size and negatives must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(TrainError::Config("adam hyperparameters out of range".into()));
        }
        Ok(())
    }
}

/// Read-only inputs shared by both schedules.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub schema: &'a DatabaseSchema,
    pub vocabs: &'a VocabularySet,
    pub db: &'a EncodedDatabase,
    /// `(table, row position)` pairs excluded from every training corpus.
    pub held_out: &'a HeldOut,
}

impl TrainInputs<'_> {
    fn included(&self, table: usize, row: usize) -> bool {
        !self.held_out.contains(&(table, row))
    }

    /// Positions of the included rows of `table`.
    fn rows(&self, table: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.db.tables[table].len()).filter(move |&i| self.included(table, i))
    }
}

pub struct TrainOutcome<S: Real = f64> {
    pub model: TableEncoderModel<S>,
    pub reports: Vec<LossReport>,
}

fn mlm_part<S: Real>(
    model: &TableEncoderModel<S>,
    tape: &mut Tape<'_, S>,
    fwd: &crate::encoder::Forward<S>,
    batch: &[&Example],
) -> Result<Option<(Var, usize)>> {
    let mut groups: BTreeMap<ColumnId, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (b, ex) in batch.iter().enumerate() {
        if let Some((pos, tok)) = ex.target {
            if tok.id < NUM_SPECIAL {
                return Err(TrainError::Config(format!("MLM target {:?} is a special token", tok)));
            }
            let g = groups.entry(tok.column).or_default();
            g.0.push(fwd.row(b, pos));
            g.1.push((tok.id - NUM_SPECIAL) as usize);
        }
    }
    if groups.is_empty() {
        return Ok(None);
    }
    let n: usize = groups.values().map(|g| g.0.len()).sum();
    let mut parts = Vec::new();
    for (col, (rows, targets)) in &groups {
        let logits = model.mlm_logits(tape, fwd, rows, *col)?;
        parts.push(tape.cross_entropy(logits, targets)?);
    }
    let all = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    Ok(Some((tape.mean(all)?, n)))
}

fn nsp_part<S: Real>(
    model: &TableEncoderModel<S>,
    tape: &mut Tape<'_, S>,
    fwd: &crate::encoder::Forward<S>,
    batch: &[&Example],
) -> Result<Option<(Var, usize)>> {
    let (entries, signs): (Vec<usize>, Vec<S>) = batch
        .iter()
        .enumerate()
        .filter_map(|(b, ex)| ex.nsp.map(|p| (b, if p { S::one() } else { -S::one() })))
        .unzip();
    if entries.is_empty() {
        return Ok(None);
    }
    let positives = signs.iter().filter(|&&s| s > S::zero()).count();
    let v = model.nsp_scores(tape, fwd, &entries)?;
    let v = tape.reshape(v, &[entries.len()])?;
    let signs = tape.constant(Tensor::new(vec![entries.len()], signs)?);
    let signed = tape.mul(v, signs)?;
    let ll = tape.log_sigmoid(signed)?;
    let total = tape.sum(ll)?;
    Ok(Some((tape.scale(total, S::from_f64(-1.0 / positives.max(1) as f64))?, positives)))
}

/// Batch losses from a single forward pass over every example.
pub struct BatchLoss {
    pub total: Var,
    pub l_mlm: f64,
    pub l_nsp: f64,
    pub n_mlm: usize,
    pub n_pos: usize,
}

pub fn batch_loss<S: Real>(
    model: &TableEncoderModel<S>,
    tape: &mut Tape<'_, S>,
    batch: &[&Example],
    train_rng: Option<&mut dyn RngCore>,
) -> Result<Option<BatchLoss>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let seqs: Vec<&[Token]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let fwd = model.forward(tape, &seqs, false, train_rng)?;
    let mlm = mlm_part(model, tape, &fwd, batch)?;
    let nsp = nsp_part(model, tape, &fwd, batch)?;
    let value = |tape: &Tape<'_, S>, v: Option<(Var, usize)>| v.map_or(0.0, |(v, _)| tape.value(v).item().as_f64());
    let (l_mlm, l_nsp) = (value(tape, mlm), value(tape, nsp));
    let total = match (mlm, nsp) {
        (Some((a, _)), Some((b, _))) => tape.add(a, b)?,
        (Some((a, _)), None) | (None, Some((a, _))) => a,
        (None, None) => return Ok(None),
    };
    Ok(Some(BatchLoss { total, l_mlm, l_nsp, n_mlm: mlm.map_or(0, |m| m.1), n_pos: nsp.map_or(0, |n| n.1) }))
}

/// Mean masked-entity cross-entropy over the examples with a target.
pub fn mlm_loss<S: Real>(model: &TableEncoderModel<S>, examples: &[Example]) -> Result<f64> {
    let refs: Vec<&Example> = examples.iter().filter(|e| e.target.is_some()).collect();
    let mut tape = Tape::new(&model.params);
    Ok(batch_loss(model, &mut tape, &refs, None)?.map_or(0.0, |l| l.l_mlm))
}

/// `-[Σ log σ(v_pos) + Σ log σ(-v_neg)]` divided by the number of positives.
pub fn nsp_loss<S: Real>(model: &TableEncoderModel<S>, examples: &[Example]) -> Result<f64> {
    let refs: Vec<&Example> = examples
        .iter()
        .filter(|e| e.nsp.is_some())
        .collect();
    let stripped: Vec<Example> = refs.iter().map(|e| Example { target: None, ..(*e).clone() }).collect();
    let refs: Vec<&Example> = stripped.iter().collect();
    let mut tape = Tape::new(&model.params);
    Ok(batch_loss(model, &mut tape, &refs, None)?.map_or(0.0, |l| l.l_nsp))
}

fn chunk_batches(mut units: Vec<Vec<Example>>, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Example>> {
    units.shuffle(rng);
    let mut out = Vec::new();
    let mut it = units.into_iter().peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(batch_size).flatten().collect());
    }
    out
}

struct StageRunner<'c, S: Real> {
    config: &'c TrainConfig,
    adam: Adam<S>,
    data_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl<S: Real> StageRunner<'_, S> {
    fn run(
        &mut self,
        model: &mut TableEncoderModel<S>,
        stage: Stage,
        epochs: usize,
        make_batches: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Vec<Vec<Example>>>,
        on_epoch: &mut dyn FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(epochs);
        for epoch in 1..=epochs {
            let batches = make_batches(&mut self.data_rng)?;
            let (mut sum_mlm, mut n_mlm, mut sum_nsp, mut n_pos) = (0.0, 0usize, 0.0, 0usize);
            for (bi, batch) in batches.iter().enumerate() {
                let refs: Vec<&Example> = batch.iter().collect();
                let wrap = |e: TrainError| match e {
                    TrainError::Encoder(EncoderError::Tensor(TensorError::NonFinite { op })) => {
                        TrainError::NonFinite { stage, epoch, batch: bi, op }
                    }
                    e => e,
                };
                let dropout: Option<&mut dyn RngCore> =
                    if self.config.encoder.dropout > 0.0 { Some(&mut self.dropout_rng) } else { None };
                let (grads, loss) = {
                    let mut tape = Tape::new(&model.params);
                    let Some(loss) = batch_loss(model, &mut tape, &refs, dropout).map_err(wrap)? else { continue };
                    let grads = tape.backward(loss.total).map_err(|e| wrap(e.into()))?;
                    (grads.into_params(), loss)
                };
                self.adam.step(&mut model.params, &grads)?;
                sum_mlm += loss.l_mlm * loss.n_mlm as f64;
                n_mlm += loss.n_mlm;
                sum_nsp += loss.l_nsp * loss.n_pos as f64;
                n_pos += loss.n_pos;
            }
            let l_mlm = if n_mlm > 0 { sum_mlm / n_mlm as f64 } else { 0.0 };
            let l_nsp = if n_pos > 0 { sum_nsp / n_pos as f64 } else { 0.0 };
            let report = LossReport { stage, epoch, l_mlm, l_nsp, l_total: l_mlm + l_nsp };
            on_epoch(&report);
            reports.push(report);
        }
        Ok(reports)
    }
}

fn maskable<'a>(schema: &'a DatabaseSchema, config: &'a TrainConfig) -> impl Fn(ColumnId) -> bool + 'a {
    let mask_keys = config.mask_keys;
    move |c| mask_keys || !schema.is_key_column(c)
}

/// Fresh model for `heads`, optionally word2vec-initialized from the
/// training rows.
pub fn build_model<S: Real>(
    inputs: TrainInputs<'_>,
    heads: impl IntoIterator<Item = ColumnId>,
    config: &TrainConfig,
) -> Result<TableEncoderModel<S>> {
    config.validate()?;
    let layout = ModelLayout::new(inputs.vocabs, heads);
    let mut model = TableEncoderModel::new(config.encoder.clone(), layout, config.seed)?;
    if config.w2v_init {
        let corpus = table2vec_corpus(inputs.db, inputs.vocabs, |t, r| !inputs.held_out.contains(&(t, r)));
        let sg = SkipGramConfig {
            dim: config.encoder.d_model,
            epochs: config.w2v_epochs,
            window: Window::Sentence,
            seed: config.seed ^ 0x77_32_76,
            ..Default::default()
        };
        match train_table2vec(&corpus, &sg) {
            Ok(emb) => {
                model.init_from_word2vec(emb.dim, |s, id| emb.get(&(s, id)).map(|v| v.to_vec()))?;
            }
            Err(BaselineError::EmptyCorpus) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(model)
}

fn runner<'a, S: Real>(config: &'a TrainConfig, model: &TableEncoderModel<S>) -> StageRunner<'a, S> {
    StageRunner {
        config,
        adam: Adam::new(config.adam, model.params.len()),
        data_rng: stream(config.seed, 1),
        dropout_rng: stream(config.seed, 2),
    }
}

/// Join pairs of `fk` as `(pk row, fk row)` positions over included rows.
fn join_index(inputs: TrainInputs<'_>, fk: &ForeignKeyDef) -> Option<(usize, usize, Vec<(usize, usize)>)> {
    let (from, to) = inputs.schema.fk_columns(fk)?;
    let (ft, tt) = (inputs.schema.table_index(&fk.from_table)?, inputs.schema.table_index(&fk.to_table)?);
    let by_key = {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for j in inputs.rows(ft) {
            if let Some(t) = inputs.db.tables[ft][j].token_of(from).filter(|t| t.id != UNK) {
                m.entry(t.id).or_default().push(j);
            }
        }
        m
    };
    let mut pairs = Vec::new();
    for i in inputs.rows(tt) {
        if let Some(t) = inputs.db.tables[tt][i].token_of(to).filter(|t| t.id != UNK) {
            for &j in by_key.get(&t.id).map(Vec::as_slice).unwrap_or(&[]) {
                pairs.push((i, j));
            }
        }
    }
    Some((tt, ft, pairs))
}

fn push_masked(
    units: &mut Vec<Vec<Example>>,
    toks: &[Token],
    can_mask: &dyn Fn(ColumnId) -> bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    match mask_tokens(toks, can_mask, rng) {
        Ok((tokens, pos, target)) => units.push(vec![Example { tokens, target: Some((pos, target)), nsp: None }]),
        Err(CorpusError::NoMaskablePosition) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

/// Training data of variant A. Stage 1 masks one entity of every FK-PK
/// joined row pair (plain rows when the schema has no FK); stage 2 is the
/// autocompletion task with `k` negatives per instance.
pub struct SchemeA<'a> {
    inputs: TrainInputs<'a>,
    config: &'a TrainConfig,
    joins: Vec<(usize, usize, Vec<(usize, usize)>)>,
    instances: Vec<TaskInstance>,
    pool: Vec<(u32, Vec<Token>)>,
    sampler: Option<NegativeSampler>,
    pub heads: Vec<ColumnId>,
}

impl<'a> SchemeA<'a> {
    pub fn new(
        inputs: TrainInputs<'a>,
        task: &AutocompletionTask,
        train_rows: &[usize],
        config: &'a TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let schema = inputs.schema;
        let can_mask = maskable(schema, config);
        let heads = (0..schema.num_columns() as u32)
            .map(ColumnId)
            .filter(|&c| can_mask(c) || c == task.column)
            .collect();
        let joins = schema.join_compatible_pairs().iter().filter_map(|fk| join_index(inputs, fk)).collect();
        let instances = task.instances(inputs.db, train_rows);
        let pool = task.second_pool(inputs.db);
        let sampler = if config.finetune_nsp && task.second.is_some() {
            let keys: Vec<u32> = pool.iter().map(|(k, _)| *k).collect();
            match NegativeSampler::new(&keys) {
                Ok(s) => Some(s),
                Err(CorpusError::InsufficientRows(_)) => None,
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        Ok(Self { inputs, config, joins, instances, pool, sampler, heads })
    }

    pub fn pretrain_batches(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Example>>> {
        let (db, inputs) = (self.inputs.db, self.inputs);
        let can_mask = maskable(inputs.schema, self.config);
        let mut units = Vec::new();
        if self.joins.is_empty() {
            for t in 0..db.tables.len() {
                for i in inputs.rows(t) {
                    push_masked(&mut units, &db.tables[t][i].tokens, &can_mask, rng)?;
                }
            }
        } else {
            for (tt, ft, pairs) in &self.joins {
                for &(i, j) in pairs {
                    push_masked(&mut units, &pair_tokens(&db.tables[*tt][i].tokens, &db.tables[*ft][j].tokens), &can_mask, rng)?;
                }
            }
        }
        Ok(chunk_batches(units, self.config.batch_size, rng))
    }

    pub fn finetune_batches(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Example>>> {
        let mut units = Vec::with_capacity(self.instances.len());
        for inst in &self.instances {
            let (tokens, pos) = inst.tokens();
            let nsp = (self.sampler.is_some() && inst.second.is_some()).then_some(true);
            let mut unit = vec![Example { tokens, target: Some((pos, inst.target)), nsp }];
            if let (Some(sampler), Some(_)) = (&self.sampler, nsp) {
                for _ in 0..self.config.negatives {
                    let j = sampler.draw(inst.target.id, rng);
                    let (tokens, _) = inst.tokens_with(&self.pool[j].1);
                    unit.push(Example { tokens, target: None, nsp: Some(false) });
                }
            }
            units.push(unit);
        }
        Ok(chunk_batches(units, self.config.batch_size, rng))
    }
}

/// Variant A: [`SchemeA`] stage 1, then `L_A = L_mlm + L_nsp` on the task.
pub fn train_relbert_a<S: Real>(
    inputs: TrainInputs<'_>,
    task: &AutocompletionTask,
    train_rows: &[usize],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&LossReport),
) -> Result<TrainOutcome<S>> {
    if config.variant != Variant::A {
        return Err(TrainError::Config("train_relbert_a called with variant J".into()));
    }
    let scheme = SchemeA::new(inputs, task, train_rows, config)?;
    let mut model = build_model::<S>(inputs, scheme.heads.iter().copied(), config)?;
    let mut run = runner(config, &model);
    let mut reports =
        run.run(&mut model, Stage::Pretrain, config.pretrain_epochs, &mut |rng| scheme.pretrain_batches(rng), on_epoch)?;
    reports.extend(run.run(
        &mut model,
        Stage::Finetune,
        config.finetune_epochs,
        &mut |rng| scheme.finetune_batches(rng),
        on_epoch,
    )?);
    Ok(TrainOutcome { model, reports })
}

type JoinIndex = (usize, usize, Vec<(usize, usize)>);

/// Training data of variant J. Stage 1 is MLM on each table touched by the
/// foreign keys, in batches that never mix tables; stage 2 is NSP over their
/// join pairs.
pub struct SchemeJ<'a> {
    inputs: TrainInputs<'a>,
    config: &'a TrainConfig,
    joins: Vec<(JoinIndex, ColumnId)>,
    samplers: Vec<(NegativeSampler, Vec<usize>, Vec<u32>)>,
    tables: Vec<usize>,
    pub heads: Vec<ColumnId>,
}

impl<'a> SchemeJ<'a> {
    pub fn new(inputs: TrainInputs<'a>, fks: &[ForeignKeyDef], config: &'a TrainConfig) -> Result<Self> {
        let schema = inputs.schema;
        if schema.tables.len() < 2 || fks.is_empty() {
            return Err(TrainError::Config("variant J needs at least two tables joined by a foreign key".into()));
        }
        config.validate()?;
        let mut joins = Vec::new();
        for fk in fks {
            let j = join_index(inputs, fk).ok_or_else(|| TrainError::Config(format!("unknown foreign key {}", fk.label())))?;
            if j.0 == j.1 {
                return Err(TrainError::Config(format!("foreign key {} is a self-join", fk.label())));
            }
            let from = schema.fk_columns(fk).map(|c| c.0).expect("resolved above");
            joins.push((j, from));
        }
        let mut tables: Vec<usize> = joins.iter().flat_map(|((tt, ft, _), _)| [*tt, *ft]).collect();
        tables.sort_unstable();
        tables.dedup();
        let can_mask = maskable(schema, config);
        let heads = tables.iter().flat_map(|&t| schema.table_columns(t)).filter(|&c| can_mask(c)).collect();
        let mut samplers = Vec::new();
        for ((_, ft, _), from) in &joins {
            let pool: Vec<usize> = inputs.rows(*ft).collect();
            let keys: Vec<u32> =
                pool.iter().map(|&j| inputs.db.tables[*ft][j].token_of(*from).map_or(UNK, |t| t.id)).collect();
            samplers.push((NegativeSampler::new(&keys)?, pool, keys));
        }
        Ok(Self { inputs, config, joins, samplers, tables, heads })
    }

    pub fn pretrain_batches(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Example>>> {
        let db = self.inputs.db;
        let can_mask = maskable(self.inputs.schema, self.config);
        let mut batches = Vec::new();
        for &t in &self.tables {
            let mut units = Vec::new();
            for i in self.inputs.rows(t) {
                push_masked(&mut units, &db.tables[t][i].tokens, &can_mask, rng)?;
            }
            batches.extend(chunk_batches(units, self.config.batch_size, rng));
        }
        batches.shuffle(rng);
        Ok(batches)
    }

    pub fn finetune_batches(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Example>>> {
        let db = self.inputs.db;
        let mut units = Vec::new();
        for (((tt, ft, pairs), _), (sampler, pool, keys)) in self.joins.iter().zip(&self.samplers) {
            let pos_of: BTreeMap<usize, usize> = pool.iter().enumerate().map(|(p, &j)| (j, p)).collect();
            for &(i, j) in pairs {
                let first = &db.tables[*tt][i].tokens;
                let key = keys[pos_of[&j]];
                let mut unit =
                    vec![Example { tokens: pair_tokens(first, &db.tables[*ft][j].tokens), target: None, nsp: Some(true) }];
                for _ in 0..self.config.negatives {
                    let n = pool[sampler.draw(key, rng)];
                    unit.push(Example { tokens: pair_tokens(first, &db.tables[*ft][n].tokens), target: None, nsp: Some(false) });
                }
                units.push(unit);
            }
        }
        Ok(chunk_batches(units, self.config.batch_size, rng))
    }
}

/// Variant J: [`SchemeJ`] stage 1 MLM, then NSP on the join pairs.
pub fn train_relbert_j<S: Real>(
    inputs: TrainInputs<'_>,
    fks: &[ForeignKeyDef],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&LossReport),
) -> Result<TrainOutcome<S>> {
    if config.variant != Variant::J {
        return Err(TrainError::Config("train_relbert_j called with variant A".into()));
    }
    let scheme = SchemeJ::new(inputs, fks, config)?;
    let mut model = build_model::<S>(inputs, scheme.heads.iter().copied(), config)?;
    let mut run = runner(config, &model);
    let mut reports =
        run.run(&mut model, Stage::Pretrain, config.pretrain_epochs, &mut |rng| scheme.pretrain_batches(rng), on_epoch)?;
    reports.extend(run.run(
        &mut model,
        Stage::Finetune,
        config.finetune_epochs,
        &mut |rng| scheme.finetune_batches(rng),
        on_epoch,
    )?);
    Ok(TrainOutcome { model, reports })
}
