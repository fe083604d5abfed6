//! The table encoder: per-space embedding tables, a post-LN transformer
//! stack with no positional embeddings, per-column MLM heads and an NSP head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Token;
use crate::rng::seeded;
use crate::schema::ColumnId;
use crate::tensor::{ParamId, ParamStore, Real, SoftmaxMask, Tape, Tensor, TensorError, Var};
use crate::vocab::{SpaceId, VocabularySet, NUM_SPECIAL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("dimension mismatch: model has d={expected}, vectors have d={got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no output head for column {0:?}")]
    NoHeadForColumn(ColumnId),
    #[error("column {0:?} is not part of the model layout")]
    UnknownColumn(ColumnId),
    #[error("empty input batch")]
    EmptyInput,
    #[error("parameter {name}: {detail}")]
    Params { name: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = core::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub activation: Activation,
    /// Applied to sublayer outputs during training only; 0 disables it.
    pub dropout: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 300,
            layers: 4,
            heads: 4,
            ff_hidden: 1200,
            activation: Activation::Gelu,
            dropout: 0.0,
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ff_hidden == 0 {
            return Err(EncoderError::Config("d_model, heads and ff_hidden must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.init_std > 0.0) || !(self.layer_norm_eps > 0.0) {
            return Err(EncoderError::Config("dropout, init_std or layer_norm_eps out of range".into()));
        }
        Ok(())
    }
}

/// Vocabulary-dependent shape information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    /// Rows of each space's embedding table, specials included.
    pub space_sizes: Vec<usize>,
    pub column_space: Vec<SpaceId>,
    /// Columns with an MLM head and the head width (entity count).
    pub heads: Vec<(ColumnId, usize)>,
}

impl ModelLayout {
    /// Heads are created for `head_columns` whose space is non-empty.
    pub fn new(vocabs: &VocabularySet, head_columns: impl IntoIterator<Item = ColumnId>) -> Self {
        let mut heads: Vec<(ColumnId, usize)> = head_columns
            .into_iter()
            .map(|c| (c, vocabs.for_column(c).num_entities()))
            .filter(|&(_, n)| n > 0)
            .collect();
        heads.sort();
        heads.dedup();
        Self {
            space_sizes: vocabs.spaces.iter().map(|v| v.len()).collect(),
            column_space: vocabs.column_space.clone(),
            heads,
        }
    }

    pub fn head_width(&self, col: ColumnId) -> Option<usize> {
        self.heads.iter().find(|(c, _)| *c == col).map(|&(_, n)| n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_plan(config: &EncoderConfig, layout: &ModelLayout) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mut plan = vec![(String::from("emb.special"), vec![NUM_SPECIAL as usize, d], Init::Normal)];
    for (s, &n) in layout.space_sizes.iter().enumerate() {
        plan.push((format!("emb.space.{}", s), vec![n, d], Init::Normal));
    }
    for l in 0..config.layers {
        let f = config.ff_hidden;
        let p = |n: &str| format!("layer.{}.{}", l, n);
        plan.extend([
            (p("attn.wq"), vec![d, d], Init::Normal),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], Init::Normal),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], Init::Normal),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Normal),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("ff.w1"), vec![d, f], Init::Normal),
            (p("ff.b1"), vec![f], Init::Zeros),
            (p("ff.w2"), vec![f, d], Init::Normal),
            (p("ff.b2"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
        ]);
    }
    for &(c, n) in &layout.heads {
        plan.push((format!("head.{}", c.0), vec![d, n], Init::Normal));
    }
    // Zero NSP head: an untrained model scores every pair 0 (probability 0.5).
    plan.push(("nsp.w".into(), vec![d, 1], Init::Zeros));
    plan.push(("nsp.b".into(), vec![1], Init::Zeros));
    plan
}

/// Encoder output for a padded batch.
pub struct Forward<S: Real = f64> {
    /// `[batch * seq_len, d]`, row `b * seq_len + i` is position `i` of entry `b`.
    pub output: Var,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    /// Per layer, `[batch * heads, seq_len, seq_len]` attention weights.
    pub attention: Vec<Tensor<S>>,
}

impl<S: Real> Forward<S> {
    pub fn row(&self, entry: usize, pos: usize) -> usize {
        entry * self.seq_len + pos
    }
}

/// Attention weights of one input: `layers[l][h]` is `len × len`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<S = f64> {
    pub layers: Vec<Vec<Tensor<S>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableEncoderModel<S: Real = f64> {
    pub config: EncoderConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<S>,
    special: ParamId,
    spaces: Vec<ParamId>,
    layers: Vec<LayerIds>,
    heads: BTreeMap<ColumnId, ParamId>,
    nsp_w: ParamId,
    nsp_b: ParamId,
}

impl<S: Real> TableEncoderModel<S> {
    /// Fresh model: N(0, init_std²) weights, zero biases, unit LN gains.
    pub fn new(config: EncoderConfig, layout: ModelLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| EncoderError::Config(format!("{}", e)))?;
        let mut store = ParamStore::new();
        for (name, shape, init) in param_plan(&config, &layout) {
            let t = match init {
                Init::Normal => Tensor::from_fn(&shape, |_| S::from_f64(normal.sample(&mut rng))),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, S::one()),
            };
            store.add(name, t);
        }
        Self::from_params(config, layout, store)
    }

    /// Wraps an existing store (e.g. a loaded checkpoint); every expected
    /// parameter must be present with the expected shape.
    pub fn from_params(config: EncoderConfig, layout: ModelLayout, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let plan = param_plan(&config, &layout);
        if params.len() != plan.len() {
            return Err(EncoderError::Params {
                name: "*".into(),
                detail: format!("expected {} tensors, found {}", plan.len(), params.len()),
            });
        }
        for (name, shape, _) in &plan {
            let id = params
                .find(name)
                .ok_or_else(|| EncoderError::Params { name: name.clone(), detail: "missing".into() })?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(EncoderError::Params {
                    name: name.clone(),
                    detail: format!("shape {:?}, expected {:?}", params.get(id).shape(), shape),
                });
            }
        }
        let id = |n: &str| params.find(n).expect("checked above");
        let layers = (0..config.layers)
            .map(|l| {
                let p = |n: &str| id(&format!("layer.{}.{}", l, n));
                LayerIds {
                    wq: p("attn.wq"),
                    bq: p("attn.bq"),
                    wk: p("attn.wk"),
                    bk: p("attn.bk"),
                    wv: p("attn.wv"),
                    bv: p("attn.bv"),
                    wo: p("attn.wo"),
                    bo: p("attn.bo"),
                    ln1_g: p("ln1.gain"),
                    ln1_b: p("ln1.bias"),
                    w1: p("ff.w1"),
                    b1: p("ff.b1"),
                    w2: p("ff.w2"),
                    b2: p("ff.b2"),
                    ln2_g: p("ln2.gain"),
                    ln2_b: p("ln2.bias"),
                }
            })
            .collect();
        Ok(Self {
            special: id("emb.special"),
            spaces: (0..layout.space_sizes.len()).map(|s| id(&format!("emb.space.{}", s))).collect(),
            layers,
            heads: layout.heads.iter().map(|&(c, _)| (c, id(&format!("head.{}", c.0)))).collect(),
            nsp_w: id("nsp.w"),
            nsp_b: id("nsp.b"),
            config,
            layout,
            params,
        })
    }

    pub fn head_columns(&self) -> impl Iterator<Item = ColumnId> + '_ {
        self.heads.keys().copied()
    }

    pub fn has_head(&self, col: ColumnId) -> bool {
        self.heads.contains_key(&col)
    }

    pub fn head_param(&self, col: ColumnId) -> Option<ParamId> {
        self.heads.get(&col).copied()
    }

    pub fn space_param(&self, space: SpaceId) -> Option<ParamId> {
        self.spaces.get(space.index()).copied()
    }

    pub fn nsp_params(&self) -> (ParamId, ParamId) {
        (self.nsp_w, self.nsp_b)
    }

    fn lookup_key(&self, tok: Token) -> Result<(ParamId, usize)> {
        if tok.is_special() {
            return Ok((self.special, tok.id as usize));
        }
        let space = self.layout.column_space.get(tok.column.index()).ok_or(EncoderError::UnknownColumn(tok.column))?;
        Ok((self.spaces[space.index()], tok.id as usize))
    }

    /// Input matrix P for a padded batch, `[batch * seq_len, d]`, plus the
    /// key-validity mask. Only the column's embedding table is consulted;
    /// nothing depends on the position.
    pub fn embed(&self, tape: &mut Tape<'_, S>, batch: &[&[Token]]) -> Result<(Var, usize, Vec<bool>)> {
        let n = batch.iter().map(|s| s.len()).max().unwrap_or(0);
        if batch.is_empty() || n == 0 || batch.iter().any(|s| s.is_empty()) {
            return Err(EncoderError::EmptyInput);
        }
        let mut lookups = Vec::with_capacity(batch.len() * n);
        let mut valid = Vec::with_capacity(batch.len() * n);
        for s in batch {
            for i in 0..n {
                let tok = s.get(i).copied().unwrap_or(Token::PAD);
                lookups.push(self.lookup_key(tok)?);
                valid.push(i < s.len());
            }
        }
        Ok((tape.embedding_lookup(&lookups)?, n, valid))
    }

    /// Runs the encoder stack. `train_rng` enables dropout when the config
    /// asks for it; evaluation passes `None`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, S>,
        batch: &[&[Token]],
        capture_attention: bool,
        mut train_rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward<S>> {
        let (mut x, n, valid) = self.embed(tape, batch)?;
        let b = batch.len();
        let d = self.config.d_model;
        let h = self.config.heads;
        let dh = d / h;
        let mask = SoftmaxMask { keys: valid, rows_per_entry: h * n };
        let inv_sqrt = S::from_f64(1.0 / libm::sqrt(dh as f64));
        let eps = self.config.layer_norm_eps;
        let mut attention = Vec::new();

        for ids in &self.layers {
            let split = |tape: &mut Tape<'_, S>, w: ParamId, bias: ParamId, x: Var| -> Result<Var> {
                let (w, bias) = (tape.param(w), tape.param(bias));
                let y = tape.matmul(x, w)?;
                let y = tape.add(y, bias)?;
                let y = tape.reshape(y, &[b, n, h, dh])?;
                let y = tape.permute(y, &[0, 2, 1, 3])?;
                Ok(tape.reshape(y, &[b * h, n, dh])?)
            };
            let q = split(tape, ids.wq, ids.bq, x)?;
            let k = split(tape, ids.wk, ids.bk, x)?;
            let v = split(tape, ids.wv, ids.bv, x)?;
            let kt = tape.transpose(k)?;
            let scores = tape.batch_matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let probs = tape.row_softmax(scores, Some(&mask))?;
            if capture_attention {
                attention.push(tape.value(probs).clone());
            }
            let ctx = tape.batch_matmul(probs, v)?;
            let ctx = tape.reshape(ctx, &[b, h, n, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b * n, d])?;
            let (wo, bo) = (tape.param(ids.wo), tape.param(ids.bo));
            let a = tape.matmul(ctx, wo)?;
            let mut a = tape.add(a, bo)?;
            if let (Some(rng), true) = (train_rng.as_deref_mut(), self.config.dropout > 0.0) {
                a = tape.dropout(a, self.config.dropout, rng)?;
            }
            let r = tape.add(x, a)?;
            let (g1, b1) = (tape.param(ids.ln1_g), tape.param(ids.ln1_b));
            x = tape.layer_norm(r, g1, b1, eps)?;

            let (w1, fb1, w2, fb2) = (tape.param(ids.w1), tape.param(ids.b1), tape.param(ids.w2), tape.param(ids.b2));
            let f = tape.matmul(x, w1)?;
            let f = tape.add(f, fb1)?;
            let f = match self.config.activation {
                Activation::Gelu => tape.gelu(f)?,
                Activation::Relu => tape.relu(f)?,
            };
            let f = tape.matmul(f, w2)?;
            let mut f = tape.add(f, fb2)?;
            if let (Some(rng), true) = (train_rng.as_deref_mut(), self.config.dropout > 0.0) {
                f = tape.dropout(f, self.config.dropout, rng)?;
            }
            let r = tape.add(x, f)?;
            let (g2, b2) = (tape.param(ids.ln2_g), tape.param(ids.ln2_b));
            x = tape.layer_norm(r, g2, b2, eps)?;
        }
        Ok(Forward { output: x, batch: b, seq_len: n, lengths: batch.iter().map(|s| s.len()).collect(), attention })
    }

    /// Logits over the entities of `column` for the given output rows
    /// (`Forward::row` indices). Logit `i` scores token id `i + 3`.
    pub fn mlm_logits(&self, tape: &mut Tape<'_, S>, fwd: &Forward<S>, rows: &[usize], column: ColumnId) -> Result<Var> {
        let head = *self.heads.get(&column).ok_or(EncoderError::NoHeadForColumn(column))?;
        let o = tape.gather_rows(fwd.output, rows)?;
        let w = tape.param(head);
        Ok(tape.matmul(o, w)?)
    }

    /// NSP logits `v`, shape `[entries.len(), 1]`, read at position 0 ([CLS]).
    pub fn nsp_scores(&self, tape: &mut Tape<'_, S>, fwd: &Forward<S>, entries: &[usize]) -> Result<Var> {
        let rows: Vec<usize> = entries.iter().map(|&e| fwd.row(e, 0)).collect();
        let o = tape.gather_rows(fwd.output, &rows)?;
        let (w, b) = (tape.param(self.nsp_w), tape.param(self.nsp_b));
        let v = tape.matmul(o, w)?;
        Ok(tape.add(v, b)?)
    }

    /// Output embeddings of a single sequence, `[len, d]`, with attention.
    pub fn encode(&self, tokens: &[Token]) -> Result<(Tensor<S>, AttentionRecord<S>)> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, &[tokens], true, None)?;
        let out = tape.value(fwd.output).clone();
        let n = fwd.seq_len;
        let h = self.config.heads;
        let layers = fwd
            .attention
            .iter()
            .map(|a| (0..h).map(|k| Tensor::new(vec![n, n], a.data()[k * n * n..(k + 1) * n * n].to_vec())).collect())
            .collect::<core::result::Result<Vec<Vec<_>>, _>>()?;
        Ok((out, AttentionRecord { layers }))
    }

    /// MLM logits for the masked position of a single sequence, as f64.
    pub fn predict_masked(&self, tokens: &[Token], position: usize, column: ColumnId) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, &[tokens], false, None)?;
        let logits = self.mlm_logits(&mut tape, &fwd, &[position], column)?;
        Ok(tape.value(logits).data().iter().map(|v| v.as_f64()).collect())
    }

    /// NSP logits for a batch of pair sequences.
    pub fn score_pairs(&self, batch: &[&[Token]]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, batch, false, None)?;
        let entries: Vec<usize> = (0..batch.len()).collect();
        let v = self.nsp_scores(&mut tape, &fwd, &entries)?;
        Ok(tape.value(v).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Sets the embedding row of every entity `vectors` knows about. Rows
    /// without a vector (and the specials) keep their Gaussian init.
    /// Returns the number of rows replaced.
    pub fn init_from_word2vec(&mut self, dim: usize, vectors: impl Fn(SpaceId, u32) -> Option<Vec<f64>>) -> Result<usize> {
        if dim != self.config.d_model {
            return Err(EncoderError::DimensionMismatch { expected: self.config.d_model, got: dim });
        }
        let mut set = 0;
        for (s, &pid) in self.spaces.iter().enumerate() {
            let rows = self.layout.space_sizes[s];
            for id in NUM_SPECIAL..rows as u32 {
                if let Some(v) = vectors(SpaceId(s as u32), id) {
                    if v.len() != dim {
                        return Err(EncoderError::DimensionMismatch { expected: dim, got: v.len() });
                    }
                    let table = self.params.get_mut(pid);
                    let row = &mut table.data_mut()[id as usize * dim..(id as usize + 1) * dim];
                    for (dst, &src) in row.iter_mut().zip(&v) {
                        *dst = S::from_f64(src);
                    }
                    set += 1;
                }
            }
        }
        Ok(set)
    }

    /// Embedding row of a token (input space, before the encoder).
    pub fn embedding(&self, tok: Token) -> Result<&[S]> {
        let (pid, row) = self.lookup_key(tok)?;
        let t = self.params.get(pid);
        if row >= t.shape()[0] {
            return Err(TensorError::Index { op: "embedding", index: row, bound: t.shape()[0] }.into());
        }
        Ok(t.row(row))
    }

    pub fn cast<T: Real>(&self) -> TableEncoderModel<T> {
        let mut store = ParamStore::new();
        for (_, name, t) in self.params.iter() {
            store.add(name, t.cast());
        }
        TableEncoderModel::from_params(self.config.clone(), self.layout.clone(), store).expect("same plan")
    }
}
