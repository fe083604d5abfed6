//! Word2vec-style reference models: Table2Vec (skip-gram over row
//! sentences) and EmbDi (skip-gram over random walks on a token/row/column
//! graph), plus the cosine ranking adapter used to evaluate them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedDatabase, Token};
use crate::rng::{seeded, stream};
use crate::schema::{ColumnId, DatabaseSchema};
use crate::tensor::kernels::sigmoid;
use crate::vocab::{SpaceId, VocabularySet, NUM_SPECIAL, UNK};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BaselineError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("no context token has an embedding")]
    EmptyContext,
    #[error("invalid config: {0}")]
    Config(String),
}

/// A namespaced entity: token `id` of latent space `space`.
pub type EntityKey = (SpaceId, u32);

/// Dense ids for arbitrary ordered keys, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon<K: Ord + Clone> {
    keys: Vec<K>,
    index: BTreeMap<K, u32>,
}

impl<K: Ord + Clone> Lexicon<K> {
    pub fn new() -> Self {
        Self { keys: Vec::new(), index: BTreeMap::new() }
    }

    pub fn intern(&mut self, k: &K) -> u32 {
        if let Some(&i) = self.index.get(k) {
            return i;
        }
        let i = self.keys.len() as u32;
        self.keys.push(k.clone());
        self.index.insert(k.clone(), i);
        i
    }

    pub fn get(&self, k: &K) -> Option<u32> {
        self.index.get(k).copied()
    }

    pub fn key(&self, i: u32) -> &K {
        &self.keys[i as usize]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

fn entity_key(vocabs: &VocabularySet, tok: Token) -> Option<EntityKey> {
    (!tok.is_special() && tok.id >= NUM_SPECIAL).then(|| (vocabs.space_of(tok.column), tok.id))
}

/// One sentence of namespaced entities per included row, null and unknown
/// cells skipped. `include(table, position)` filters rows (e.g. held-out ones).
pub fn table2vec_corpus(
    db: &EncodedDatabase,
    vocabs: &VocabularySet,
    include: impl Fn(usize, usize) -> bool + Copy,
) -> Vec<Vec<EntityKey>> {
    db.tables
        .iter()
        .enumerate()
        .flat_map(|(t, rows)| rows.iter().enumerate().filter(move |&(i, _)| include(t, i)).map(|(_, s)| s))
        .map(|s| s.tokens.iter().filter_map(|&t| entity_key(vocabs, t)).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Every other token of the sentence is context.
    Sentence,
    /// Tokens at distance `1..=w` on either side.
    Sliding(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub epochs: usize,
    pub window: Window,
    pub negatives: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self { dim: 300, epochs: 5, window: Window::Sentence, negatives: 5, lr: 0.025, seed: 0 }
    }
}

/// Skip-gram with negative sampling over dense ids `0..vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramModel {
    pub dim: usize,
    pub vocab: usize,
    /// Input vectors, `vocab × dim` (the embeddings).
    pub syn0: Vec<f64>,
    /// Output vectors, `vocab × dim`.
    pub syn1: Vec<f64>,
}

impl SkipGramModel {
    /// word2vec's init: input vectors uniform in ±0.5/dim, outputs zero.
    pub fn init(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let syn0 = (0..vocab * dim).map(|_| (rng.random::<f64>() - 0.5) / dim as f64).collect();
        Self { dim, vocab, syn0, syn1: vec![0.0; vocab * dim] }
    }

    pub fn vector(&self, i: u32) -> &[f64] {
        &self.syn0[i as usize * self.dim..(i as usize + 1) * self.dim]
    }
}

/// Draws ids proportionally to `count^0.75`.
#[derive(Debug, Clone)]
pub struct UnigramTable {
    cumulative: Vec<f64>,
}

impl UnigramTable {
    pub fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += libm::pow(c as f64, 0.75);
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let total = *self.cumulative.last().unwrap_or(&0.0);
        let x = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= x).min(self.cumulative.len() - 1) as u32
    }

    pub fn probability(&self, i: u32) -> f64 {
        let total = *self.cumulative.last().unwrap_or(&1.0);
        let lo = if i == 0 { 0.0 } else { self.cumulative[i as usize - 1] };
        (self.cumulative[i as usize] - lo) / total
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (libm::sqrt(dot(a, a)), libm::sqrt(dot(b, b)));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Single-threaded SGNS. Negatives never equal the center or the context
/// id; the learning rate decays linearly over sentences processed.
pub fn train_skipgram(corpus: &[Vec<u32>], vocab: usize, cfg: &SkipGramConfig) -> Result<SkipGramModel, BaselineError> {
    if corpus.iter().all(|s| s.len() < 2) || vocab == 0 {
        return Err(BaselineError::EmptyCorpus);
    }
    if cfg.dim == 0 {
        return Err(BaselineError::Config("dim must be positive".into()));
    }
    let mut model = SkipGramModel::init(vocab, cfg.dim, cfg.seed);
    let mut counts = vec![0u64; vocab];
    for s in corpus {
        for &t in s {
            counts[t as usize] += 1;
        }
    }
    let table = UnigramTable::new(&counts);
    let distinct = counts.iter().filter(|&&c| c > 0).count();
    let mut rng = stream(cfg.seed, 1);
    let d = cfg.dim;
    let total = (cfg.epochs * corpus.len()).max(1) as f64;
    let mut done = 0usize;
    let mut neu1e = vec![0.0; d];
    for _ in 0..cfg.epochs {
        for sentence in corpus {
            let lr = cfg.lr * (1.0 - done as f64 / total).max(1e-4);
            done += 1;
            for (i, &center) in sentence.iter().enumerate() {
                let (lo, hi) = match cfg.window {
                    Window::Sentence => (0, sentence.len()),
                    Window::Sliding(w) => (i.saturating_sub(w), (i + w + 1).min(sentence.len())),
                };
                for (j, &context) in sentence.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    neu1e.iter_mut().for_each(|v| *v = 0.0);
                    let c0 = center as usize * d;
                    let mut update = |target: u32, label: f64, model: &mut SkipGramModel| {
                        let t1 = target as usize * d;
                        let f = sigmoid(dot(&model.syn0[c0..c0 + d], &model.syn1[t1..t1 + d]));
                        let g = (label - f) * lr;
                        for k in 0..d {
                            neu1e[k] += g * model.syn1[t1 + k];
                            model.syn1[t1 + k] += g * model.syn0[c0 + k];
                        }
                    };
                    update(context, 1.0, &mut model);
                    if distinct > 2 {
                        for _ in 0..cfg.negatives {
                            let mut neg = table.sample(&mut rng);
                            while neg == center || neg == context {
                                neg = table.sample(&mut rng);
                            }
                            update(neg, 0.0, &mut model);
                        }
                    }
                    for k in 0..d {
                        model.syn0[c0 + k] += neu1e[k];
                    }
                }
            }
        }
    }
    Ok(model)
}

/// Entity vectors used for ranking.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityEmbeddings {
    pub dim: usize,
    pub vectors: BTreeMap<EntityKey, Vec<f64>>,
}

impl EntityEmbeddings {
    pub fn get(&self, key: &EntityKey) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }
}

/// Trains Table2Vec and returns its entity vectors.
pub fn train_table2vec(corpus: &[Vec<EntityKey>], cfg: &SkipGramConfig) -> Result<EntityEmbeddings, BaselineError> {
    let mut lex = Lexicon::new();
    let ids: Vec<Vec<u32>> = corpus.iter().map(|s| s.iter().map(|k| lex.intern(k)).collect()).collect();
    let cfg = SkipGramConfig { window: Window::Sentence, ..cfg.clone() };
    let model = train_skipgram(&ids, lex.len(), &cfg)?;
    Ok(EntityEmbeddings {
        dim: model.dim,
        vectors: (0..lex.len() as u32).map(|i| (*lex.key(i), model.vector(i).to_vec())).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Token(EntityKey),
    Rid { table: usize, row: usize },
    Cid(ColumnId),
}

/// Undirected graph with token↔RID and token↔CID edges only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripartiteGraph {
    pub nodes: Vec<NodeKind>,
    /// Sorted, de-duplicated neighbour lists.
    pub adj: Vec<Vec<u32>>,
    pub num_tokens: usize,
}

impl TripartiteGraph {
    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        self.adj[a as usize].binary_search(&b).is_ok()
    }

    /// Token nodes come first: ids `0..num_tokens`.
    pub fn token_nodes(&self) -> core::ops::Range<u32> {
        0..self.num_tokens as u32
    }

    pub fn label(&self, schema: &DatabaseSchema, vocabs: &VocabularySet, node: u32) -> String {
        let qualified = |c: ColumnId| {
            let (t, i) = schema.locate(c).unwrap_or((0, 0));
            format!("{}.{}", schema.tables[t].name, schema.tables[t].columns[i].name)
        };
        match self.nodes[node as usize] {
            NodeKind::Token((s, id)) => format!("tok:{}.{}", qualified(vocabs.spaces[s.index()].canonical), id),
            NodeKind::Rid { table, row } => format!("rid:{}.{}", schema.tables[table].name, row),
            NodeKind::Cid(c) => format!("cid:{}", qualified(c)),
        }
    }
}

/// Every included, non-null cell links its token to its row id and its
/// column id. Repeated cells collapse (set semantics).
pub fn build_tripartite_graph(
    db: &EncodedDatabase,
    vocabs: &VocabularySet,
    include: impl Fn(usize, usize) -> bool + Copy,
) -> TripartiteGraph {
    let mut edges: BTreeSet<(NodeKind, NodeKind)> = BTreeSet::new();
    let mut tokens = BTreeSet::new();
    let mut others = BTreeSet::new();
    let included = db.tables.iter().enumerate().flat_map(|(t, rows)| rows.iter().enumerate().filter(move |&(i, _)| include(t, i)));
    for (_, s) in included {
        let rid = NodeKind::Rid { table: s.table, row: s.row };
        for &t in &s.tokens {
            if t.id == UNK {
                continue;
            }
            let Some(key) = entity_key(vocabs, t) else { continue };
            let tok = NodeKind::Token(key);
            tokens.insert(tok);
            others.insert(rid);
            others.insert(NodeKind::Cid(t.column));
            edges.insert((tok, rid));
            edges.insert((tok, NodeKind::Cid(t.column)));
        }
    }
    let nodes: Vec<NodeKind> = tokens.iter().chain(others.iter()).copied().collect();
    let index: BTreeMap<NodeKind, u32> = nodes.iter().enumerate().map(|(i, n)| (*n, i as u32)).collect();
    let mut adj = vec![Vec::new(); nodes.len()];
    for (a, b) in edges {
        let (ia, ib) = (index[&a], index[&b]);
        adj[ia as usize].push(ib);
        adj[ib as usize].push(ia);
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    TripartiteGraph { nodes, adj, num_tokens: tokens.len() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub walks_per_entity: usize,
    pub walk_length: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self { walks_per_entity: 50, walk_length: 20, seed: 0 }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.walks_per_entity == 0 || self.walk_length == 0 {
            return Err(BaselineError::Config("walks_per_entity and walk_length must be at least 1".into()));
        }
        Ok(())
    }
}

/// The walks starting at `start`. Each start node owns an RNG stream, so
/// the corpus does not depend on how starts are scheduled.
pub fn walks_from(graph: &TripartiteGraph, start: u32, cfg: &WalkConfig) -> Vec<Vec<u32>> {
    let mut rng = stream(cfg.seed, start as u64);
    (0..cfg.walks_per_entity)
        .map(|_| {
            let mut walk = Vec::with_capacity(cfg.walk_length);
            let mut at = start;
            walk.push(at);
            while walk.len() < cfg.walk_length {
                let nb = &graph.adj[at as usize];
                at = nb[rng.random_range(0..nb.len())];
                walk.push(at);
            }
            walk
        })
        .collect()
}

pub fn random_walk_corpus(graph: &TripartiteGraph, cfg: &WalkConfig) -> Result<Vec<Vec<u32>>, BaselineError> {
    cfg.validate()?;
    if graph.num_tokens == 0 {
        return Err(BaselineError::EmptyCorpus);
    }
    Ok(graph.token_nodes().flat_map(|s| walks_from(graph, s, cfg)).collect())
}

/// Skip-gram over walks (sliding window); RID/CID vectors are dropped.
pub fn train_embdi(graph: &TripartiteGraph, walks: &[Vec<u32>], cfg: &SkipGramConfig) -> Result<EntityEmbeddings, BaselineError> {
    let model = train_skipgram(walks, graph.nodes.len(), cfg)?;
    let vectors = graph
        .token_nodes()
        .filter_map(|i| match graph.nodes[i as usize] {
            NodeKind::Token(k) => Some((k, model.vector(i).to_vec())),
            _ => None,
        })
        .collect();
    Ok(EntityEmbeddings { dim: model.dim, vectors })
}

/// Cosine between the mean context vector and every entity of `target`'s
/// space; entry `i` scores token id `i + 3`. Context tokens without a
/// vector are ignored; candidates without one score 0.
pub fn baseline_scores(
    emb: &EntityEmbeddings,
    vocabs: &VocabularySet,
    context: &[Token],
    target: ColumnId,
) -> Result<Vec<f64>, BaselineError> {
    let mut mean = vec![0.0; emb.dim];
    let mut n = 0usize;
    for &t in context {
        if let Some(v) = entity_key(vocabs, t).and_then(|k| emb.get(&k)) {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
            n += 1;
        }
    }
    if n == 0 {
        return Err(BaselineError::EmptyContext);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let space = vocabs.space_of(target);
    Ok(vocabs
        .for_column(target)
        .entity_ids()
        .map(|id| emb.get(&(space, id)).map_or(0.0, |v| cosine(&mean, v)))
        .collect())
}

/// Candidate token ids of `target`, best first, ties by token id.
pub fn baseline_rank(
    emb: &EntityEmbeddings,
    vocabs: &VocabularySet,
    context: &[Token],
    target: ColumnId,
) -> Result<Vec<u32>, BaselineError> {
    let scores = baseline_scores(emb, vocabs, context, target)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order.into_iter().map(|i| i as u32 + NUM_SPECIAL).collect())
}
