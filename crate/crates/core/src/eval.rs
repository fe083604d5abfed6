//! Ranking metrics and the autocompletion / join-prediction protocols.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{baseline_scores, BaselineError, EntityEmbeddings};
use crate::corpus::{pair_tokens, EncodedDatabase, Token};
use crate::encoder::{EncoderError, TableEncoderModel};
use crate::rng::stream;
use crate::schema::{DatabaseSchema, ForeignKeyDef};
use crate::task::TaskInstance;
use crate::tensor::Real;
use crate::vocab::{VocabularySet, NUM_SPECIAL, UNK};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("true candidate {index} outside pool of {bound}")]
    Index { index: usize, bound: usize },
    #[error("no ranking results to aggregate")]
    EmptyResults,
    #[error("candidate pool is empty")]
    NoCandidates,
    #[error("invalid evaluation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

pub type Result<T> = core::result::Result<T, EvalError>;

/// How equal scores are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Smaller candidate index (token id) first.
    #[default]
    TokenId,
    /// The true candidate wins every tie.
    Optimistic,
    /// The true candidate loses every tie.
    Pessimistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub instance: usize,
    pub true_id: u32,
    pub rank: usize,
    pub pool: usize,
}

/// 1 + candidates scored strictly higher + ties ordered before the truth.
pub fn rank_of(scores: &[f64], truth: usize, tie: TieBreak) -> Result<usize> {
    let Some(&s) = scores.get(truth) else {
        return Err(EvalError::Index { index: truth, bound: scores.len() });
    };
    let mut rank = 1;
    for (i, &x) in scores.iter().enumerate() {
        if x > s {
            rank += 1;
        } else if x == s && i != truth {
            match tie {
                TieBreak::TokenId if i < truth => rank += 1,
                TieBreak::Pessimistic => rank += 1,
                _ => {}
            }
        }
    }
    Ok(rank)
}

/// Rank of candidate `truth` in a pool scored by `scores`.
pub fn rank_candidates(scores: &[f64], truth: usize, tie: TieBreak) -> Result<RankingResult> {
    Ok(RankingResult { instance: 0, true_id: truth as u32, rank: rank_of(scores, truth, tie)?, pool: scores.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub model: String,
    pub k: usize,
    pub hits_at_k: f64,
    pub mean_rank: f64,
    pub mrr: f64,
    pub n: usize,
    pub seed: u64,
    /// Mean candidate-pool size over instances.
    pub pool: f64,
}

pub fn compute_metrics(results: &[RankingResult], k: usize) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let n = results.len() as f64;
    let hits = results.iter().filter(|r| r.rank <= k).count() as f64 / n;
    let mean_rank = results.iter().map(|r| r.rank as f64).sum::<f64>() / n;
    let mrr = results.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / n;
    let pool = results.iter().map(|r| r.pool as f64).sum::<f64>() / n;
    Ok(MetricsReport {
        task: String::new(),
        model: String::new(),
        k,
        hits_at_k: hits,
        mean_rank,
        mrr,
        n: results.len(),
        seed: 0,
        pool,
    })
}

/// Range checks plus `MRR >= 1/MR`, which holds for any rank list.
pub fn metrics_consistent(hits_at_k: f64, mean_rank: f64, mrr: f64) -> bool {
    (0.0..=1.0).contains(&hits_at_k) && mean_rank >= 1.0 && mrr > 0.0 && mrr <= 1.0 && mrr * mean_rank >= 1.0 - 1e-12
}

/// Expected reciprocal rank of a uniformly random ranking, `H_n / n`.
pub fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

/// Standard deviation of `1/rank` for a uniformly random rank in `1..=n`.
pub fn random_rr_std(n: usize) -> f64 {
    let m = random_mrr(n);
    let sq = (1..=n).map(|r| 1.0 / (r * r) as f64).sum::<f64>() / n as f64;
    libm::sqrt((sq - m * m).max(0.0))
}

/// MLM scores over the target column's entities for one instance.
pub fn model_autocompletion_scores<S: Real>(model: &TableEncoderModel<S>, inst: &TaskInstance) -> Result<Vec<f64>> {
    let (tokens, pos) = inst.tokens();
    Ok(model.predict_masked(&tokens, pos, inst.target.column)?)
}

/// Cosine scores of a baseline; an instance with no usable context scores
/// every candidate 0 (ranking falls back to the tie-break).
pub fn baseline_autocompletion_scores(emb: &EntityEmbeddings, vocabs: &VocabularySet, inst: &TaskInstance) -> Result<Vec<f64>> {
    match baseline_scores(emb, vocabs, &inst.context(), inst.target.column) {
        Ok(s) => Ok(s),
        Err(BaselineError::EmptyContext) => Ok(alloc::vec![0.0; vocabs.for_column(inst.target.column).num_entities()]),
        Err(e) => Err(e.into()),
    }
}

pub fn rank_instance(id: usize, inst: &TaskInstance, scores: &[f64], tie: TieBreak) -> Result<RankingResult> {
    let truth = (inst.target.id - NUM_SPECIAL) as usize;
    Ok(RankingResult { instance: id, true_id: inst.target.id, rank: rank_of(scores, truth, tie)?, pool: scores.len() })
}

/// Ranks each instance's true entity among all entities of its column.
pub fn evaluate_autocompletion(
    instances: &[TaskInstance],
    scorer: impl Fn(&TaskInstance) -> Result<Vec<f64>>,
    k: usize,
    tie: TieBreak,
) -> Result<(MetricsReport, Vec<RankingResult>)> {
    let results = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| rank_instance(i, inst, &scorer(inst)?, tie))
        .collect::<Result<Vec<_>>>()?;
    Ok((compute_metrics(&results, k)?, results))
}

pub fn check_model_head<S: Real>(model: &TableEncoderModel<S>, inst: &[TaskInstance]) -> Result<()> {
    match inst.first() {
        Some(i) if !model.has_head(i.target.column) => {
            Err(EvalError::Config(alloc::format!("model has no output head for column {:?}", i.target.column)))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct JoinEvalConfig {
    /// Candidates per query; `None` ranks against every FK-side row.
    pub pool: Option<usize>,
    pub seed: u64,
    pub k: usize,
    pub tie: TieBreak,
}

impl Default for JoinEvalConfig {
    fn default() -> Self {
        Self { pool: None, seed: 0, k: 10, tie: TieBreak::TokenId }
    }
}

/// One PK-side row and the FK-side rows it is ranked against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinQuery {
    pub pk_row: usize,
    pub candidates: Vec<usize>,
    /// Positions in `candidates` of the rows that truly join.
    pub matches: Vec<usize>,
}

/// Table positions `(pk table, fk table)` of a foreign key.
pub fn join_tables(schema: &DatabaseSchema, fk: &ForeignKeyDef) -> Result<(usize, usize)> {
    match (schema.table_index(&fk.to_table), schema.table_index(&fk.from_table)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(EvalError::Config(alloc::format!("unknown foreign key {}", fk.label()))),
    }
}

/// Queries for every PK-side row (or `pk_rows`) with at least one match.
/// A sampled pool keeps all matches and fills up with distinct random
/// non-matching rows, drawn from a per-query RNG stream.
pub fn join_queries(
    schema: &DatabaseSchema,
    db: &EncodedDatabase,
    fk: &ForeignKeyDef,
    pk_rows: Option<&[usize]>,
    cfg: &JoinEvalConfig,
) -> Result<Vec<JoinQuery>> {
    let (from, to) = schema.fk_columns(fk).ok_or_else(|| EvalError::Config(alloc::format!("unknown foreign key {}", fk.label())))?;
    let (tt, ft) = join_tables(schema, fk)?;
    let n_fk = db.tables[ft].len();
    if n_fk == 0 || cfg.pool == Some(0) {
        return Err(EvalError::NoCandidates);
    }
    let by_key = db.key_index(ft, from);
    let all: Vec<usize> = (0..db.tables[tt].len()).collect();
    let mut out = Vec::new();
    for &i in pk_rows.unwrap_or(&all) {
        let Some(key) = db.tables[tt][i].token_of(to).filter(|t| t.id != UNK) else { continue };
        let Some(matched) = by_key.get(&key.id) else { continue };
        let q = match cfg.pool {
            Some(m) if m < n_fk => {
                let mut rng = stream(cfg.seed, i as u64);
                let others: Vec<usize> = (0..n_fk).filter(|j| matched.binary_search(j).is_err()).collect();
                let take = m.saturating_sub(matched.len()).min(others.len());
                let mut candidates: Vec<usize> = sample(&mut rng, others.len(), take).into_iter().map(|p| others[p]).collect();
                candidates.extend(matched.iter().copied());
                candidates.sort_unstable();
                let matches = matched.iter().map(|j| candidates.binary_search(j).expect("inserted")).collect();
                JoinQuery { pk_row: i, candidates, matches }
            }
            _ => JoinQuery { pk_row: i, candidates: (0..n_fk).collect(), matches: matched.clone() },
        };
        out.push(q);
    }
    Ok(out)
}

/// NSP logits of every candidate pair of a query, in candidate order.
pub fn join_scores<S: Real>(
    model: &TableEncoderModel<S>,
    db: &EncodedDatabase,
    tables: (usize, usize),
    q: &JoinQuery,
    chunk: usize,
) -> Result<Vec<f64>> {
    let first: &[Token] = &db.tables[tables.0][q.pk_row].tokens;
    let seqs: Vec<Vec<Token>> = q.candidates.iter().map(|&j| pair_tokens(first, &db.tables[tables.1][j].tokens)).collect();
    let mut scores = Vec::with_capacity(seqs.len());
    for c in seqs.chunks(chunk.max(1)) {
        let refs: Vec<&[Token]> = c.iter().map(Vec::as_slice).collect();
        scores.extend(model.score_pairs(&refs)?);
    }
    Ok(scores)
}

/// Rank of the best-ranked true match.
pub fn rank_join_query(id: usize, q: &JoinQuery, scores: &[f64], tie: TieBreak) -> Result<RankingResult> {
    let mut best: Option<(usize, usize)> = None;
    for &m in &q.matches {
        let r = rank_of(scores, m, tie)?;
        if best.is_none_or(|(b, _)| r < b) {
            best = Some((r, m));
        }
    }
    let (rank, m) = best.ok_or(EvalError::NoCandidates)?;
    Ok(RankingResult { instance: id, true_id: q.candidates[m] as u32, rank, pool: q.candidates.len() })
}

pub fn evaluate_join_prediction<S: Real>(
    model: &TableEncoderModel<S>,
    schema: &DatabaseSchema,
    db: &EncodedDatabase,
    fk: &ForeignKeyDef,
    pk_rows: Option<&[usize]>,
    cfg: &JoinEvalConfig,
) -> Result<(MetricsReport, Vec<RankingResult>)> {
    let tables = join_tables(schema, fk)?;
    let queries = join_queries(schema, db, fk, pk_rows, cfg)?;
    let results = queries
        .iter()
        .enumerate()
        .map(|(i, q)| rank_join_query(i, q, &join_scores(model, db, tables, q, 64)?, cfg.tie))
        .collect::<Result<Vec<_>>>()?;
    Ok((compute_metrics(&results, cfg.k)?, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_metrics() {
        let rs: Vec<RankingResult> =
            [1, 2, 4].iter().map(|&r| RankingResult { instance: 0, true_id: 0, rank: r, pool: 10 }).collect();
        let m = compute_metrics(&rs, 10).unwrap();
        assert_eq!(m.hits_at_k, 1.0);
        assert!((m.mean_rank - 7.0 / 3.0).abs() < 1e-15);
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(compute_metrics(&[], 10), Err(EvalError::EmptyResults));
    }

    #[test]
    fn ties() {
        let s = [0.5; 10];
        assert_eq!(rank_of(&s, 0, TieBreak::TokenId).unwrap(), 1);
        assert_eq!(rank_of(&s, 9, TieBreak::TokenId).unwrap(), 10);
        assert_eq!(rank_of(&s, 4, TieBreak::Optimistic).unwrap(), 1);
        assert_eq!(rank_of(&s, 4, TieBreak::Pessimistic).unwrap(), 10);
        assert!(matches!(rank_of(&s, 10, TieBreak::TokenId), Err(EvalError::Index { .. })));
    }

    #[test]
    fn random_mrr_values() {
        assert_eq!(random_mrr(1), 1.0);
        assert!((random_mrr(2) - 0.75).abs() < 1e-15);
        assert_eq!(random_rr_std(1), 0.0);
    }
}
