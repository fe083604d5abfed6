//! Training instances: row sentences, masked sentences, FK-PK sentence pairs
//! with sampled negatives, and grouped train/valid/test splits.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ColumnId, DatabaseSchema, ForeignKeyDef, SPECIAL_COLUMN};
use crate::vocab::{encode_row, RowRecord, VocabularySet, MASK, UNK};

/// Ids in the shared special space (used by sentence pairs only).
pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const SPECIAL_PAD: u32 = 2;
pub const SPECIAL_TOKEN_NAMES: [&str; 3] = ["[CLS]", "[SEP]", "[PAD]"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("negative sampling needs at least 2 distinct key values, found {0}")]
    InsufficientRows(usize),
    #[error("no maskable position in sentence")]
    NoMaskablePosition,
    #[error("negative count must be at least 1")]
    ZeroNegatives,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub column: ColumnId,
}

impl Token {
    pub const CLS: Token = Token { id: CLS, column: SPECIAL_COLUMN };
    pub const SEP: Token = Token { id: SEP, column: SPECIAL_COLUMN };
    pub const PAD: Token = Token { id: SPECIAL_PAD, column: SPECIAL_COLUMN };

    pub fn new(id: u32, column: ColumnId) -> Self {
        Self { id, column }
    }

    pub fn mask(column: ColumnId) -> Self {
        Self { id: MASK, column }
    }

    pub fn is_special(self) -> bool {
        self.column.is_special()
    }
}

/// A tokenized row; `table`/`row` identify its source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub table: usize,
    pub row: usize,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position_of(&self, col: ColumnId) -> Option<usize> {
        self.tokens.iter().position(|t| t.column == col)
    }

    pub fn token_of(&self, col: ColumnId) -> Option<Token> {
        self.tokens.iter().copied().find(|t| t.column == col)
    }

    /// Copy without the cell of `col`.
    pub fn without(&self, col: ColumnId) -> Sentence {
        Sentence {
            tokens: self.tokens.iter().copied().filter(|t| t.column != col).collect(),
            table: self.table,
            row: self.row,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSentence {
    pub base: Sentence,
    pub mask_position: usize,
    pub target: Token,
}

impl MaskedSentence {
    pub fn restore(&self) -> Sentence {
        let mut s = self.base.clone();
        s.tokens[self.mask_position] = self.target;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub first: Sentence,
    pub second: Sentence,
    pub positive: bool,
    /// Key token ids on the first and second side.
    pub join_key: (u32, u32),
}

/// `[CLS] first [SEP] second [SEP]`
pub fn pair_tokens(first: &[Token], second: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(first.len() + second.len() + 3);
    out.push(Token::CLS);
    out.extend_from_slice(first);
    out.push(Token::SEP);
    out.extend_from_slice(second);
    out.push(Token::SEP);
    out
}

impl SentencePair {
    pub fn tokens(&self) -> Vec<Token> {
        pair_tokens(&self.first.tokens, &self.second.tokens)
    }
}

/// A model input with optional MLM target and NSP label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<Token>,
    /// `(position, true token)` of the masked cell the loss is scored on.
    pub target: Option<(usize, Token)>,
    pub nsp: Option<bool>,
}

impl Example {
    pub fn mlm(m: MaskedSentence) -> Self {
        Self { tokens: m.base.tokens, target: Some((m.mask_position, m.target)), nsp: None }
    }
}

/// Every row of a database encoded once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDatabase {
    pub tables: Vec<Vec<Sentence>>,
}

impl EncodedDatabase {
    pub fn encode(schema: &DatabaseSchema, vocabs: &VocabularySet, rows: &[Vec<RowRecord>]) -> Self {
        let tables = (0..schema.tables.len())
            .map(|t| rows.get(t).map_or_else(Vec::new, |r| row_sentences(schema, vocabs, r)))
            .collect();
        Self { tables }
    }

    /// Key token id → row positions in table `t` for column `col`.
    pub fn key_index(&self, t: usize, col: ColumnId) -> BTreeMap<u32, Vec<usize>> {
        let mut index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.tables[t].iter().enumerate() {
            if let Some(tok) = s.token_of(col) {
                if tok.id != UNK {
                    index.entry(tok.id).or_default().push(i);
                }
            }
        }
        index
    }

    pub fn num_rows(&self) -> usize {
        self.tables.iter().map(Vec::len).sum()
    }
}

pub fn row_sentences(schema: &DatabaseSchema, vocabs: &VocabularySet, rows: &[RowRecord]) -> Vec<Sentence> {
    rows.iter().filter_map(|r| encode_row(schema, vocabs, r)).collect()
}

/// Positive pairs for `fk`: `first` is the referenced (PK-side) row and
/// `second` the referencing (FK-side) row. Ordered by first row, then
/// second row; null or unknown keys never join.
pub fn materialize_join_sentences(
    schema: &DatabaseSchema,
    fk: &ForeignKeyDef,
    pk_rows: &[Sentence],
    fk_rows: &[Sentence],
) -> Vec<SentencePair> {
    let Some((from, to)) = schema.fk_columns(fk) else { return Vec::new() };
    let mut by_key: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, s) in fk_rows.iter().enumerate() {
        if let Some(t) = s.token_of(from).filter(|t| t.id != UNK) {
            by_key.entry(t.id).or_default().push(j);
        }
    }
    let mut out = Vec::new();
    for a in pk_rows {
        let Some(key) = a.token_of(to).filter(|t| t.id != UNK) else { continue };
        for &j in by_key.get(&key.id).map(Vec::as_slice).unwrap_or(&[]) {
            out.push(SentencePair { first: a.clone(), second: fk_rows[j].clone(), positive: true, join_key: (key.id, key.id) });
        }
    }
    out
}

/// Uniform draws over a pool of keyed items, excluding one key per draw.
///
/// Items are ordered by `(key, index)`, so the items sharing the excluded
/// key form one contiguous block that a draw simply skips over.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    sorted: Vec<usize>,
    blocks: BTreeMap<u32, (usize, usize)>,
}

impl NegativeSampler {
    pub fn new(keys: &[u32]) -> Result<Self, CorpusError> {
        let mut sorted: Vec<usize> = (0..keys.len()).collect();
        sorted.sort_by_key(|&i| (keys[i], i));
        let mut blocks = BTreeMap::new();
        let mut start = 0;
        while start < sorted.len() {
            let k = keys[sorted[start]];
            let mut end = start;
            while end < sorted.len() && keys[sorted[end]] == k {
                end += 1;
            }
            blocks.insert(k, (start, end - start));
            start = end;
        }
        if blocks.len() < 2 {
            return Err(CorpusError::InsufficientRows(blocks.len()));
        }
        Ok(Self { sorted, blocks })
    }

    /// Pool index of an item whose key differs from `exclude`.
    pub fn draw<R: Rng + ?Sized>(&self, exclude: u32, rng: &mut R) -> usize {
        let (start, len) = self.blocks.get(&exclude).copied().unwrap_or((self.sorted.len(), 0));
        let r = rng.random_range(0..self.sorted.len() - len);
        if r < start {
            self.sorted[r]
        } else {
            self.sorted[r + len]
        }
    }
}

/// For each positive pair, `k` negatives that keep `first` and replace
/// `second` with a uniformly drawn pool row whose key (the token of
/// `key_column`) differs from the positive's. Output: each positive
/// followed by its negatives.
pub fn sample_negatives<R: Rng + ?Sized>(
    pairs: &[SentencePair],
    pool: &[Sentence],
    key_column: ColumnId,
    k: usize,
    rng: &mut R,
) -> Result<Vec<SentencePair>, CorpusError> {
    if k == 0 {
        return Err(CorpusError::ZeroNegatives);
    }
    let keys: Vec<u32> = pool.iter().map(|s| s.token_of(key_column).map_or(UNK, |t| t.id)).collect();
    let sampler = NegativeSampler::new(&keys)?;
    let mut out = Vec::with_capacity(pairs.len() * (k + 1));
    for p in pairs {
        out.push(p.clone());
        for _ in 0..k {
            let j = sampler.draw(p.join_key.1, rng);
            out.push(SentencePair {
                first: p.first.clone(),
                second: pool[j].clone(),
                positive: false,
                join_key: (p.join_key.0, keys[j]),
            });
        }
    }
    Ok(out)
}

/// Replaces one uniformly chosen maskable position with its column's
/// `[MASK]`. Specials and `[UNK]` cells are never maskable.
pub fn mask_tokens<R: Rng + ?Sized>(
    tokens: &[Token],
    maskable: impl Fn(ColumnId) -> bool,
    rng: &mut R,
) -> Result<(Vec<Token>, usize, Token), CorpusError> {
    let candidates: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_special() && t.id != UNK && t.id != MASK && maskable(t.column))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(CorpusError::NoMaskablePosition);
    }
    let pos = candidates[rng.random_range(0..candidates.len())];
    let mut out = tokens.to_vec();
    let target = out[pos];
    out[pos] = Token::mask(target.column);
    Ok((out, pos, target))
}

pub fn apply_mask<R: Rng + ?Sized>(
    sentence: &Sentence,
    maskable: impl Fn(ColumnId) -> bool,
    rng: &mut R,
) -> Result<MaskedSentence, CorpusError> {
    let (tokens, mask_position, target) = mask_tokens(&sentence.tokens, maskable, rng)?;
    Ok(MaskedSentence { base: Sentence { tokens, ..sentence.clone() }, mask_position, target })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-group partition of row ids, keyed by the group's token id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub groups: BTreeMap<u32, GroupSplit>,
}

impl SplitAssignment {
    fn collect(&self, f: impl Fn(&GroupSplit) -> &Vec<usize>) -> Vec<usize> {
        let mut v: Vec<usize> = self.groups.values().flat_map(|g| f(g).iter().copied()).collect();
        v.sort_unstable();
        v
    }

    pub fn train(&self) -> Vec<usize> {
        self.collect(|g| &g.train)
    }

    pub fn valid(&self) -> Vec<usize> {
        self.collect(|g| &g.valid)
    }

    pub fn test(&self) -> Vec<usize> {
        self.collect(|g| &g.test)
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

/// Largest-remainder apportionment of `n` items by `ratios`; remainder
/// ties go to the earlier bucket.
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: [f64; 3] = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|x| libm::floor(x + 1e-9) as usize);
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - counts[a] as f64, exact[b] - counts[b] as f64);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Splits row ids `0..group_keys.len()` within each group. Rows whose key
/// is `None` are not assigned. Groups with fewer than 3 rows go to train.
pub fn split_grouped<R: Rng + ?Sized>(
    group_keys: &[Option<u32>],
    ratios: [f64; 3],
    rng: &mut R,
) -> Result<SplitAssignment, CorpusError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || libm::fabs(ratios.iter().sum::<f64>() - 1.0) > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, k) in group_keys.iter().enumerate() {
        if let Some(k) = k {
            members.entry(*k).or_default().push(i);
        }
    }
    let mut out = SplitAssignment::default();
    for (key, mut rows) in members {
        let split = if rows.len() < 3 {
            GroupSplit { train: rows, ..Default::default() }
        } else {
            rows.shuffle(rng);
            let [a, b, _] = largest_remainder(rows.len(), ratios);
            let test = rows.split_off(a + b);
            let valid = rows.split_off(a);
            GroupSplit { train: rows, valid, test }
        };
        out.groups.insert(key, split);
    }
    Ok(out)
}

/// Multi-row context: the token slices laid end to end.
pub fn concat_tokens<'a>(parts: impl IntoIterator<Item = &'a [Token]>) -> Vec<Token> {
    let mut out = vec![];
    for p in parts {
        out.extend_from_slice(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sent(table: usize, row: usize, toks: &[(u32, u32)]) -> Sentence {
        Sentence { tokens: toks.iter().map(|&(id, c)| Token::new(id, ColumnId(c))).collect(), table, row }
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(20, DEFAULT_RATIOS), [14, 3, 3]);
        assert_eq!(largest_remainder(7, DEFAULT_RATIOS), [5, 1, 1]);
        assert_eq!(largest_remainder(3, DEFAULT_RATIOS), [2, 1, 0]);
        assert_eq!(largest_remainder(10, DEFAULT_RATIOS), [7, 2, 1]);
    }

    #[test]
    fn small_groups_go_to_train() {
        let keys = [Some(1), Some(2), Some(2), None];
        let s = split_grouped(&keys, DEFAULT_RATIOS, &mut seeded(0)).unwrap();
        assert_eq!(s.train(), vec![0, 1, 2]);
        assert!(s.valid().is_empty() && s.test().is_empty());
    }

    #[test]
    fn mask_only_hits_allowed_columns() {
        let s = sent(0, 0, &[(3, 0), (4, 1), (5, 2), (6, 3), (7, 4)]);
        let mut rng = seeded(1);
        for _ in 0..50 {
            let m = apply_mask(&s, |c| c == ColumnId(1), &mut rng).unwrap();
            assert_eq!(m.mask_position, 1);
            assert_eq!(m.target, Token::new(4, ColumnId(1)));
            assert_eq!(m.restore(), s);
        }
        assert_eq!(apply_mask(&s, |_| false, &mut rng), Err(CorpusError::NoMaskablePosition));
        let unk = sent(0, 0, &[(UNK, 0)]);
        assert_eq!(apply_mask(&unk, |_| true, &mut rng), Err(CorpusError::NoMaskablePosition));
    }

    #[test]
    fn two_row_pool_forces_the_other_row() {
        let pool = vec![sent(1, 0, &[(3, 9)]), sent(1, 1, &[(4, 9)])];
        let pos = SentencePair { first: sent(0, 0, &[(3, 8)]), second: pool[0].clone(), positive: true, join_key: (3, 3) };
        let out = sample_negatives(&[pos], &pool, ColumnId(9), 1, &mut seeded(2)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].second, pool[1]);
        assert!(!out[1].positive);
        let one = vec![pool[0].clone(), pool[0].clone()];
        assert!(matches!(
            sample_negatives(&out[..1], &one, ColumnId(9), 1, &mut seeded(2)),
            Err(CorpusError::InsufficientRows(1))
        ));
    }

    #[test]
    fn pair_layout() {
        let a = [Token::new(3, ColumnId(0))];
        let b = [Token::new(4, ColumnId(1)), Token::new(5, ColumnId(2))];
        let p = pair_tokens(&a, &b);
        assert_eq!(p, vec![Token::CLS, a[0], Token::SEP, b[0], b[1], Token::SEP]);
    }
}
