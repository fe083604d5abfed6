//! The table autocompletion task: predict one column of a table from the
//! row and the rows it references.
//!
//! An instance is split into two sequences. The first holds the target row
//! (target cell masked) followed by every row it references through its
//! other foreign keys. The second holds the row referenced by the target
//! column itself, minus its key cell. A table without FKs yields first-only
//! instances.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{pair_tokens, split_grouped, CorpusError, EncodedDatabase, Sentence, SplitAssignment, Token};
use crate::rng::seeded;
use crate::schema::{ColumnId, DatabaseSchema};
use crate::vocab::UNK;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("unknown target column {table}.{column}")]
    UnknownColumn { table: String, column: String },
}

/// A one-hop FK reference: `fk_column` of the task table points at the key
/// `pk` of `table`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub fk_column: ColumnId,
    pub table: usize,
    pub pk: ColumnId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutocompletionTask {
    pub table: usize,
    pub column: ColumnId,
    pub hops: Vec<Hop>,
    pub second: Option<Hop>,
}

/// Rows of the task table held out of every training corpus.
pub type HeldOut = BTreeSet<(usize, usize)>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub row: usize,
    /// Unmasked first sequence; the target sits at `position`.
    pub first: Vec<Token>,
    pub position: usize,
    pub target: Token,
    pub second: Option<Vec<Token>>,
}

impl TaskInstance {
    pub fn masked_first(&self) -> Vec<Token> {
        let mut f = self.first.clone();
        f[self.position] = Token::mask(self.target.column);
        f
    }

    /// Model input and mask position, with the instance's own second sequence.
    pub fn tokens(&self) -> (Vec<Token>, usize) {
        match &self.second {
            Some(s) => self.tokens_with(s),
            None => (self.masked_first(), self.position),
        }
    }

    /// Model input pairing the masked first sequence with `second`.
    pub fn tokens_with(&self, second: &[Token]) -> (Vec<Token>, usize) {
        (pair_tokens(&self.masked_first(), second), self.position + 1)
    }

    /// Every known entity except the target (baseline ranking context).
    pub fn context(&self) -> Vec<Token> {
        self.first
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != self.position)
            .map(|(_, t)| *t)
            .chain(self.second.iter().flatten().copied())
            .filter(|t| t.id != UNK)
            .collect()
    }
}

/// First row per key value, for the tables a task references.
#[derive(Debug, Clone, Default)]
pub struct KeyIndex {
    maps: BTreeMap<ColumnId, BTreeMap<u32, usize>>,
}

impl KeyIndex {
    pub fn get(&self, pk: ColumnId, key: u32) -> Option<usize> {
        self.maps.get(&pk)?.get(&key).copied()
    }
}

impl AutocompletionTask {
    pub fn new(schema: &DatabaseSchema, table: &str, column: &str) -> Result<Self, TaskError> {
        let unknown = || TaskError::UnknownColumn { table: table.into(), column: column.into() };
        let t = schema.table_index(table).ok_or_else(unknown)?;
        let target = schema.column_id(table, column).ok_or_else(unknown)?;
        let mut hops = Vec::new();
        let mut second = None;
        let mut seen = BTreeSet::new();
        for fk in schema.join_compatible_pairs() {
            if fk.from_table != table || fk.to_table == table {
                continue;
            }
            let Some((from, to)) = schema.fk_columns(&fk) else { continue };
            let Some(to_t) = schema.table_index(&fk.to_table) else { continue };
            let hop = Hop { fk_column: from, table: to_t, pk: to };
            if from == target {
                second.get_or_insert(hop);
            } else if seen.insert(from) {
                hops.push(hop);
            }
        }
        Ok(Self { table: t, column: target, hops, second })
    }

    /// Target token per row of the task table; `None` for null/unknown cells.
    pub fn group_keys(&self, db: &EncodedDatabase) -> Vec<Option<u32>> {
        db.tables[self.table]
            .iter()
            .map(|s| s.token_of(self.column).map(|t| t.id).filter(|&id| id != UNK))
            .collect()
    }

    /// Grouped 70/15/15-style split of the task table's rows by target value.
    pub fn split(&self, db: &EncodedDatabase, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment, CorpusError> {
        split_grouped(&self.group_keys(db), ratios, &mut seeded(seed))
    }

    pub fn held_out(&self, split: &SplitAssignment) -> HeldOut {
        split.valid().into_iter().chain(split.test()).map(|r| (self.table, r)).collect()
    }

    pub fn key_index(&self, db: &EncodedDatabase) -> KeyIndex {
        let mut maps = BTreeMap::new();
        for hop in self.hops.iter().chain(self.second.iter()) {
            maps.entry(hop.pk).or_insert_with(|| {
                db.key_index(hop.table, hop.pk).into_iter().map(|(k, rows)| (k, rows[0])).collect()
            });
        }
        KeyIndex { maps }
    }

    /// The referenced row without its key cell; `None` if dangling or empty.
    fn referenced(&self, db: &EncodedDatabase, index: &KeyIndex, hop: &Hop, key: u32) -> Option<Vec<Token>> {
        let r = index.get(hop.pk, key)?;
        let toks = db.tables[hop.table][r].without(hop.pk).tokens;
        (!toks.is_empty()).then_some(toks)
    }

    /// `None` when the target cell is null or unknown.
    pub fn instance(&self, db: &EncodedDatabase, index: &KeyIndex, row: usize) -> Option<TaskInstance> {
        let s = &db.tables[self.table][row];
        let position = s.position_of(self.column)?;
        let target = s.tokens[position];
        if target.id == UNK {
            return None;
        }
        let mut first = s.tokens.clone();
        for hop in &self.hops {
            let Some(key) = s.token_of(hop.fk_column).filter(|t| t.id != UNK) else { continue };
            if let Some(toks) = self.referenced(db, index, hop, key.id) {
                first.extend(toks);
            }
        }
        let second = self.second.as_ref().and_then(|hop| self.referenced(db, index, hop, target.id));
        Some(TaskInstance { row, first, position, target, second })
    }

    /// Masked first sequence for any row of the task table, whatever its
    /// target cell holds, and the mask position. There is no second sequence
    /// since it would come from the unknown target.
    pub fn query(&self, db: &EncodedDatabase, index: &KeyIndex, row: &Sentence) -> Option<(Vec<Token>, usize)> {
        let position = row.position_of(self.column)?;
        let mut first = row.tokens.clone();
        first[position] = Token::mask(self.column);
        for hop in &self.hops {
            let Some(key) = row.token_of(hop.fk_column).filter(|t| t.id != UNK) else { continue };
            if let Some(toks) = self.referenced(db, index, hop, key.id) {
                first.extend(toks);
            }
        }
        Some((first, position))
    }

    pub fn instances(&self, db: &EncodedDatabase, rows: &[usize]) -> Vec<TaskInstance> {
        let index = self.key_index(db);
        rows.iter().filter_map(|&r| self.instance(db, &index, r)).collect()
    }

    /// Candidate second sequences `(key, tokens)` for negative sampling.
    pub fn second_pool(&self, db: &EncodedDatabase) -> Vec<(u32, Vec<Token>)> {
        let Some(hop) = self.second else { return Vec::new() };
        db.tables[hop.table]
            .iter()
            .filter_map(|s| {
                let key = s.token_of(hop.pk)?.id;
                let toks = s.without(hop.pk).tokens;
                (key != UNK && !toks.is_empty()).then_some((key, toks))
            })
            .collect()
    }
}
