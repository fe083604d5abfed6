//! Row records, cleaning rules and per-column vocabularies.
//!
//! Each column is its own latent space: the same string in two columns is two
//! different entities. The exception is an FK column, which shares the space
//! of the primary key it references (an FK value *is* that key's entity).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sentence, Token};
use crate::schema::{ColumnId, ColumnRole, DTypeHint, DatabaseSchema};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
/// Ids below this are reserved in every vocabulary.
pub const NUM_SPECIAL: u32 = 3;
pub const SPECIAL_NAMES: [&str; 3] = ["[PAD]", "[MASK]", "[UNK]"];

/// Upper bound on equal-width buckets for numeric columns.
pub const MAX_NUMERIC_BINS: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("cleaning rule references unknown column {table}.{column}")]
    UnknownColumn { table: String, column: String },
    #[error("numeric binning needs between 1 and {MAX_NUMERIC_BINS} buckets, got {0}")]
    BadBinCount(usize),
}

/// One data row. `None` is the null sentinel (empty CSV cell).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRecord {
    pub table: String,
    pub cells: Vec<Option<String>>,
    pub row_index: usize,
}

impl RowRecord {
    pub fn cell(&self, c: usize) -> Option<&str> {
        self.cells.get(c).and_then(Option::as_deref)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CleaningRule {
    /// Drop rows whose entity in `column` occurs in fewer than `min_count` rows.
    MinEntityFrequency { table: String, column: String, min_count: usize },
    /// Drop rows whose `column` equals `value`.
    DropValue { table: String, column: String, value: String },
    /// Drop every row of a `column` group holding more than `max_size` rows.
    MaxGroupSize { table: String, column: String, max_size: usize },
}

impl CleaningRule {
    pub fn target(&self) -> (&str, &str) {
        match self {
            Self::MinEntityFrequency { table, column, .. }
            | Self::DropValue { table, column, .. }
            | Self::MaxGroupSize { table, column, .. } => (table, column),
        }
    }
}

pub fn validate_rules(schema: &DatabaseSchema, rules: &[CleaningRule]) -> Result<(), VocabError> {
    for r in rules {
        let (t, c) = r.target();
        if schema.column_id(t, c).is_none() {
            return Err(VocabError::UnknownColumn { table: t.into(), column: c.into() });
        }
    }
    Ok(())
}

fn group_counts<'a>(rows: &'a [RowRecord], c: usize) -> BTreeMap<Option<&'a str>, usize> {
    let mut counts = BTreeMap::new();
    for r in rows {
        *counts.entry(r.cell(c)).or_insert(0) += 1;
    }
    counts
}

/// Applies the rules of `rows`' table in order. Each rule is a single
/// deterministic pass over the rows that reach it; frequencies are not
/// iterated to a fixpoint.
pub fn apply_cleaning_rules(schema: &DatabaseSchema, rows: Vec<RowRecord>, rules: &[CleaningRule]) -> Vec<RowRecord> {
    let Some(table_name) = rows.first().map(|r| r.table.clone()) else {
        return rows;
    };
    let Some(table) = schema.table(&table_name) else { return rows };
    let mut rows = rows;
    for rule in rules {
        let (t, col) = rule.target();
        if t != table_name {
            continue;
        }
        let Some(c) = table.column_index(col) else { continue };
        rows = match rule {
            CleaningRule::DropValue { value, .. } => {
                rows.into_iter().filter(|r| r.cell(c) != Some(value.as_str())).collect()
            }
            CleaningRule::MinEntityFrequency { min_count, .. } => {
                let keep: Vec<bool> = {
                    let counts = group_counts(&rows, c);
                    rows.iter()
                        .map(|r| r.cell(c).is_none() || counts[&r.cell(c)] >= *min_count)
                        .collect()
                };
                rows.into_iter().zip(keep).filter_map(|(r, k)| k.then_some(r)).collect()
            }
            CleaningRule::MaxGroupSize { max_size, .. } => {
                let keep: Vec<bool> = {
                    let counts = group_counts(&rows, c);
                    rows.iter().map(|r| r.cell(c).is_none() || counts[&r.cell(c)] <= *max_size).collect()
                };
                rows.into_iter().zip(keep).filter_map(|(r, k)| k.then_some(r)).collect()
            }
        };
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpaceId(pub u32);

impl SpaceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Bijection between cell strings and dense token ids for one latent space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub space: SpaceId,
    /// Column whose name identifies the space (the primary key when the
    /// space is shared through FK links).
    pub canonical: ColumnId,
    pub columns: Vec<ColumnId>,
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(space: SpaceId, canonical: ColumnId, columns: Vec<ColumnId>, entities: Vec<String>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(entities);
        let mut v = Self { space, canonical, columns, tokens, index: BTreeMap::new() };
        v.reindex();
        v
    }

    /// Rebuilds the reverse index (needed after deserialization).
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .skip(NUM_SPECIAL as usize)
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
    }

    /// Size including the reserved specials.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_entities() == 0
    }

    pub fn num_entities(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL as usize
    }

    pub fn lookup(&self, s: &str) -> Option<u32> {
        self.index.get(s).copied()
    }

    /// Out-of-vocabulary strings map to `[UNK]`.
    pub fn encode(&self, s: &str) -> u32 {
        self.lookup(s).unwrap_or(UNK)
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn entity_ids(&self) -> core::ops::Range<u32> {
        NUM_SPECIAL..self.tokens.len() as u32
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Equal-width buckets over the observed numeric range of a column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binner {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
}

impl Binner {
    pub fn fit<'a>(values: impl Iterator<Item = &'a str>, bins: usize) -> Option<Self> {
        let nums: Vec<f64> = values.filter_map(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite()).collect();
        let min = nums.iter().copied().fold(f64::INFINITY, f64::min);
        let max = nums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (!nums.is_empty()).then_some(Self { min, max, bins })
    }

    /// Bucket label for a numeric string; non-numeric strings pass through.
    pub fn apply(&self, raw: &str) -> String {
        match raw.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => {
                let width = self.max - self.min;
                let b = if width <= 0.0 {
                    0
                } else {
                    (((v - self.min) / width * self.bins as f64) as usize).min(self.bins - 1)
                };
                format!("bin:{}", b)
            }
            _ => raw.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VocabOptions {
    /// Bucket count for `numeric` columns; `None` keeps raw values.
    pub numeric_bins: Option<usize>,
}

/// All latent spaces of a database and the column → space map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularySet {
    pub spaces: Vec<Vocabulary>,
    pub column_space: Vec<SpaceId>,
    pub binners: Vec<Option<Binner>>,
}

impl VocabularySet {
    pub fn space_of(&self, col: ColumnId) -> SpaceId {
        self.column_space[col.index()]
    }

    pub fn for_column(&self, col: ColumnId) -> &Vocabulary {
        &self.spaces[self.space_of(col).index()]
    }

    fn normalize<'a>(&self, col: ColumnId, raw: &'a str) -> alloc::borrow::Cow<'a, str> {
        match &self.binners[col.index()] {
            Some(b) => alloc::borrow::Cow::Owned(b.apply(raw)),
            None => alloc::borrow::Cow::Borrowed(raw),
        }
    }

    pub fn encode_cell(&self, col: ColumnId, raw: Option<&str>) -> u32 {
        match raw {
            Some(v) => self.for_column(col).encode(&self.normalize(col, v)),
            None => UNK,
        }
    }

    pub fn decode(&self, tok: Token) -> Option<&str> {
        if tok.column.is_special() {
            return crate::corpus::SPECIAL_TOKEN_NAMES.get(tok.id as usize).copied();
        }
        self.for_column(tok.column).decode(tok.id)
    }

    /// Call after deserializing.
    pub fn reindex(&mut self) {
        self.spaces.iter_mut().for_each(Vocabulary::reindex);
    }
}

/// Groups columns into spaces: FK columns join the space of their target.
pub fn column_spaces(schema: &DatabaseSchema) -> Vec<Vec<ColumnId>> {
    let n = schema.num_columns();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for fk in &schema.foreign_keys {
        if let Some((a, b)) = schema.fk_columns(fk) {
            let (ra, rb) = (find(&mut parent, a.index()), find(&mut parent, b.index()));
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<ColumnId>> = BTreeMap::new();
    for c in 0..n {
        let r = find(&mut parent, c);
        groups.entry(r).or_default().push(ColumnId(c as u32));
    }
    groups.into_values().collect()
}

/// Builds one vocabulary per latent space. `tables[i]` holds the cleaned
/// rows of `schema.tables[i]`. Entity ids are assigned by descending
/// frequency, ties broken by the string, so ids are stable across runs.
pub fn build_vocabularies(
    schema: &DatabaseSchema,
    tables: &[Vec<RowRecord>],
    opts: &VocabOptions,
) -> Result<VocabularySet, VocabError> {
    if let Some(b) = opts.numeric_bins {
        if b == 0 || b > MAX_NUMERIC_BINS {
            return Err(VocabError::BadBinCount(b));
        }
    }
    let n = schema.num_columns();
    let mut binners: Vec<Option<Binner>> = vec![None; n];
    if let Some(bins) = opts.numeric_bins {
        for (t, table) in schema.tables.iter().enumerate() {
            let offset = schema.column_offset(t);
            for (c, def) in table.columns.iter().enumerate() {
                if def.dtype_hint == DTypeHint::Numeric && def.role == ColumnRole::Attribute {
                    let rows = tables.get(t).map(Vec::as_slice).unwrap_or(&[]);
                    binners[offset + c] = Binner::fit(rows.iter().filter_map(|r| r.cell(c)), bins);
                }
            }
        }
    }

    let groups = column_spaces(schema);
    let mut column_space = vec![SpaceId(0); n];
    let mut spaces = Vec::with_capacity(groups.len());
    for (s, members) in groups.into_iter().enumerate() {
        let space = SpaceId(s as u32);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for &col in &members {
            column_space[col.index()] = space;
            let Some((t, c)) = schema.locate(col) else { continue };
            for r in tables.get(t).map(Vec::as_slice).unwrap_or(&[]) {
                if let Some(v) = r.cell(c) {
                    let v = match &binners[col.index()] {
                        Some(b) => b.apply(v),
                        None => v.to_string(),
                    };
                    *counts.entry(v).or_insert(0) += 1;
                }
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let canonical = members
            .iter()
            .copied()
            .find(|&c| schema.column_def(c).is_some_and(|d| d.role == ColumnRole::PrimaryKey))
            .unwrap_or(members[0]);
        spaces.push(Vocabulary::from_tokens(
            space,
            canonical,
            members,
            entries.into_iter().map(|(s, _)| s).collect(),
        ));
    }
    Ok(VocabularySet { spaces, column_space, binners })
}

/// Encodes a row as `(token, column)` pairs in schema column order.
/// Null and out-of-vocabulary cells become `[UNK]`.
pub fn encode_row(schema: &DatabaseSchema, vocabs: &VocabularySet, record: &RowRecord) -> Option<Sentence> {
    let t = schema.table_index(&record.table)?;
    let tokens = schema
        .table_columns(t)
        .enumerate()
        .map(|(c, col)| Token { id: vocabs.encode_cell(col, record.cell(c)), column: col })
        .collect();
    Some(Sentence { tokens, table: t, row: record.row_index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ColumnDef, ForeignKeyDef, TableDef};

    fn rec(table: &str, i: usize, cells: &[&str]) -> RowRecord {
        RowRecord {
            table: table.into(),
            row_index: i,
            cells: cells.iter().map(|c| if c.is_empty() { None } else { Some(c.to_string()) }).collect(),
        }
    }

    fn movie_schema() -> DatabaseSchema {
        DatabaseSchema {
            tables: vec![
                TableDef {
                    name: "people".into(),
                    columns: vec![ColumnDef::new("id", ColumnRole::PrimaryKey)],
                },
                TableDef {
                    name: "movies".into(),
                    columns: vec![
                        ColumnDef::new("actor", ColumnRole::Attribute),
                        ColumnDef::new("director", ColumnRole::Attribute),
                        ColumnDef::new("title", ColumnRole::Attribute),
                        ColumnDef::new("character", ColumnRole::Attribute),
                        ColumnDef::new("year", ColumnRole::Attribute).with_hint(DTypeHint::Numeric),
                        ColumnDef::new("producer", ColumnRole::ForeignKey),
                    ],
                },
            ],
            foreign_keys: vec![ForeignKeyDef::new("movies", "producer", "people", "id")],
        }
    }

    #[test]
    fn same_string_in_two_columns_is_two_entities() {
        let s = movie_schema();
        let rows = vec![
            vec![rec("people", 0, &["p1"])],
            vec![
                rec("movies", 0, &["Clint Eastwood", "Clint Eastwood", "Unforgiven", "Munny", "1992", "p1"]),
                rec("movies", 1, &["Morgan Freeman", "Clint Eastwood", "Unforgiven", "Ned", "1992", ""]),
            ],
        ];
        let v = build_vocabularies(&s, &rows, &VocabOptions::default()).unwrap();
        let actor = s.column_id("movies", "actor").unwrap();
        let director = s.column_id("movies", "director").unwrap();
        assert_ne!(v.space_of(actor), v.space_of(director));
        assert!(v.for_column(actor).lookup("Clint Eastwood").is_some());
        assert!(v.for_column(director).lookup("Clint Eastwood").is_some());
        // FK shares the space of its PK.
        let producer = s.column_id("movies", "producer").unwrap();
        let pid = s.column_id("people", "id").unwrap();
        assert_eq!(v.space_of(producer), v.space_of(pid));
        assert_eq!(v.for_column(producer).canonical, pid);
    }

    #[test]
    fn ids_follow_frequency_then_string() {
        let s = movie_schema();
        let movies: Vec<_> = ["b", "a", "c", "a", "b", "a"]
            .iter()
            .enumerate()
            .map(|(i, d)| rec("movies", i, &["x", d, "t", "r", "2000", ""]))
            .collect();
        let v = build_vocabularies(&s, &[vec![], movies], &VocabOptions::default()).unwrap();
        let dv = v.for_column(s.column_id("movies", "director").unwrap());
        assert_eq!(dv.tokens()[3..], ["a".to_string(), "b".into(), "c".into()]);
        assert_eq!(dv.len(), 6);
        for id in dv.entity_ids() {
            assert_eq!(dv.encode(dv.decode(id).unwrap()), id);
        }
    }

    #[test]
    fn single_value_column_has_four_ids() {
        let s = movie_schema();
        let movies = vec![rec("movies", 0, &["a", "d", "t", "r", "1", ""]), rec("movies", 1, &["b", "d", "t", "r", "1", ""])];
        let v = build_vocabularies(&s, &[vec![], movies], &VocabOptions::default()).unwrap();
        assert_eq!(v.for_column(s.column_id("movies", "director").unwrap()).len(), 4);
    }

    #[test]
    fn encode_row_keeps_order_and_maps_nulls_to_unk() {
        let s = movie_schema();
        let movies = vec![rec("movies", 0, &["Matt Damon", "Christopher Nolan", "Interstellar", "Mann", "2014", ""])];
        let v = build_vocabularies(&s, &[vec![], movies.clone()], &VocabOptions::default()).unwrap();
        let sent = encode_row(&s, &v, &movies[0]).unwrap();
        assert_eq!(sent.tokens.len(), 6);
        let cols: Vec<_> = sent.tokens.iter().map(|t| t.column).collect();
        assert_eq!(cols, s.table_columns(1).collect::<Vec<_>>());
        assert_eq!(sent.tokens[5].id, UNK);
        let decoded: Vec<_> = sent.tokens[..5].iter().map(|t| v.decode(*t).unwrap()).collect();
        assert_eq!(decoded, ["Matt Damon", "Christopher Nolan", "Interstellar", "Mann", "2014"]);

        let empty = rec("movies", 1, &["", "", "", "", "", ""]);
        assert!(encode_row(&s, &v, &empty).unwrap().tokens.iter().all(|t| t.id == UNK));
        let unseen = rec("movies", 2, &["Nobody", "", "", "", "", ""]);
        assert_eq!(encode_row(&s, &v, &unseen).unwrap().tokens[0].id, UNK);
    }

    #[test]
    fn numeric_binning_is_bounded() {
        let s = movie_schema();
        let movies: Vec<_> = (0..300).map(|i| rec("movies", i, &["a", "d", "t", "r", &format!("{}", 1900 + i), ""])).collect();
        let v = build_vocabularies(&s, &[vec![], movies], &VocabOptions { numeric_bins: Some(10) }).unwrap();
        let year = s.column_id("movies", "year").unwrap();
        assert_eq!(v.for_column(year).num_entities(), 10);
        assert_eq!(v.encode_cell(year, Some("1900")), v.for_column(year).encode("bin:0"));
        assert_eq!(v.encode_cell(year, Some("2199")), v.for_column(year).encode("bin:9"));
        assert!(build_vocabularies(&s, &[], &VocabOptions { numeric_bins: Some(129) }).is_err());
    }

    #[test]
    fn drop_value_removes_matching_rows() {
        let s = movie_schema();
        let rows = vec![
            rec("movies", 0, &["a", "d", "t", "NONE", "1", ""]),
            rec("movies", 1, &["a", "d", "t", "5", "1", ""]),
        ];
        let rule = CleaningRule::DropValue { table: "movies".into(), column: "character".into(), value: "NONE".into() };
        let out = apply_cleaning_rules(&s, rows, &[rule.clone()]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].row_index, 1);
        assert_eq!(apply_cleaning_rules(&s, out.clone(), &[rule]), out);
    }

    #[test]
    fn min_frequency_matches_count_oracle() {
        let s = movie_schema();
        let directors = ["d", "d", "d", "e", "e", "e", "e", "e", "f"];
        let rows: Vec<_> = directors.iter().enumerate().map(|(i, d)| rec("movies", i, &["a", d, "t", "r", "1", ""])).collect();
        let rule = CleaningRule::MinEntityFrequency { table: "movies".into(), column: "director".into(), min_count: 5 };
        let out = apply_cleaning_rules(&s, rows.clone(), &[rule]);
        let expected: Vec<_> =
            rows.iter().filter(|r| directors.iter().filter(|&&d| Some(d) == r.cell(1)).count() >= 5).cloned().collect();
        assert_eq!(out, expected);
        assert!(out.iter().all(|r| r.cell(1) == Some("e")));

        let identity = CleaningRule::MinEntityFrequency { table: "movies".into(), column: "director".into(), min_count: 1 };
        assert_eq!(apply_cleaning_rules(&s, rows.clone(), &[identity]), rows);
    }

    #[test]
    fn max_group_size_drops_large_groups_and_is_idempotent() {
        let s = movie_schema();
        let rows: Vec<_> = ["p", "p", "p", "q"].iter().enumerate().map(|(i, d)| rec("movies", i, &[d, "d", "t", "r", "1", ""])).collect();
        let rule = CleaningRule::MaxGroupSize { table: "movies".into(), column: "actor".into(), max_size: 2 };
        let out = apply_cleaning_rules(&s, rows, &[rule.clone()]);
        assert_eq!(out.len(), 1);
        assert_eq!(apply_cleaning_rules(&s, out.clone(), &[rule]), out);
    }

    #[test]
    fn rules_for_unknown_columns_are_rejected() {
        let s = movie_schema();
        let bad = CleaningRule::DropValue { table: "movies".into(), column: "nope".into(), value: "x".into() };
        assert!(validate_rules(&s, &[bad]).is_err());
    }
}
