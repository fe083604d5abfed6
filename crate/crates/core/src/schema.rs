//! Relational schema: tables, typed columns and single-column FK-PK links.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::RowRecord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("duplicate table `{0}`")]
    DuplicateTable(String),
    #[error("duplicate column `{column}` in table `{table}`")]
    DuplicateColumn { table: String, column: String },
    #[error("table `{0}` declares more than one primary key (composite keys are not supported)")]
    CompositeKey(String),
    #[error("foreign key {0} references an unknown table or column")]
    DanglingForeignKey(String),
    #[error("foreign key {0} must target the primary key of its table")]
    TargetNotPrimaryKey(String),
    #[error("foreign key {0} must start at a key column")]
    SourceNotKey(String),
    #[error("table `{0}` has no columns")]
    EmptyTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    PrimaryKey,
    ForeignKey,
    Attribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DTypeHint {
    #[default]
    Categorical,
    Numeric,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub role: ColumnRole,
    #[serde(default)]
    pub dtype_hint: DTypeHint,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, role: ColumnRole) -> Self {
        Self { name: name.into(), role, dtype_hint: DTypeHint::Categorical }
    }

    pub fn with_hint(mut self, hint: DTypeHint) -> Self {
        self.dtype_hint = hint;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn primary_key(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.role == ColumnRole::PrimaryKey)
    }

    /// Column count `C_T`.
    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ForeignKeyDef {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

impl ForeignKeyDef {
    pub fn new(from_table: &str, from_column: &str, to_table: &str, to_column: &str) -> Self {
        Self {
            from_table: from_table.into(),
            from_column: from_column.into(),
            to_table: to_table.into(),
            to_column: to_column.into(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}.{} -> {}.{}", self.from_table, self.from_column, self.to_table, self.to_column)
    }
}

/// Global column index: tables in declaration order, columns in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColumnId(pub u32);

/// Column id carried by the shared `[CLS]`/`[SEP]`/`[PAD]` tokens.
pub const SPECIAL_COLUMN: ColumnId = ColumnId(u32::MAX);

impl ColumnId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_special(self) -> bool {
        self == SPECIAL_COLUMN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub tables: Vec<TableDef>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKeyDef>,
}

impl DatabaseSchema {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut names = BTreeSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return Err(SchemaError::DuplicateTable(t.name.clone()));
            }
            if t.columns.is_empty() {
                return Err(SchemaError::EmptyTable(t.name.clone()));
            }
            let mut cols = BTreeSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.as_str()) {
                    return Err(SchemaError::DuplicateColumn {
                        table: t.name.clone(),
                        column: c.name.clone(),
                    });
                }
            }
            if t.columns.iter().filter(|c| c.role == ColumnRole::PrimaryKey).count() > 1 {
                return Err(SchemaError::CompositeKey(t.name.clone()));
            }
        }
        for fk in &self.foreign_keys {
            let src = self
                .table(&fk.from_table)
                .and_then(|t| t.columns.iter().find(|c| c.name == fk.from_column));
            let dst = self
                .table(&fk.to_table)
                .and_then(|t| t.columns.iter().find(|c| c.name == fk.to_column));
            let (Some(src), Some(dst)) = (src, dst) else {
                return Err(SchemaError::DanglingForeignKey(fk.label()));
            };
            if dst.role != ColumnRole::PrimaryKey {
                return Err(SchemaError::TargetNotPrimaryKey(fk.label()));
            }
            if src.role == ColumnRole::Attribute {
                return Err(SchemaError::SourceNotKey(fk.label()));
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    pub fn num_columns(&self) -> usize {
        self.tables.iter().map(TableDef::width).sum()
    }

    /// First global column id of table `t`.
    pub fn column_offset(&self, t: usize) -> usize {
        self.tables[..t].iter().map(TableDef::width).sum()
    }

    pub fn table_columns(&self, t: usize) -> impl Iterator<Item = ColumnId> {
        let start = self.column_offset(t);
        (start..start + self.tables[t].width()).map(|i| ColumnId(i as u32))
    }

    pub fn column_id(&self, table: &str, column: &str) -> Option<ColumnId> {
        let t = self.table_index(table)?;
        let c = self.tables[t].column_index(column)?;
        Some(ColumnId((self.column_offset(t) + c) as u32))
    }

    /// `(table index, column index)` of a global column id.
    pub fn locate(&self, id: ColumnId) -> Option<(usize, usize)> {
        let mut rest = id.index();
        for (t, table) in self.tables.iter().enumerate() {
            if rest < table.width() {
                return Some((t, rest));
            }
            rest -= table.width();
        }
        None
    }

    pub fn column_def(&self, id: ColumnId) -> Option<&ColumnDef> {
        self.locate(id).map(|(t, c)| &self.tables[t].columns[c])
    }

    /// `table.column`, or `[special]` for the shared special column.
    pub fn column_label(&self, id: ColumnId) -> String {
        match self.locate(id) {
            Some((t, c)) => format!("{}.{}", self.tables[t].name, self.tables[t].columns[c].name),
            None => "[special]".to_string(),
        }
    }

    pub fn is_key_column(&self, id: ColumnId) -> bool {
        self.column_def(id).is_some_and(|c| c.role != ColumnRole::Attribute)
    }

    /// `(from column, to column)` ids of a validated FK.
    pub fn fk_columns(&self, fk: &ForeignKeyDef) -> Option<(ColumnId, ColumnId)> {
        Some((
            self.column_id(&fk.from_table, &fk.from_column)?,
            self.column_id(&fk.to_table, &fk.to_column)?,
        ))
    }

    /// Every declared FK-PK pair, ordered by `(from_table, from_column)`;
    /// ties keep declaration order.
    pub fn join_compatible_pairs(&self) -> Vec<ForeignKeyDef> {
        let mut fks = self.foreign_keys.clone();
        fks.sort_by(|a, b| (&a.from_table, &a.from_column).cmp(&(&b.from_table, &b.from_column)));
        fks
    }

    /// Groups of table names connected through FK links.
    pub fn connected_components(&self) -> Vec<Vec<String>> {
        let mut parent: Vec<usize> = (0..self.tables.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for fk in &self.foreign_keys {
            if let (Some(a), Some(b)) = (self.table_index(&fk.from_table), self.table_index(&fk.to_table)) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for t in 0..self.tables.len() {
            let r = find(&mut parent, t);
            groups.entry(r).or_default().push(self.tables[t].name.clone());
        }
        groups.into_values().collect()
    }

    pub fn is_connected(&self) -> bool {
        self.connected_components().len() <= 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DanglingReference {
    pub table: String,
    pub column: String,
    pub value: String,
    pub row_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateKey {
    pub table: String,
    pub column: String,
    pub value: String,
    pub row_indices: Vec<usize>,
}

/// Referential problems found in loaded data. Never mutates the data.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dangling: Vec<DanglingReference>,
    pub duplicate_keys: Vec<DuplicateKey>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.dangling.is_empty() && self.duplicate_keys.is_empty()
    }
}

/// Lists FK values without a matching PK and duplicated PK values.
/// `tables[i]` holds the rows of `schema.tables[i]`. Null FK cells are not
/// references and are never reported.
pub fn validate_data_against_schema(schema: &DatabaseSchema, tables: &[Vec<RowRecord>]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut pk_values: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();

    for (t, table) in schema.tables.iter().enumerate() {
        let Some(pk) = table.primary_key() else { continue };
        let rows = tables.get(t).map(Vec::as_slice).unwrap_or(&[]);
        let mut seen: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for r in rows {
            if let Some(v) = r.cells.get(pk).and_then(Option::as_deref) {
                seen.entry(v).or_default().push(r.row_index);
            }
        }
        for (value, row_indices) in &seen {
            if row_indices.len() > 1 {
                report.duplicate_keys.push(DuplicateKey {
                    table: table.name.clone(),
                    column: table.columns[pk].name.clone(),
                    value: value.to_string(),
                    row_indices: row_indices.clone(),
                });
            }
        }
        pk_values.insert(t, seen.into_keys().collect());
    }

    for fk in &schema.foreign_keys {
        let (Some(src_t), Some(dst_t)) = (schema.table_index(&fk.from_table), schema.table_index(&fk.to_table))
        else {
            continue;
        };
        let Some(src_c) = schema.tables[src_t].column_index(&fk.from_column) else { continue };
        let empty = BTreeSet::new();
        let targets = pk_values.get(&dst_t).unwrap_or(&empty);
        for r in tables.get(src_t).map(Vec::as_slice).unwrap_or(&[]) {
            if let Some(v) = r.cells.get(src_c).and_then(Option::as_deref) {
                if !targets.contains(v) {
                    report.dangling.push(DanglingReference {
                        table: fk.from_table.clone(),
                        column: fk.from_column.clone(),
                        value: v.to_string(),
                        row_index: r.row_index,
                    });
                }
            }
        }
    }
    report
}
