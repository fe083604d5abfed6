//! A schema plus its loaded tables, and the encoded form training uses.

use std::path::Path;

use rayon::prelude::*;
use reltab_core::corpus::EncodedDatabase;
use reltab_core::schema::{validate_data_against_schema, ValidationReport};
use reltab_core::vocab::{apply_cleaning_rules, build_vocabularies, validate_rules, CleaningRule, RowRecord, VocabOptions, VocabularySet};
use reltab_core::DatabaseSchema;

use crate::csv_io::{load_table_csv, table_csv_bytes};
use crate::error::Result;
use crate::fsutil;
use crate::schema_io::{load_schema, save_schema};

pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: DatabaseSchema,
    /// `tables[i]` holds the rows of `schema.tables[i]`.
    pub tables: Vec<Vec<RowRecord>>,
}

impl Dataset {
    /// Reads `<dir>/<table>.csv` for every table of `schema`, in parallel.
    pub fn load(schema: DatabaseSchema, dir: &Path) -> Result<Self> {
        let tables = schema
            .tables
            .par_iter()
            .map(|t| load_table_csv(&schema, &t.name, &dir.join(format!("{}.csv", t.name))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { schema, tables })
    }

    /// Loads the schema from `schema_path` (default `<dir>/schema.json`).
    pub fn open(schema_path: Option<&Path>, dir: &Path) -> Result<Self> {
        let schema = match schema_path {
            Some(p) => load_schema(p)?,
            None => load_schema(&dir.join(SCHEMA_FILE))?,
        };
        Self::load(schema, dir)
    }

    /// Writes `schema.json` and one CSV per table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        save_schema(&self.schema, &dir.join(SCHEMA_FILE))?;
        for (def, rows) in self.schema.tables.iter().zip(&self.tables) {
            fsutil::write(&dir.join(format!("{}.csv", def.name)), table_csv_bytes(def, rows))?;
        }
        Ok(())
    }

    pub fn num_rows(&self) -> usize {
        self.tables.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> ValidationReport {
        validate_data_against_schema(&self.schema, &self.tables)
    }

    /// Applies `rules` table by table. Rows keep their original `row_index`.
    pub fn clean(mut self, rules: &[CleaningRule]) -> Result<Self> {
        validate_rules(&self.schema, rules)?;
        let schema = &self.schema;
        self.tables = std::mem::take(&mut self.tables)
            .into_par_iter()
            .map(|rows| apply_cleaning_rules(schema, rows, rules))
            .collect();
        Ok(self)
    }
}

/// Cleaned rows with their vocabularies and token encoding.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub schema: DatabaseSchema,
    pub tables: Vec<Vec<RowRecord>>,
    pub vocabs: VocabularySet,
    pub db: EncodedDatabase,
}

pub fn prepare(dataset: Dataset, rules: &[CleaningRule], opts: &VocabOptions) -> Result<Prepared> {
    let Dataset { schema, tables } = dataset.clean(rules)?;
    let vocabs = build_vocabularies(&schema, &tables, opts)?;
    let db = EncodedDatabase::encode(&schema, &vocabs, &tables);
    Ok(Prepared { schema, tables, vocabs, db })
}

pub fn load_rules(path: &Path) -> Result<Vec<CleaningRule>> {
    fsutil::read_json(path)
}
