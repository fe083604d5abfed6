//! RFC 4180 table files. The header must name exactly the schema's columns,
//! in any order; empty cells become nulls.

use std::io::Read;
use std::path::Path;

use reltab_core::schema::TableDef;
use reltab_core::vocab::RowRecord;
use reltab_core::DatabaseSchema;

use crate::error::{Error, Result};
use crate::fsutil;

fn table_def<'a>(schema: &'a DatabaseSchema, table: &str, source: &Path) -> Result<&'a TableDef> {
    schema.table(table).ok_or_else(|| Error::parse(source, format!("table `{table}` is not in the schema")))
}

pub fn read_table_csv(schema: &DatabaseSchema, table: &str, reader: impl Read, source: &Path) -> Result<Vec<RowRecord>> {
    let def = table_def(schema, table, source)?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(source, e))?.clone();
    let mut slot = vec![usize::MAX; header.len()];
    let mut seen = vec![false; def.width()];
    for (i, name) in header.iter().enumerate() {
        let c = def
            .column_index(name)
            .ok_or_else(|| Error::parse(source, format!("column `{name}` is not in table `{table}`")))?;
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::parse(source, format!("column `{name}` appears twice in the header")));
        }
        slot[i] = c;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::parse(source, format!("header lacks column `{}`", def.columns[c].name)));
    }
    let mut rows = Vec::new();
    for (row_index, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(source, format!("row {row_index}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::parse(
                source,
                format!("row {row_index}: expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let mut cells = vec![None; def.width()];
        for (i, v) in rec.iter().enumerate() {
            cells[slot[i]] = (!v.is_empty()).then(|| v.to_string());
        }
        rows.push(RowRecord { table: table.to_string(), cells, row_index });
    }
    Ok(rows)
}

pub fn load_table_csv(schema: &DatabaseSchema, table: &str, path: &Path) -> Result<Vec<RowRecord>> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    read_table_csv(schema, table, std::io::BufReader::new(file), path)
}

pub fn table_csv_bytes(def: &TableDef, rows: &[RowRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(def.columns.iter().map(|c| c.name.as_str())).expect("in-memory write");
    for r in rows {
        w.write_record(r.cells.iter().map(|c| c.as_deref().unwrap_or(""))).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn write_table_csv(schema: &DatabaseSchema, table: &str, rows: &[RowRecord], path: &Path) -> Result<()> {
    let def = table_def(schema, table, path)?;
    fsutil::write(path, table_csv_bytes(def, rows))
}
