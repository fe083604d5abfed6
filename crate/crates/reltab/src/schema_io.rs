//! Schema JSON files.

use std::path::Path;

use reltab_core::DatabaseSchema;

use crate::error::{Error, Result};
use crate::fsutil;

pub fn parse_schema(json: &str, source: &Path) -> Result<DatabaseSchema> {
    let schema: DatabaseSchema = serde_json::from_str(json).map_err(|e| Error::parse(source, e))?;
    schema.validate()?;
    Ok(schema)
}

pub fn load_schema(path: &Path) -> Result<DatabaseSchema> {
    parse_schema(&fsutil::read_string(path)?, path)
}

pub fn schema_to_json(schema: &DatabaseSchema) -> String {
    serde_json::to_string_pretty(schema).expect("serializable") + "\n"
}

pub fn save_schema(schema: &DatabaseSchema, path: &Path) -> Result<()> {
    fsutil::write(path, schema_to_json(schema))
}

/// SHA-256 of the compact JSON form; identifies the schema a model was
/// trained on.
pub fn schema_hash(schema: &DatabaseSchema) -> String {
    fsutil::sha256_hex(&serde_json::to_vec(schema).expect("serializable"))
}
