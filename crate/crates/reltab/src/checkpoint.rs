//! Checkpoint directories: `meta.json`, `params.bin`, plus the schema and
//! vocabularies the model was trained with.

use std::collections::BTreeMap;
use std::path::Path;

use reltab_core::checkpoint::{decode_params, encode_params, CodecError, FORMAT_VERSION};
use reltab_core::encoder::{ModelLayout, TableEncoderModel};
use reltab_core::schema::ForeignKeyDef;
use reltab_core::train::TrainConfig;
use reltab_core::vocab::{CleaningRule, VocabOptions, VocabularySet};
use reltab_core::{DatabaseSchema, Real};
use serde::{Deserialize, Serialize};

use crate::config::Precision;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::schema_io::{schema_hash, schema_to_json};

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const SCHEMA_FILE: &str = "schema.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// What the model was fine-tuned for, and how its held-out rows were drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Autocompletion { table: String, column: String, split_seed: u64, ratios: [f64; 3] },
    Join { foreign_keys: Vec<ForeignKeyDef>, split_seed: u64, ratios: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub precision: Precision,
    pub config: TrainConfig,
    pub layout: ModelLayout,
    pub task: TaskSpec,
    pub rules: Vec<CleaningRule>,
    pub vocab_options: VocabOptions,
    pub schema_hash: String,
    /// SHA-256 of each vocabulary space's JSON, keyed by its canonical
    /// column label.
    pub vocab_hashes: BTreeMap<String, String>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub schema: DatabaseSchema,
    pub vocabs: VocabularySet,
    pub model: TableEncoderModel<f64>,
}

fn vocab_hashes(schema: &DatabaseSchema, vocabs: &VocabularySet) -> BTreeMap<String, String> {
    vocabs
        .spaces
        .iter()
        .map(|v| (schema.column_label(v.canonical), fsutil::sha256_hex(&serde_json::to_vec(v).expect("serializable"))))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint<S: Real>(
    dir: &Path,
    model: &TableEncoderModel<S>,
    schema: &DatabaseSchema,
    vocabs: &VocabularySet,
    config: &TrainConfig,
    task: TaskSpec,
    rules: &[CleaningRule],
    vocab_options: VocabOptions,
) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        precision: if S::NAME == "f32" { Precision::F32 } else { Precision::F64 },
        config: config.clone(),
        layout: model.layout.clone(),
        task,
        rules: rules.to_vec(),
        vocab_options,
        schema_hash: schema_hash(schema),
        vocab_hashes: vocab_hashes(schema, vocabs),
    };
    fsutil::create_dir(dir)?;
    fsutil::write(&dir.join(PARAMS_FILE), encode_params(&model.params))?;
    fsutil::write(&dir.join(SCHEMA_FILE), schema_to_json(schema))?;
    fsutil::write_json(&dir.join(VOCAB_FILE), vocabs)?;
    fsutil::write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

/// Loads a checkpoint; with `expected` set, refuses a model trained on a
/// different schema.
pub fn load_checkpoint(dir: &Path, expected: Option<&DatabaseSchema>) -> Result<Checkpoint> {
    let meta_path = dir.join(META_FILE);
    let raw: serde_json::Value = fsutil::read_json(&meta_path)?;
    let found = raw.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found, expected: FORMAT_VERSION });
    }
    let meta: CheckpointMeta = serde_json::from_value(raw).map_err(|e| Error::parse(&meta_path, e))?;
    if let Some(s) = expected {
        let h = schema_hash(s);
        if h != meta.schema_hash {
            return Err(Error::SchemaHashMismatch { expected: h, found: meta.schema_hash });
        }
    }
    let schema = crate::schema_io::load_schema(&dir.join(SCHEMA_FILE))?;
    if schema_hash(&schema) != meta.schema_hash {
        return Err(Error::SchemaHashMismatch { expected: schema_hash(&schema), found: meta.schema_hash });
    }
    let mut vocabs: VocabularySet = fsutil::read_json(&dir.join(VOCAB_FILE))?;
    vocabs.reindex();
    if vocab_hashes(&schema, &vocabs) != meta.vocab_hashes {
        return Err(Error::parse(&dir.join(VOCAB_FILE), "vocabulary does not match the hashes in meta.json"));
    }
    let params_path = dir.join(PARAMS_FILE);
    let params = decode_params::<f64>(&fsutil::read(&params_path)?).map_err(|e| match e {
        CodecError::Truncated(_) => Error::Io {
            path: params_path.clone(),
            source: std::io::Error::new(std::io::ErrorKind::UnexpectedEof, e),
        },
        e => Error::parse(&params_path, e),
    })?;
    let model = TableEncoderModel::from_params(meta.config.encoder.clone(), meta.layout.clone(), params)?;
    Ok(Checkpoint { meta, schema, vocabs, model })
}
