//! Attention heatmaps and embedding tables as CSV.

use std::path::{Path, PathBuf};

use reltab_core::baselines::EntityEmbeddings;
use reltab_core::corpus::{Token, SPECIAL_TOKEN_NAMES};
use reltab_core::encoder::TableEncoderModel;
use reltab_core::vocab::{SpaceId, VocabularySet};
use reltab_core::{DatabaseSchema, Real};

use crate::error::Result;
use crate::fsutil;

/// Column name of every position (`table.column`, or the special's name).
pub fn position_labels(schema: &DatabaseSchema, tokens: &[Token]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            if t.column.is_special() {
                SPECIAL_TOKEN_NAMES.get(t.id as usize).copied().unwrap_or("[?]").to_string()
            } else {
                schema.column_label(t.column)
            }
        })
        .collect()
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// Writes `layer{l}_head{h}.csv` into `dir` for every layer and head.
/// The first row and column hold the position labels.
pub fn export_attention<S: Real>(
    model: &TableEncoderModel<S>,
    schema: &DatabaseSchema,
    tokens: &[Token],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (_, record) = model.encode(tokens)?;
    let labels = position_labels(schema, tokens);
    let mut written = Vec::new();
    for (l, heads) in record.layers.iter().enumerate() {
        for (h, m) in heads.iter().enumerate() {
            let header = std::iter::once(String::new()).chain(labels.iter().cloned()).collect();
            let rows = (0..m.rows()).map(|i| {
                std::iter::once(labels[i].clone()).chain(m.row(i).iter().map(|v| v.as_f64().to_string())).collect()
            });
            let path = dir.join(format!("layer{l}_head{h}.csv"));
            fsutil::write(&path, csv_bytes(std::iter::once(header).chain(rows)))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// `table.column=value` for an entity of `space`, named after the space's
/// canonical column.
pub fn entity_label(schema: &DatabaseSchema, vocabs: &VocabularySet, space: SpaceId, id: u32) -> String {
    let v = &vocabs.spaces[space.index()];
    format!("{}={}", schema.column_label(v.canonical), v.decode(id).unwrap_or("?"))
}

/// One row per non-special entity: label, then `d` values.
pub fn export_model_embeddings<S: Real>(
    model: &TableEncoderModel<S>,
    schema: &DatabaseSchema,
    vocabs: &VocabularySet,
    path: &Path,
) -> Result<usize> {
    let mut rows = Vec::new();
    for v in &vocabs.spaces {
        for id in v.entity_ids() {
            let e = model.embedding(Token::new(id, v.canonical))?;
            rows.push(
                std::iter::once(entity_label(schema, vocabs, v.space, id)).chain(e.iter().map(|x| x.as_f64().to_string())).collect(),
            );
        }
    }
    let n = rows.len();
    fsutil::write(path, csv_bytes(rows))?;
    Ok(n)
}

pub fn export_baseline_embeddings(emb: &EntityEmbeddings, schema: &DatabaseSchema, vocabs: &VocabularySet, path: &Path) -> Result<usize> {
    let rows: Vec<Vec<String>> = emb
        .vectors
        .iter()
        .map(|(&(s, id), v)| std::iter::once(entity_label(schema, vocabs, s, id)).chain(v.iter().map(f64::to_string)).collect())
        .collect();
    let n = rows.len();
    fsutil::write(path, csv_bytes(rows))?;
    Ok(n)
}
