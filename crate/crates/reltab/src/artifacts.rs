//! On-disk artifact formats and the `manifest.json` index.

use std::collections::BTreeMap;
use std::path::Path;

use reltab_core::baselines::TripartiteGraph;
use reltab_core::corpus::Example;
use reltab_core::train::{LossReport, Stage};
use reltab_core::vocab::VocabularySet;
use reltab_core::DatabaseSchema;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsutil;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLine {
    pub table: String,
    pub column: String,
    pub token: String,
    pub id: u32,
}

/// Every `(column, token, id)` triple, specials included, in column order.
pub fn vocab_lines(schema: &DatabaseSchema, vocabs: &VocabularySet) -> Vec<VocabLine> {
    let mut out = Vec::new();
    for (t, def) in schema.tables.iter().enumerate() {
        for (c, col) in schema.table_columns(t).zip(&def.columns) {
            for (id, token) in vocabs.for_column(c).tokens().iter().enumerate() {
                out.push(VocabLine { table: def.name.clone(), column: col.name.clone(), token: token.clone(), id: id as u32 });
            }
        }
    }
    out
}

pub fn write_vocab_jsonl(schema: &DatabaseSchema, vocabs: &VocabularySet, path: &Path) -> Result<()> {
    fsutil::write_jsonl(path, vocab_lines(schema, vocabs))
}

/// One training instance. Tokens are `[token id, column id]`; the shared
/// `[CLS]`/`[SEP]` tokens carry column id 4294967295. `target` is
/// `[column id, token id]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub kind: String,
    pub tokens: Vec<[u32; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_pos: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<[u32; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<u8>,
}

impl From<&Example> for CorpusLine {
    fn from(e: &Example) -> Self {
        Self {
            kind: if e.nsp.is_some() { "nsp" } else { "mlm" }.into(),
            tokens: e.tokens.iter().map(|t| [t.id, t.column.0]).collect(),
            mask_pos: e.target.map(|(p, _)| p),
            target: e.target.map(|(_, t)| [t.column.0, t.id]),
            label: e.nsp.map(u8::from),
        }
    }
}

pub fn write_corpus_jsonl<'a>(path: &Path, examples: impl IntoIterator<Item = &'a Example>) -> Result<()> {
    fsutil::write_jsonl(path, examples.into_iter().map(CorpusLine::from))
}

/// One walk per line, node labels separated by single spaces.
pub fn walks_text(graph: &TripartiteGraph, schema: &DatabaseSchema, vocabs: &VocabularySet, walks: &[Vec<u32>]) -> String {
    let labels: Vec<String> = (0..graph.nodes.len() as u32).map(|n| graph.label(schema, vocabs, n)).collect();
    let mut out = String::new();
    for w in walks {
        for (i, n) in w.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&labels[*n as usize]);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub stage: Stage,
    pub epoch: usize,
    pub l_mlm: f64,
    pub l_nsp: f64,
    pub l_total: f64,
    pub wall_ms: u64,
}

impl TrainLogLine {
    pub fn new(r: &LossReport, wall_ms: u64) -> Self {
        Self { stage: r.stage, epoch: r.epoch, l_mlm: r.l_mlm, l_nsp: r.l_nsp, l_total: r.l_total, wall_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub kind: String,
    pub command: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Index of everything written under an output directory, keyed by
/// relative path. Subcommands sharing an output directory extend it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub runs: BTreeMap<String, RunRecord>,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            runs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load_or_default(out: &Path) -> Result<Self> {
        let p = out.join(MANIFEST_FILE);
        if p.exists() {
            fsutil::read_json(&p)
        } else {
            Ok(Self::default())
        }
    }

    pub fn record_run(&mut self, command: &str, seed: Option<u64>, config: &impl Serialize) {
        let config = serde_json::to_value(config).expect("serializable");
        self.runs.insert(command.into(), RunRecord { seed, config });
    }

    /// Hashes `out/rel` and indexes it.
    pub fn add(&mut self, out: &Path, rel: &str, kind: &str, command: &str) -> Result<()> {
        let bytes = fsutil::read(&out.join(rel))?;
        self.artifacts.insert(
            rel.into(),
            ArtifactRecord { kind: kind.into(), command: command.into(), sha256: fsutil::sha256_hex(&bytes), bytes: bytes.len() as u64 },
        );
        Ok(())
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        fsutil::write_json(&out.join(MANIFEST_FILE), self)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.artifacts.values().map(|a| a.kind.as_str())
    }
}
