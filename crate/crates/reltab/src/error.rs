use std::path::{Path, PathBuf};

use reltab_core::baselines::BaselineError;
use reltab_core::corpus::CorpusError;
use reltab_core::encoder::EncoderError;
use reltab_core::eval::EvalError;
use reltab_core::schema::SchemaError;
use reltab_core::task::TaskError;
use reltab_core::train::TrainError;
use reltab_core::vocab::VocabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Parse { path: PathBuf, detail: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint was trained on schema {found}, but the given schema hashes to {expected}")]
    SchemaHashMismatch { expected: String, found: String },
    /// Bad invocation: missing seed, unknown names on the command line.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, detail: impl ToString) -> Error {
        Error::Parse { path: path.to_path_buf(), detail: detail.to_string() }
    }

    /// Process exit code: 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }
}
