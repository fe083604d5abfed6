//! Run configuration: command-line flags override the JSON config file,
//! which overrides the built-in defaults.

use std::path::Path;

use reltab_core::encoder::Activation;
use reltab_core::train::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const SEED_ENV: &str = "RELTAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Optional per-field overrides coming from the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_hidden: Option<usize>,
    pub activation: Option<Activation>,
    pub dropout: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
    pub negatives: Option<usize>,
    pub mask_keys: Option<bool>,
    pub w2v_init: Option<bool>,
    pub finetune_nsp: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set! {
            variant => c.variant,
            seed => c.seed,
            d_model => c.encoder.d_model,
            layers => c.encoder.layers,
            heads => c.encoder.heads,
            ff_hidden => c.encoder.ff_hidden,
            activation => c.encoder.activation,
            dropout => c.encoder.dropout,
            lr => c.adam.lr,
            batch_size => c.batch_size,
            pretrain_epochs => c.pretrain_epochs,
            finetune_epochs => c.finetune_epochs,
            negatives => c.negatives,
            mask_keys => c.mask_keys,
            w2v_init => c.w2v_init,
            finetune_nsp => c.finetune_nsp,
        }
    }
}

/// A parsed config file. `seed` is `Some` only when the file sets it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub train: TrainConfig,
    pub seed: Option<u64>,
}

pub fn load_config_file(path: &Path) -> Result<ConfigFile> {
    let value: serde_json::Value = fsutil::read_json(path)?;
    let seed = value.get("seed").and_then(serde_json::Value::as_u64);
    let train = serde_json::from_value(value).map_err(|e| Error::parse(path, e))?;
    Ok(ConfigFile { train, seed })
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not a valid seed"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: flag, then config file, then `RELTAB_SEED`.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    env_seed()?.ok_or_else(|| {
        Error::Usage(format!("a seed is required: pass --seed, set \"seed\" in the config file or set {SEED_ENV}"))
    })
}

/// Defaults, then the config file, then `overrides`; the seed must resolve.
pub fn resolve_train_config(file: Option<&Path>, overrides: &TrainOverrides) -> Result<TrainConfig> {
    let (mut config, file_seed) = match file {
        Some(p) => {
            let f = load_config_file(p)?;
            (f.train, f.seed)
        }
        None => (TrainConfig::default(), None),
    };
    overrides.apply(&mut config);
    config.seed = resolve_seed(overrides.seed, file_seed)?;
    config.validate()?;
    Ok(config)
}
