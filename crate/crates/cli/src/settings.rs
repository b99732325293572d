//! Run configuration shared by `train`, `eval` and `finetune`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msshare_core::data::{Preprocess, PREPROCESS_KEYS};
use msshare_core::train::{SgdConfig, SGD_KEYS};
use msshare_core::zoo::ARCH_KEYS;
use msshare_core::{ArchSpec, Config};

const RUN_KEYS: [&str; 5] = ["seed", "data", "out", "wall_clock", "eval_batch"];

/// Every key a run configuration may contain.
pub fn known_keys() -> Vec<&'static str> {
    ARCH_KEYS
        .iter()
        .chain(&SGD_KEYS)
        .chain(&PREPROCESS_KEYS)
        .chain(&RUN_KEYS)
        .copied()
        .collect()
}

pub struct Settings {
    pub raw: Config,
    pub sgd: SgdConfig,
    pub pre: Preprocess,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub wall_clock: bool,
    pub eval_batch: usize,
}

impl Settings {
    /// Reads `path` (if any) and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut raw = match path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not key=value"))?;
            raw.set(k.trim(), v.trim());
        }
        raw.reject_unknown(&known_keys())?;
        Ok(Self {
            sgd: SgdConfig::from_config(&raw)?,
            pre: Preprocess::from_config(&raw)?,
            seed: raw.parse_or("seed", 0)?,
            data: raw.get("data").map(PathBuf::from),
            out: raw.get("out").map(PathBuf::from),
            wall_clock: raw.bool_or("wall_clock", false)?,
            eval_batch: raw.parse_or("eval_batch", 64)?,
            raw,
        })
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        Ok(ArchSpec::from_config(&self.raw)?)
    }

    pub fn data_root(&self, flag: Option<&PathBuf>) -> Result<PathBuf> {
        match flag.or(self.data.as_ref()) {
            Some(p) => Ok(p.clone()),
            None => bail!("no dataset given (use --data or `data=` in the config)"),
        }
    }

    pub fn out_dir(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.or(self.out.as_ref()).cloned().unwrap_or_else(|| PathBuf::from("runs"))
    }
}
