//! Training configuration with layered overrides: built-in defaults, then
//! `CBGAN_SEED`, then a `key=value` config file, then command-line flags.

use std::fs;
use std::path::Path;

use cbgan_core::models::{variant_registry, VariantSpec};
use cbgan_core::spectral::StftConfig;
use cbgan_core::training::{Hyperparams, TrainOptions};

use crate::CliError;

pub const SEED_ENV: &str = "CBGAN_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub spec: VariantSpec,
    pub hp: Hyperparams,
    pub stft: StftConfig,
    pub seed: u64,
    pub steps: u64,
    pub ckpt_every: u64,
    pub workers: usize,
}

impl RunConfig {
    pub fn defaults(variant: &str) -> Result<Self, CliError> {
        let spec = variant_registry(variant).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Self {
            spec,
            hp: Hyperparams::default(),
            stft: StftConfig::default(),
            seed: 0,
            steps: 2000,
            ckpt_every: 100,
            workers: 1,
        })
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
            value
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "ckpt_every" => self.ckpt_every = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "base_channels" => self.spec.base_channels = parse(key, value)?,
            "depth" => self.spec.depth = parse(key, value)?,
            "hop" => self.stft.hop = parse(key, value)?,
            _ => self.hp.set(key, value).map_err(|e| CliError::Usage(e.to_string()))?,
        }
        Ok(())
    }

    pub fn apply_env_seed(&mut self, value: Option<String>) -> Result<(), CliError> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Reads `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn options(&self, out_dir: &Path) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            ckpt_every: self.ckpt_every,
            out_dir: Some(out_dir.to_path_buf()),
            workers: self.workers,
        }
    }
}
