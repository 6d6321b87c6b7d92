//! Shared plumbing: input resolution, exit codes and the run manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::{DType, Device};
use log::warn;
use rtatl_core::dataset::read_manifest;
use rtatl_core::flow::LucasKanade;
use rtatl_core::{load_config, Config};
use rtatl_model::checkpoint::{checkpoint_config, load_checkpoint};
use rtatl_model::Rtatl;
use serde::{Deserialize, Serialize};

use crate::ModelArgs;

pub const DATA_ROOT_ENV: &str = "RTATL_DATA_ROOT";
const PRESETS: [&str; 3] = ["bp4d", "disfa", "synthetic"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0} does not exist")]
    MissingInput(PathBuf),
    #[error("{0}")]
    Refused(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingInput(_) | CliError::Usage(_) => 2,
            CliError::Refused(_) => 3,
        }
    }
}

/// Relative input paths are taken under `RTATL_DATA_ROOT` when it is set.
pub fn resolve_input(path: &Path) -> Result<PathBuf> {
    let full = match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    };
    if !full.exists() {
        return Err(CliError::MissingInput(full).into());
    }
    Ok(full)
}

/// A config file, or one of the bundled presets by name.
pub fn resolve_config(spec: &str) -> Result<Config> {
    let path = Path::new(spec);
    if path.exists() {
        return load_config(path).with_context(|| format!("loading config {spec}"));
    }
    if PRESETS.contains(&spec) {
        return Ok(Config::preset(spec)?);
    }
    Err(CliError::MissingInput(path.to_path_buf()).into())
}

pub fn read_records(path: &Path) -> Result<Vec<rtatl_core::dataset::ManifestRecord>> {
    let full = resolve_input(path)?;
    read_manifest(&full, None).with_context(|| format!("reading manifest {}", full.display()))
}

/// Fallback flow estimator for frame pairs without a `.flo` sidecar.
pub fn flow_provider() -> LucasKanade {
    LucasKanade::default()
}

/// Loads a checkpoint, or builds a fresh model from a config with a warning.
pub fn load_model(args: &ModelArgs) -> Result<Rtatl> {
    match (&args.checkpoint, &args.config) {
        (Some(ck), cfg) => {
            let ck = resolve_input(ck)?;
            if let Some(spec) = cfg {
                check_hash(&resolve_config(spec)?, &ck)?;
            }
            Ok(load_checkpoint(&ck, DType::F32, &Device::Cpu).with_context(|| format!("loading {}", ck.display()))?)
        }
        (None, Some(spec)) => {
            let cfg = resolve_config(spec)?;
            warn!("no checkpoint given: using untrained weights, figures will show noise");
            Ok(Rtatl::new(&cfg, DType::F32, &Device::Cpu, args.seed.unwrap_or(cfg.train.seed))?)
        }
        (None, None) => Err(CliError::Usage("either --checkpoint or --config is required".into()).into()),
    }
}

/// Refuses a checkpoint trained for a different architecture or AU set.
pub fn check_hash(config: &Config, checkpoint: &Path) -> Result<()> {
    let stored = checkpoint_config(checkpoint)?;
    let (found, expected) = (stored.architecture_hash(), config.architecture_hash());
    if found != expected {
        return Err(CliError::Refused(format!(
            "checkpoint {} was trained with config hash {found}, the given config has {expected}",
            checkpoint.display()
        ))
        .into());
    }
    Ok(())
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub config_hash: String,
    /// Full serialized config.
    pub config: String,
    pub data_root: Option<String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config_path: Option<&str>, config: &Config, out: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config_path: config_path.map(str::to_string),
            seed: config.train.seed,
            output_dir: out.to_path_buf(),
            config_hash: config.architecture_hash(),
            config: config.serialize(),
            data_root: std::env::var(DATA_ROOT_ENV).ok(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn save(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

pub fn create_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}
