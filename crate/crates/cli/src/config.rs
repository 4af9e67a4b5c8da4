use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use prunecam::run::RunConfig;
use prunecam::Error;

pub const SEED_ENV: &str = "PRUNECAM_SEED";
pub const OUT_ENV: &str = "PRUNECAM_OUT";

/// Reads a TOML run config; unknown keys and bad values are config errors.
pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let de = toml::Deserializer::new(&text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::Config(format!("{}: key `{key}`: {}", path.display(), e.into_inner().message()))
    })?;
    Ok(cfg)
}

/// Applies `PRUNECAM_SEED` and `PRUNECAM_OUT`, then explicit flags.
pub fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))
            .context("environment override")?;
    }
    if let Ok(v) = std::env::var(OUT_ENV) {
        if !v.is_empty() {
            cfg.out_dir = PathBuf::from(v);
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(())
}

pub fn render_default() -> Result<String> {
    Ok(toml::to_string(&RunConfig::default()).map_err(|e| Error::Invalid(e.to_string()))?)
}
