//! TOML run configuration.

use std::path::Path;

use vclab_core::pipeline::TrainConfig;

use crate::codec::write_file;
use crate::error::{Error, Result};

/// Reads a TOML config; absent keys keep their defaults.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn parse_config(text: &str, path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|source| Error::Toml { path: path.to_path_buf(), source })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("TrainConfig serializes to TOML")
}

pub fn save_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    write_file(path, config_to_toml(cfg).as_bytes())
}
