use std::fs;
use std::path::Path;

use anyhow::Context;
use tagcc::train::TrainConfig;

use crate::{CliError, CliResult};

/// Reads the optional TOML file and applies the global seed override.
pub fn load(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(CliError::validation)?;
            parse(&text).map_err(CliError::validation)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

pub fn parse(text: &str) -> anyhow::Result<TrainConfig> {
    toml::from_str(text).context("parsing config")
}
