//! Flat TOML config files whose keys are the `TrainConfig` field names.

use std::fs;
use std::path::Path;

use cofipara_core::TrainConfig;

use crate::error::{Error, Result};

pub fn parse(text: &str, path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig =
        toml::from_str(text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

pub fn to_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("config serialises")
}

/// The config file if given, else the defaults; `seed` overrides either.
pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = parse("epochs = 3\nlearning_rate = 0.01\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(parse("epoch = 3\n", Path::new("c.toml")).is_err());
        assert!(parse("batch_size = 0\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = TrainConfig::full_size();
        assert_eq!(parse(&to_toml(&cfg), Path::new("c.toml")).unwrap(), cfg);
    }
}
