//! Run configuration: the model configuration plus training, data and
//! inference settings, read from a `key = value` text file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use slc_core::data::tiles::Merge;
use slc_core::network::ModelConfig;
use slc_core::train::TrainOptions;
use slc_core::data::augment::AugmentConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub augment: bool,
    /// Tile side for validation and prediction; `None` runs whole images.
    pub tile_size: Option<usize>,
    pub overlap: f64,
    pub merge: Merge,
    /// Class ids left out of validation scores.
    pub ignore: Vec<u8>,
    pub train_dir: Option<PathBuf>,
    /// Validation set; the training set is scored when absent.
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Checkpoint whose weights start training.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            lr_drop_epochs: Vec::new(),
            augment: true,
            tile_size: None,
            overlap: 0.25,
            merge: Merge::Mean,
            ignore: Vec::new(),
            train_dir: None,
            val_dir: None,
            out_dir: PathBuf::from("runs/slc"),
            resume: None,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e| CliError::Config(format!("{key} = {value}: {e}")))
}

/// Comma-separated values; empty or `none` is the empty list.
pub fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn join<V: ToString>(values: &[V]) -> String {
    if values.is_empty() {
        "none".into()
    } else {
        values.iter().map(V::to_string).collect::<Vec<_>>().join(",")
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_drop_epochs" => self.lr_drop_epochs = parse_list(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "tile_size" => {
                self.tile_size = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "overlap" => self.overlap = parse(key, value)?,
            "merge" => self.merge = parse(key, value)?,
            "ignore" => self.ignore = parse_list(key, value)?,
            "train_dir" => self.train_dir = optional_path(value),
            "val_dir" => self.val_dir = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "resume" => self.resume = optional_path(value),
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            config
                .set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CliError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(CliError::Config(format!("overlap must be in [0, 1), got {}", self.overlap)));
        }
        if self.tile_size.is_some_and(|t| t < 32 || t % 2 == 1) {
            return Err(CliError::Config("tile_size must be even and at least 32".into()));
        }
        Ok(())
    }

    /// Text that [`RunConfig::parse`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let pairs = [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_drop_epochs", join(&self.lr_drop_epochs)),
            ("augment", self.augment.to_string()),
            ("tile_size", self.tile_size.map_or("none".into(), |t| t.to_string())),
            ("overlap", self.overlap.to_string()),
            ("merge", self.merge.to_string()),
            ("ignore", join(&self.ignore)),
            ("train_dir", path(&self.train_dir)),
            ("val_dir", path(&self.val_dir)),
            ("out_dir", self.out_dir.display().to_string()),
            ("resume", path(&self.resume)),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_drop_epochs: self.lr_drop_epochs.clone(),
            augment: if self.augment { AugmentConfig::default() } else { AugmentConfig::none() },
            seed: self.model.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("fcsm_scales", "4,8").unwrap();
        c.set("lr_drop_epochs", "10,15").unwrap();
        c.set("tile_size", "64").unwrap();
        c.set("val_dir", "data/val").unwrap();
        c.set("merge", "last_write").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_malformed_lines_are_rejected() {
        assert!(RunConfig::parse("epochs = 3\nlearning_rate = 1").is_err());
        assert!(RunConfig::parse("epochs 3").is_err());
        assert!(RunConfig::parse("epochs = three").is_err());
        let c = RunConfig::parse("# comment\n\n epochs = 3 \n").unwrap();
        assert_eq!(c.epochs, 3);
    }
}
