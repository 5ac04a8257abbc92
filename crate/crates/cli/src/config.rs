//! `key=value` run configuration merged with command-line overrides.

use std::fs;
use std::path::Path;

use alignnd::encoding::BondAngleEncoding;
use alignnd::graphs::Representation;
use alignnd::model::{HeadKind, ModelConfig};
use alignnd::training::TrainConfig;
use alignnd::{Error, Result};

#[cfg(test)]
/// Every key accepted in a config file.
pub const KEYS: &[&str] = &[
    "representation",
    "layers",
    "channels",
    "cutoff_distance",
    "cutoff_angle",
    "gate_epsilon",
    "head",
    "bond_angle_encoding",
    "per_kind_scalar_maps",
    "batch_size",
    "epochs",
    "lr_init",
    "lr_max",
    "beta1",
    "beta2",
    "warmup_fraction",
    "stop_at_val_loss",
    "train_fraction",
    "seed",
    "threads",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_fraction: 0.9,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

pub fn parse_angle_encoding(value: &str) -> Result<BondAngleEncoding> {
    match value {
        "cos" => Ok(BondAngleEncoding::Cosine),
        "cos-sin" => Ok(BondAngleEncoding::CosineSine),
        _ => Err(Error::Config(format!(
            "bond angle encoding must be `cos` or `cos-sin`, got `{value}`"
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "representation" => m.representation = value.parse::<Representation>()?,
            "layers" => m.layers = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "cutoff_distance" => m.cutoff_distance = parse(key, value)?,
            "cutoff_angle" => m.cutoff_angle = parse(key, value)?,
            "gate_epsilon" => m.gate_epsilon = parse(key, value)?,
            "head" => m.head = HeadKind::parse(value)?,
            "bond_angle_encoding" => m.bond_angle_encoding = parse_angle_encoding(value)?,
            "per_kind_scalar_maps" => m.per_kind_scalar_maps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr_init" => t.lr_init = parse(key, value)?,
            "lr_max" => t.lr_max = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, value)?,
            "stop_at_val_loss" => t.stop_at_val_loss = Some(parse(key, value)?),
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "threads" => t.threads = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}
