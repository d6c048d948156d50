//! Flat `key = value` training configuration.
//!
//! Blank lines and text after `#` are ignored. Every key is optional;
//! unknown or repeated keys are errors. `input_size` takes one value for a
//! cube or three comma-separated values.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{IntensityAugment, LossConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Precision};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches summed into each optimizer step.
    pub accumulation: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    /// Save a checkpoint every this many steps; 0 keeps only the initial and
    /// final ones.
    pub checkpoint_every: usize,
    pub intensity: IntensityAugment,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            epochs: 1,
            batch_size: 1,
            accumulation: 1,
            base_lr: 2e-4,
            lr_power: 0.9,
            checkpoint_every: 0,
            intensity: IntensityAugment::default(),
            loss: LossConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "in_channels",
    "base_width",
    "num_classes",
    "embed_dim",
    "vit_layers",
    "heads",
    "ffn_hidden",
    "cbam_reduction",
    "max_norm_groups",
    "norm_eps",
    "input_size",
    "precision",
    "seed",
    "epochs",
    "batch_size",
    "accumulation",
    "base_lr",
    "lr_power",
    "checkpoint_every",
    "augment_intensity",
    "intensity_shift",
    "intensity_scale",
    "ce_weight",
    "dice_weight",
    "dice_eps",
];

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: `{key}` expects true or false, got `{value}`"))),
    }
}

fn parse_size(value: &str, line: usize) -> Result<[usize; 3]> {
    let parts = value
        .split(',')
        .map(|p| parse::<usize>("input_size", p.trim(), line))
        .collect::<Result<Vec<_>>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [h, w, d] => Ok([*h, *w, *d]),
        _ => Err(Error::Config(format!("line {line}: input_size needs 1 or 3 values"))),
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config(format!("line {line}: expected key = value, got `{content}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: `{key}` given twice")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        match key {
            "in_channels" => m.in_channels = parse(key, value, line)?,
            "base_width" => m.base_width = parse(key, value, line)?,
            "num_classes" => m.num_classes = parse(key, value, line)?,
            "embed_dim" => m.embed_dim = parse(key, value, line)?,
            "vit_layers" => m.vit_layers = parse(key, value, line)?,
            "heads" => m.heads = parse(key, value, line)?,
            "ffn_hidden" => m.ffn_hidden = parse(key, value, line)?,
            "cbam_reduction" => m.cbam_reduction = parse(key, value, line)?,
            "max_norm_groups" => m.max_norm_groups = parse(key, value, line)?,
            "norm_eps" => m.norm_eps = parse(key, value, line)?,
            "input_size" => m.input_size = parse_size(value, line)?,
            "precision" => {
                m.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("line {line}: precision is f32 or f64, got `{value}`"))),
                }
            }
            "seed" => self.seed = parse(key, value, line)?,
            "epochs" => self.epochs = parse(key, value, line)?,
            "batch_size" => self.batch_size = parse(key, value, line)?,
            "accumulation" => self.accumulation = parse(key, value, line)?,
            "base_lr" => self.base_lr = parse(key, value, line)?,
            "lr_power" => self.lr_power = parse(key, value, line)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value, line)?,
            "augment_intensity" => self.intensity.enabled = parse_bool(key, value, line)?,
            "intensity_shift" => self.intensity.shift = parse(key, value, line)?,
            "intensity_scale" => self.intensity.scale = parse(key, value, line)?,
            "ce_weight" => self.loss.ce_weight = parse(key, value, line)?,
            "dice_weight" => self.loss.dice_weight = parse(key, value, line)?,
            "dice_eps" => self.loss.dice_eps = parse(key, value, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch_size and accumulation must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.lr_power > 0.0) {
            return Err(Error::Config("base_lr must be nonnegative and lr_power positive".into()));
        }
        let IntensityAugment { shift, scale, .. } = self.intensity;
        if !(shift >= 0.0) || !(0.0..1.0).contains(&scale) {
            return Err(Error::Config("intensity_shift must be ≥ 0 and intensity_scale in [0, 1)".into()));
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("in_channels", m.in_channels.to_string());
        put("base_width", m.base_width.to_string());
        put("num_classes", m.num_classes.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("vit_layers", m.vit_layers.to_string());
        put("heads", m.heads.to_string());
        put("ffn_hidden", m.ffn_hidden.to_string());
        put("cbam_reduction", m.cbam_reduction.to_string());
        put("max_norm_groups", m.max_norm_groups.to_string());
        put("norm_eps", format!("{:e}", m.norm_eps));
        put("input_size", format!("{},{},{}", m.input_size[0], m.input_size[1], m.input_size[2]));
        put("precision", if m.precision == Precision::F32 { "f32" } else { "f64" }.into());
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("accumulation", self.accumulation.to_string());
        put("base_lr", format!("{:e}", self.base_lr));
        put("lr_power", self.lr_power.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("augment_intensity", self.intensity.enabled.to_string());
        put("intensity_shift", self.intensity.shift.to_string());
        put("intensity_scale", self.intensity.scale.to_string());
        put("ce_weight", self.loss.ce_weight.to_string());
        put("dice_weight", self.loss.dice_weight.to_string());
        put("dice_eps", format!("{:e}", self.loss.dice_eps));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_roundtrips() {
        let cfg = TrainConfig::parse(
            "# tiny run\nbase_width = 4\nembed_dim=16 \ninput_size = 32\nprecision = f64\n\nepochs = 3 # trailing\naugment_intensity = false\n",
        )
        .unwrap();
        assert_eq!(cfg.model.input_size, [32, 32, 32]);
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.intensity.enabled);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let text = cfg.to_text();
        let listed: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(listed, KEYS);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        for text in ["bogus = 1", "seed = 1\nseed = 2", "seed", "epochs = -1", "input_size = 16,16", "heads = 7"] {
            assert!(matches!(TrainConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
