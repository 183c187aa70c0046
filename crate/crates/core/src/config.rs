//! The `key = value` run configuration read by the command line tool.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{BlockSpec, DownsampleMode, ModelConfig, PriorMode};
use crate::data::{generate_synthetic, load_cifar10_binary, load_raw_splits, Dataset, Splits, SyntheticConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Raw,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "raw" => Ok(DatasetKind::Raw),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Config(format!("unknown dataset {s:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Raw => "raw",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

/// Every setting of a run. Keys and defaults are listed in [`KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    /// Seed of the train/validation split and of synthetic data.
    pub data_seed: u64,
    pub synth_n: usize,
    pub synth_palette_k: usize,
    pub synth_texture_scale: u8,
}

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("width", "384", "channels of the residual stream"),
    ("bottleneck_ratio", "0.25", "bottleneck width as a fraction of width"),
    ("zdim", "16", "latent channels per stochastic layer"),
    ("enc_blocks", "32x10,16x10,8x10,4x10,1x10", "encoder ladder, resolution x blocks"),
    ("dec_blocks", "1x1,4x2,8x5,16x10,32x11", "decoder ladder; its last resolution is the image size"),
    ("image_channels", "3", "channels per pixel"),
    ("prior_mode", "separate", "separate | shared_pseudoinput"),
    ("ff_group_size", "4", "channels per group in the feedforward convolutions"),
    ("dmol_mixtures", "10", "logistic mixture components per pixel"),
    ("residual_scaling", "true", "scale residual block outputs by 1/sqrt(depth) at init"),
    ("downsample_mode", "avg_pool", "avg_pool | strided_conv"),
    ("independent_group", "1", "consecutive decoder blocks sharing one input"),
    ("lr", "0.0002", "Adam learning rate"),
    ("batch_size", "32", "images per update"),
    ("weight_decay", "0.01", "decoupled weight decay; 0 gives plain Adam"),
    ("skip_threshold", "400", "skip updates whose gradient norm exceeds this (inf disables)"),
    ("ema_rate", "0.999", "Polyak averaging coefficient"),
    ("kl_phase", "standard_prior_phase", "standard_prior_phase | true_kl_phase"),
    ("total_steps", "1000", "batches to process"),
    ("seed", "0", "seed for initialization, batches and latent noise"),
    ("checkpoint_every", "0", "steps between periodic checkpoints; 0 for none"),
    ("dataset", "cifar10", "cifar10 | raw | synthetic"),
    ("data_path", "", "CIFAR-10 batch directory or VDVT file; required unless synthetic"),
    ("data_seed", "0", "seed for the validation split and synthetic images"),
    ("synth_n", "2000", "synthetic dataset size"),
    ("synth_palette_k", "6", "synthetic palette size"),
    ("synth_texture_scale", "8", "synthetic per-subpixel noise amplitude"),
];

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            model: ModelConfig::cifar10(),
            train: TrainConfig::default(),
            dataset: DatasetKind::Cifar10,
            data_path: None,
            data_seed: 0,
            synth_n: 2000,
            synth_palette_k: 6,
            synth_texture_scale: 8,
        };
        for (k, v, _) in KEYS {
            if !v.is_empty() {
                cfg.set(k, v).expect("defaults parse");
            }
        }
        cfg
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

impl RunConfig {
    /// Set one key without validating the whole configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "width" => m.width = num(key, value)?,
            "bottleneck_ratio" => m.bottleneck_ratio = num(key, value)?,
            "zdim" => m.zdim = num(key, value)?,
            "enc_blocks" => m.enc_spec = BlockSpec::parse(value)?,
            "dec_blocks" => {
                m.dec_spec = BlockSpec::parse(value)?;
                m.image_size = m.dec_spec.last_resolution();
            }
            "image_channels" => m.image_channels = num(key, value)?,
            "prior_mode" => m.prior_mode = PriorMode::from_str(value)?,
            "ff_group_size" => m.ff_group_size = num(key, value)?,
            "dmol_mixtures" => m.dmol_mixtures = num(key, value)?,
            "residual_scaling" => m.residual_scaling = num(key, value)?,
            "downsample_mode" => m.downsample = DownsampleMode::from_str(value)?,
            "independent_group" => m.independent_group = num(key, value)?,
            "dataset" => self.dataset = value.parse()?,
            "data_path" => self.data_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data_seed" => self.data_seed = num(key, value)?,
            "synth_n" => self.synth_n = num(key, value)?,
            "synth_palette_k" => self.synth_palette_k = num(key, value)?,
            "synth_texture_scale" => self.synth_texture_scale = num(key, value)?,
            _ => {
                if !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. Errors name the
    /// offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply `key=value` overrides on top of the file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset != DatasetKind::Synthetic && self.data_path.is_none() {
            return Err(Error::Config(format!("dataset {} requires data_path", self.dataset)));
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n: self.synth_n,
            size: self.model.image_size,
            palette_k: self.synth_palette_k,
            texture_scale: self.synth_texture_scale,
            seed: self.data_seed,
        }
    }

    /// Load or generate the configured dataset and check it against the
    /// model's image shape.
    pub fn load_data(&self) -> Result<Splits> {
        let splits = match self.dataset {
            DatasetKind::Cifar10 => load_cifar10_binary(self.required_path()?, self.data_seed)?,
            DatasetKind::Raw => load_raw_splits(self.required_path()?, self.data_seed)?,
            DatasetKind::Synthetic => {
                let ds = generate_synthetic(&self.synthetic())?;
                let (train, val) = ds.split_holdout(crate::data::default_holdout(ds.len()), self.data_seed)?;
                Splits { train, val, test: None }
            }
        };
        self.check_shape(&splits.train)?;
        Ok(splits)
    }

    fn required_path(&self) -> Result<&Path> {
        self.data_path
            .as_deref()
            .ok_or_else(|| Error::Config(format!("dataset {} requires data_path", self.dataset)))
    }

    fn check_shape(&self, ds: &Dataset) -> Result<()> {
        let s = self.model.image_size;
        let c = self.model.image_channels;
        if (ds.height(), ds.width(), ds.channels()) != (s, s, c) {
            return Err(Error::Config(format!(
                "data is {}x{}x{} but the model expects {s}x{s}x{c}",
                ds.height(),
                ds.width(),
                ds.channels()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model, ModelConfig::cifar10());
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.skip_threshold, 400.0);
        for (k, v, _) in KEYS {
            let mut c = RunConfig::default();
            if !v.is_empty() {
                c.set(k, v).unwrap();
                assert_eq!(c, cfg, "{k}");
            }
        }
    }

    #[test]
    fn parses_with_comments_and_reports_lines() {
        let cfg = RunConfig::parse("# toy\nwidth = 32 # narrow\ndec_blocks = 1x1,8x2\nenc_blocks=8x1,1x1\ndataset = synthetic\n").unwrap();
        assert_eq!(cfg.model.width, 32);
        assert_eq!(cfg.model.image_size, 8);
        cfg.validate().unwrap();
        let err = RunConfig::parse("width = 32\nwidht = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("widht"), "{err}");
        let err = RunConfig::parse("lr = fast\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("lr"), "{err}");
    }

    #[test]
    fn data_path_required_for_files() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().unwrap_err().to_string().contains("data_path"));
    }
}
