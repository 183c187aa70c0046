use std::fmt;
use std::str::FromStr;

use super::spec::{group_independent, BlockSpec, Direction, ExecutionPlan};
use crate::error::{Error, Result};

/// How the prior of each top-down block is parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorMode {
    /// A dedicated bottleneck network maps the state to prior parameters.
    Separate,
    /// The posterior network is reused, fed a learned pseudo-input in place
    /// of the encoder activations.
    SharedPseudoInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleMode {
    AvgPool,
    /// A single k x k convolution with stride k.
    StridedConv,
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(PriorMode::Separate),
            "shared_pseudoinput" => Ok(PriorMode::SharedPseudoInput),
            _ => Err(Error::Config(format!("unknown prior_mode {s:?}"))),
        }
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorMode::Separate => "separate",
            PriorMode::SharedPseudoInput => "shared_pseudoinput",
        })
    }
}

impl FromStr for DownsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg_pool" => Ok(DownsampleMode::AvgPool),
            "strided_conv" => Ok(DownsampleMode::StridedConv),
            _ => Err(Error::Config(format!("unknown downsample_mode {s:?}"))),
        }
    }
}

impl fmt::Display for DownsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DownsampleMode::AvgPool => "avg_pool",
            DownsampleMode::StridedConv => "strided_conv",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub bottleneck_ratio: f64,
    /// Latent channels per stochastic layer.
    pub zdim: usize,
    pub enc_spec: BlockSpec,
    pub dec_spec: BlockSpec,
    pub image_size: usize,
    pub image_channels: usize,
    pub prior_mode: PriorMode,
    /// Channels per group in the feedforward convolutions.
    pub ff_group_size: usize,
    pub dmol_mixtures: usize,
    pub residual_scaling: bool,
    pub downsample: DownsampleMode,
    /// Consecutive decoder blocks sharing one input state.
    pub independent_group: usize,
}

impl ModelConfig {
    /// The CIFAR-10 32x32 architecture.
    pub fn cifar10() -> Self {
        ModelConfig {
            width: 384,
            bottleneck_ratio: 0.25,
            zdim: 16,
            enc_spec: BlockSpec::parse("32x10,16x10,8x10,4x10,1x10").expect("valid"),
            dec_spec: BlockSpec::parse("1x1,4x2,8x5,16x10,32x11").expect("valid"),
            image_size: 32,
            image_channels: 3,
            prior_mode: PriorMode::Separate,
            ff_group_size: 4,
            dmol_mixtures: 10,
            residual_scaling: true,
            downsample: DownsampleMode::AvgPool,
            independent_group: 1,
        }
    }

    pub fn bottleneck(&self) -> usize {
        ((self.width as f64 * self.bottleneck_ratio).round() as usize).max(1)
    }

    /// Total residual blocks, the depth used by residual scaling.
    pub fn residual_depth(&self) -> usize {
        self.enc_spec.total_blocks() + self.dec_spec.total_blocks()
    }

    pub fn plan(&self) -> Result<ExecutionPlan> {
        group_independent(&self.dec_spec, self.independent_group)
    }

    pub fn stochastic_depth(&self) -> usize {
        self.dec_spec.total_blocks() / self.independent_group.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.zdim == 0 || self.dmol_mixtures == 0 || self.image_channels == 0 {
            return bad("width, zdim, dmol_mixtures and image_channels must be positive".into());
        }
        if !self.width.is_multiple_of(4) {
            return bad(format!("width {} not divisible by 4", self.width));
        }
        if self.ff_group_size == 0 || !self.width.is_multiple_of(self.ff_group_size) {
            return bad(format!(
                "width {} not divisible by ff_group_size {}",
                self.width, self.ff_group_size
            ));
        }
        if !(self.bottleneck_ratio > 0.0 && self.bottleneck_ratio <= 1.0) {
            return bad(format!("bottleneck_ratio {} outside (0, 1]", self.bottleneck_ratio));
        }
        if !self.enc_spec.follows(Direction::Decreasing) {
            return bad(format!("encoder spec {} must have decreasing resolutions", self.enc_spec));
        }
        if !self.dec_spec.follows(Direction::Increasing) {
            return bad(format!("decoder spec {} must have increasing resolutions", self.dec_spec));
        }
        if self.dec_spec.last_resolution() != self.image_size {
            return bad(format!(
                "decoder ends at {} but images are {}",
                self.dec_spec.last_resolution(),
                self.image_size
            ));
        }
        if self.enc_spec.first_resolution() != self.image_size {
            return bad(format!(
                "encoder starts at {} but images are {}",
                self.enc_spec.first_resolution(),
                self.image_size
            ));
        }
        for r in self.dec_spec.resolutions() {
            if !self.enc_spec.resolutions().any(|e| e == r) {
                return bad(format!("decoder resolution {r} has no encoder activations"));
            }
        }
        self.plan()?;
        Ok(())
    }

    /// `key = value` lines, the format shared with run configs and
    /// checkpoints.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("width".into(), self.width.to_string()),
            ("bottleneck_ratio".into(), self.bottleneck_ratio.to_string()),
            ("zdim".into(), self.zdim.to_string()),
            ("enc_blocks".into(), self.enc_spec.to_string()),
            ("dec_blocks".into(), self.dec_spec.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("image_channels".into(), self.image_channels.to_string()),
            ("prior_mode".into(), self.prior_mode.to_string()),
            ("ff_group_size".into(), self.ff_group_size.to_string()),
            ("dmol_mixtures".into(), self.dmol_mixtures.to_string()),
            ("residual_scaling".into(), self.residual_scaling.to_string()),
            ("downsample_mode".into(), self.downsample.to_string()),
            ("independent_group".into(), self.independent_group.to_string()),
        ]
    }

    /// Inverse of [`ModelConfig::to_kv`]; every key must be present.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("missing model key {k}")))
        };
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        let cfg = ModelConfig {
            width: num("width", get("width")?)?,
            bottleneck_ratio: num("bottleneck_ratio", get("bottleneck_ratio")?)?,
            zdim: num("zdim", get("zdim")?)?,
            enc_spec: get("enc_blocks")?.parse()?,
            dec_spec: get("dec_blocks")?.parse()?,
            image_size: num("image_size", get("image_size")?)?,
            image_channels: num("image_channels", get("image_channels")?)?,
            prior_mode: get("prior_mode")?.parse()?,
            ff_group_size: num("ff_group_size", get("ff_group_size")?)?,
            dmol_mixtures: num("dmol_mixtures", get("dmol_mixtures")?)?,
            residual_scaling: num("residual_scaling", get("residual_scaling")?)?,
            downsample: get("downsample_mode")?.parse()?,
            independent_group: num("independent_group", get("independent_group")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
