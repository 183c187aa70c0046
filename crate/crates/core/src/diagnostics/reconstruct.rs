use rand::Rng;

use crate::arch::{LatentPolicy, Parameters, RngNoise, Vdvae};
use crate::autodiff::{Graph, Tensor};
use crate::dist::{dmol_mode, dmol_sample, DmolParams};
use crate::error::{Error, Result};
use crate::trainer::NormStats;

/// Default prior temperature for layers completed from the prior.
pub const PARTIAL_TEMPERATURE: f64 = 0.4;

/// Cumulative share of latent scalars at or below each decoder
/// resolution: `(resolution, fraction)` in decoder order.
pub fn latent_fractions(model: &Vdvae) -> Vec<(usize, f64)> {
    let zdim = model.config().zdim;
    let per: Vec<(usize, usize)> = model
        .config()
        .dec_spec
        .entries()
        .iter()
        .map(|&(r, c)| (r, c * zdim * r * r))
        .collect();
    let total: usize = per.iter().map(|p| p.1).sum();
    let mut acc = 0;
    per.iter()
        .map(|&(r, n)| {
            acc += n;
            (r, acc as f64 / total as f64)
        })
        .collect()
}

/// How pixels are read out of the DMoL head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelReadout {
    Sample,
    /// Means of the most probable component.
    Mode,
}

fn readout<R: Rng + ?Sized>(params: DmolParams<f32>, how: PixelReadout, rng: &mut R) -> Result<Vec<u8>> {
    match how {
        PixelReadout::Sample => dmol_sample(&params, rng),
        PixelReadout::Mode => dmol_mode(&params),
    }
}

/// Decode `n` images from NHWC `pixels` using posterior latents up to
/// resolution `up_to` (0 for none) and prior latents at `temperature`
/// above it. Returns NHWC bytes.
#[allow(clippy::too_many_arguments)]
pub fn partial_reconstruct<R: Rng + ?Sized>(
    params: &Parameters<f32>,
    model: &Vdvae,
    norm: &NormStats,
    pixels: &[u8],
    n: usize,
    up_to: usize,
    temperature: f64,
    how: PixelReadout,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let cfg = model.config();
    if up_to != 0 && !cfg.dec_spec.resolutions().any(|r| r == up_to) {
        return Err(Error::Invalid(format!(
            "resolution {up_to} is not in decoder spec {}",
            cfg.dec_spec
        )));
    }
    let s = cfg.image_size;
    let input: Tensor<f32> = norm.normalize(pixels, n, s, s)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(input);
    let policy = LatentPolicy {
        posterior_up_to: up_to,
        temperature,
        ..LatentPolicy::posterior()
    };
    let fwd = if up_to == 0 {
        model.sample_forward(&mut g, &bound, n, temperature, &mut RngNoise(&mut *rng))?
    } else {
        model.forward(&mut g, &bound, x, policy, &mut RngNoise(&mut *rng))?
    };
    let dp = DmolParams::new(model.dmol_layout(), g.value(fwd.dmol).clone())?;
    readout(dp, how, rng)
}

/// Unconditional samples at `temperature`, as NHWC bytes. Temperature 0
/// reads out the pixel mode so the result is fully deterministic.
pub fn sample<R: Rng + ?Sized>(
    params: &Parameters<f32>,
    model: &Vdvae,
    n: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let fwd = model.sample_forward(&mut g, &bound, n, temperature, &mut RngNoise(&mut *rng))?;
    let dp = DmolParams::new(model.dmol_layout(), g.value(fwd.dmol).clone())?;
    let how = if temperature == 0.0 { PixelReadout::Mode } else { PixelReadout::Sample };
    readout(dp, how, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{BlockSpec, DownsampleMode, ModelConfig, PriorMode};

    #[test]
    fn fraction_of_coarsest_latents() {
        let cfg = ModelConfig {
            width: 16,
            bottleneck_ratio: 0.25,
            zdim: 16,
            enc_spec: BlockSpec::parse("8x1,4x1,1x1").unwrap(),
            dec_spec: BlockSpec::parse("1x1,4x2,8x5").unwrap(),
            image_size: 8,
            image_channels: 3,
            prior_mode: PriorMode::Separate,
            ff_group_size: 4,
            dmol_mixtures: 2,
            residual_scaling: true,
            downsample: DownsampleMode::AvgPool,
            independent_group: 1,
        };
        let f = latent_fractions(&Vdvae::new(cfg).unwrap());
        let expect = 16.0 / (16.0 + 512.0 + 5120.0);
        assert!((f[0].1 - expect).abs() < 1e-15);
        assert!((f[0].1 - 0.0028).abs() < 1e-4);
        assert_eq!(f[2], (8, 1.0));
    }
}
