use rand::Rng;

use crate::arch::{BlockSpec, DownsampleMode, FixedNoise, ModelConfig, Parameters, PriorMode, Vdvae};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

/// Finite-difference step for the Jacobian.
pub const PROP2_STEP: f64 = 1e-6;

/// A decoder-only miniature at 1x1 resolution with `layers` stochastic
/// layers of `zdim` latents each.
pub fn prop2_config(layers: usize, zdim: usize) -> ModelConfig {
    ModelConfig {
        width: 4,
        bottleneck_ratio: 0.5,
        zdim,
        enc_spec: BlockSpec::parse("1x1").expect("valid"),
        dec_spec: BlockSpec::from_ladder(vec![(1, layers)]).expect("valid"),
        image_size: 1,
        image_channels: 1,
        prior_mode: PriorMode::Separate,
        ff_group_size: 2,
        dmol_mixtures: 1,
        residual_scaling: true,
        downsample: DownsampleMode::AvgPool,
        independent_group: 1,
    }
}

/// Random parameters with every tensor perturbed, including those that
/// start at zero, so that all layers actually depend on earlier latents.
pub fn prop2_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Parameters<f64>> {
    let mut p = Parameters::<f64>::init(cfg, rng)?;
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    Ok(p)
}

/// The map `eps -> z` of the prior in sample mode, with all layers
/// concatenated in order. Also returns the prior log-std per latent.
pub fn prior_map(model: &Vdvae, params: &Parameters<f64>, eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let zdim = model.config().zdim;
    let layers = model.num_layers();
    if eps.len() != layers * zdim || model.config().image_size != 1 {
        return Err(Error::Invalid("prior map expects a 1x1 model and one eps per latent".into()));
    }
    let noise = FixedNoise(
        eps.chunks(zdim)
            .map(|c| Tensor::new(vec![1, zdim, 1, 1], c.to_vec()))
            .collect::<Result<Vec<_>>>()?,
    );
    let mut noise = noise;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let f = model.sample_forward(&mut g, &bound, 1, 1.0, &mut noise)?;
    let mut z = Vec::with_capacity(eps.len());
    let mut log_std = Vec::with_capacity(eps.len());
    for rec in &f.state.layers {
        z.extend_from_slice(g.value(rec.z).data());
        log_std.extend_from_slice(g.value(rec.p.log_std).data());
    }
    Ok((z, log_std))
}

/// Central-difference Jacobian `J[i][j] = dz_i / d eps_j`.
pub fn prior_jacobian(model: &Vdvae, params: &Parameters<f64>, eps: &[f64], step: f64) -> Result<Vec<Vec<f64>>> {
    let d = eps.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut plus = eps.to_vec();
        plus[j] += step;
        let mut minus = eps.to_vec();
        minus[j] -= step;
        let (zp, _) = prior_map(model, params, &plus)?;
        let (zm, _) = prior_map(model, params, &minus)?;
        for i in 0..d {
            jac[i][j] = (zp[i] - zm[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prop2Report {
    /// Largest `|J|` above the block diagonal.
    pub max_upper: f64,
    /// Largest `|J|` off the diagonal inside diagonal blocks.
    pub max_block_offdiag: f64,
    pub min_diagonal: f64,
    pub tolerance: f64,
}

impl Prop2Report {
    pub fn passed(&self) -> bool {
        self.max_upper < self.tolerance && self.max_block_offdiag < self.tolerance && self.min_diagonal > 0.0
    }
}

/// Check that the prior's reparameterized map is block lower triangular
/// with positive diagonal diagonal blocks.
pub fn prop2_jacobian_check<R: Rng + ?Sized>(layers: usize, zdim: usize, tolerance: f64, rng: &mut R) -> Result<Prop2Report> {
    let cfg = prop2_config(layers, zdim);
    let model = Vdvae::new(cfg.clone())?;
    let params = prop2_params(&cfg, rng)?;
    let eps: Vec<f64> = (0..layers * zdim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let jac = prior_jacobian(&model, &params, &eps, PROP2_STEP)?;
    let layer = |i: usize| i / zdim;
    let mut r = Prop2Report {
        max_upper: 0.0,
        max_block_offdiag: 0.0,
        min_diagonal: f64::INFINITY,
        tolerance,
    };
    for (i, row) in jac.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if layer(j) > layer(i) {
                r.max_upper = r.max_upper.max(v.abs());
            } else if layer(j) == layer(i) {
                if i == j {
                    r.min_diagonal = r.min_diagonal.min(v);
                } else {
                    r.max_block_offdiag = r.max_block_offdiag.max(v.abs());
                }
            }
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_layer_jacobian_is_prior_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = prop2_config(1, 3);
        let model = Vdvae::new(cfg.clone()).unwrap();
        let params = prop2_params(&cfg, &mut rng).unwrap();
        let eps = [0.3, -0.2, 1.1];
        let jac = prior_jacobian(&model, &params, &eps, PROP2_STEP).unwrap();
        let (_, log_std) = prior_map(&model, &params, &eps).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { log_std[i].exp() } else { 0.0 };
                assert!((jac[i][j] - expect).abs() < 1e-8, "{i} {j}");
            }
        }
    }

    #[test]
    fn three_layers_are_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = prop2_jacobian_check(3, 2, 1e-9, &mut rng).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn permuting_first_layer_noise_permutes_standardized_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = prop2_config(2, 3);
        let model = Vdvae::new(cfg.clone()).unwrap();
        let params = prop2_params(&cfg, &mut rng).unwrap();
        let eps = [0.5, -1.0, 0.25, 0.1, 0.2, 0.3];
        let swapped = [0.25, 0.5, -1.0, 0.1, 0.2, 0.3];
        let (z0, ls) = prior_map(&model, &params, &eps).unwrap();
        let (z1, _) = prior_map(&model, &params, &swapped).unwrap();
        let (mu, _) = prior_map(&model, &params, &[0.0; 6]).unwrap();
        let std = |i: usize, z: &[f64]| (z[i] - mu[i]) / ls[i].exp();
        for (i, &k) in [2usize, 0, 1].iter().enumerate() {
            assert!((std(i, &z1) - std(k, &z0)).abs() < 1e-12);
        }
    }
}
