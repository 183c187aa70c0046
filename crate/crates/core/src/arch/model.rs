use std::collections::BTreeMap;

use rand::Rng;

use super::config::{DownsampleMode, ModelConfig, PriorMode};
use super::params::{dec_block, enc_block, kernel_at, Bound, Parameters};
use super::spec::ExecutionPlan;
use crate::autodiff::{ConvGeom, Graph, Scalar, Tensor, Var};
use crate::dist::{gaussian_kl, gaussian_sample, DmolLayout, GaussianVars};
use crate::error::{Error, Result};

/// Source of the standard-normal noise driving each stochastic layer.
pub trait NoiseSource<T: Scalar> {
    fn draw(&mut self, layer: usize, shape: &[usize]) -> Result<Tensor<T>>;
}

/// Always zero: every latent equals its distribution mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl<T: Scalar> NoiseSource<T> for ZeroNoise {
    fn draw(&mut self, _layer: usize, shape: &[usize]) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(shape))
    }
}

pub struct RngNoise<'a, R: ?Sized>(pub &'a mut R);

impl<T: Scalar, R: Rng + ?Sized> NoiseSource<T> for RngNoise<'_, R> {
    fn draw(&mut self, _layer: usize, shape: &[usize]) -> Result<Tensor<T>> {
        Ok(Tensor::randn(shape, self.0))
    }
}

/// Pre-drawn noise, one tensor per layer.
#[derive(Clone, Debug)]
pub struct FixedNoise<T>(pub Vec<Tensor<T>>);

impl<T: Scalar> NoiseSource<T> for FixedNoise<T> {
    fn draw(&mut self, layer: usize, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self
            .0
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("no fixed noise for layer {layer}")))?;
        if t.shape() != shape {
            return Err(Error::shape(
                "fixed_noise",
                format!("layer {layer}: have {:?}, need {shape:?}", t.shape()),
            ));
        }
        Ok(t.clone())
    }
}

/// Which layers draw from the posterior, and how cold the prior is
/// elsewhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentPolicy {
    /// Layers at resolutions up to and including this one use the
    /// posterior; 0 means none do.
    pub posterior_up_to: usize,
    pub temperature: f64,
    /// Feed the prior network a detached copy of the state, so gradients
    /// reaching the prior stop at the prior's own parameters.
    pub detach_prior_input: bool,
}

impl LatentPolicy {
    pub fn posterior() -> Self {
        LatentPolicy {
            posterior_up_to: usize::MAX,
            temperature: 1.0,
            detach_prior_input: false,
        }
    }

    pub fn prior(temperature: f64) -> Self {
        LatentPolicy {
            posterior_up_to: 0,
            temperature,
            detach_prior_input: false,
        }
    }
}

/// One stochastic layer of a top-down pass.
#[derive(Clone, Debug)]
pub struct LayerRecord {
    pub index: usize,
    pub resolution: usize,
    /// Present when the layer sampled from the posterior.
    pub q: Option<GaussianVars>,
    pub p: GaussianVars,
    pub eps: Var,
    pub z: Var,
    /// Per-element `KL(q || p)`, present with `q`.
    pub kl: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TopDownState {
    pub layers: Vec<LayerRecord>,
    pub xhat: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub state: TopDownState,
    /// Raw DMoL parameters `[N, P, H, W]`.
    pub dmol: Var,
}

/// The network topology; parameters live separately in [`Parameters`].
#[derive(Clone, Debug)]
pub struct Vdvae {
    config: ModelConfig,
    plan: ExecutionPlan,
}

fn conv<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var, k: usize, groups: usize) -> Result<Var> {
    let w = b.get(&format!("{prefix}.w"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    g.conv2d(x, w, Some(bias), ConvGeom::same(k, groups))
}

/// `c4(gelu(c3(gelu(c2(gelu(c1(gelu(x))))))))`.
fn bottleneck<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var, k: usize) -> Result<Var> {
    let mut h = x;
    for (i, kk) in [(1, 1), (2, k), (3, k), (4, 1)] {
        h = g.gelu(h)?;
        h = conv(g, b, &format!("{prefix}.c{i}"), h, kk, 1)?;
    }
    Ok(h)
}

fn feedforward<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var, k: usize, groups: usize) -> Result<Var> {
    let h = g.gelu(x)?;
    let h = conv(g, b, &format!("{prefix}.c1"), h, k, groups)?;
    let h = g.gelu(h)?;
    conv(g, b, &format!("{prefix}.c2"), h, k, groups)
}

fn split_gaussian<T: Scalar>(g: &mut Graph<T>, x: Var, zdim: usize) -> Result<GaussianVars> {
    Ok(GaussianVars {
        mean: g.slice_channels(x, 0, zdim)?,
        log_std: g.slice_channels(x, zdim, zdim)?,
    })
}

impl Vdvae {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = config.plan()?;
        Ok(Vdvae { config, plan })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ExecutionPlan {
        &self.plan
    }

    /// Number of top-down blocks, each with its own latent group.
    pub fn num_layers(&self) -> usize {
        self.config.dec_spec.total_blocks()
    }

    /// Resolution of every decoder layer, in execution order.
    pub fn layer_resolutions(&self) -> Vec<usize> {
        self.config
            .dec_spec
            .entries()
            .iter()
            .flat_map(|&(r, c)| std::iter::repeat_n(r, c))
            .collect()
    }

    pub fn dmol_layout(&self) -> DmolLayout {
        DmolLayout::new(self.config.dmol_mixtures, self.config.image_channels)
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Parameters<T>> {
        Parameters::init(&self.config, rng)
    }

    fn ff_groups(&self) -> usize {
        self.config.width / self.config.ff_group_size
    }

    /// `h + c4(...)` residual bottleneck of the encoder.
    pub fn encoder_block<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, index: usize, h: Var) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 4 || shape[1] != self.config.width {
            return Err(Error::shape("encoder_block", format!("expected width {}, got {shape:?}", self.config.width)));
        }
        let delta = bottleneck(g, b, &enc_block(index), h, kernel_at(shape[2]))?;
        g.add(h, delta)
    }

    /// Bottom-up pass over normalized input `[N, C, D, D]`, returning the
    /// activations after the last block at every resolution.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<BTreeMap<usize, Var>> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != cfg.image_channels || shape[2] != cfg.image_size || shape[3] != cfg.image_size {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected [N, {}, {}, {}], got {shape:?}",
                    cfg.image_channels, cfg.image_size, cfg.image_size
                ),
            ));
        }
        let mut h = conv(g, b, "enc.in", x, 3, 1)?;
        let mut acts = BTreeMap::new();
        let mut index = 0;
        let mut prev: Option<usize> = None;
        for &(res, count) in cfg.enc_spec.entries() {
            if let Some(p) = prev {
                let factor = p / res;
                h = match cfg.downsample {
                    DownsampleMode::AvgPool => g.avg_pool(h, factor)?,
                    DownsampleMode::StridedConv => {
                        let w = b.get(&format!("enc.down{res:03}.w"))?;
                        let bias = b.get(&format!("enc.down{res:03}.b"))?;
                        g.conv2d(h, w, Some(bias), ConvGeom::new(factor, 0, 1))?
                    }
                };
            }
            for _ in 0..count {
                h = self.encoder_block(g, b, index, h)?;
                index += 1;
            }
            acts.insert(res, h);
            prev = Some(res);
        }
        Ok(acts)
    }

    /// One top-down block. `h` carries the encoder activations when the
    /// layer samples from the posterior.
    #[allow(clippy::too_many_arguments)]
    pub fn topdown_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        index: usize,
        xhat: Var,
        h: Option<Var>,
        policy: LatentPolicy,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<(Var, LayerRecord)> {
        let cfg = &self.config;
        let shape = g.shape(xhat).to_vec();
        let (n, res) = (shape[0], shape[2]);
        if let Some(h) = h {
            if g.shape(h) != shape.as_slice() {
                return Err(Error::shape(
                    "topdown_block",
                    format!("state {shape:?} vs activations {:?}", g.shape(h)),
                ));
            }
        }
        let prefix = dec_block(index);
        let k = kernel_at(res);
        let q = match h {
            Some(h) => {
                let input = g.concat_channels(&[xhat, h])?;
                let out = bottleneck(g, b, &format!("{prefix}.q"), input, k)?;
                Some(split_gaussian(g, out, cfg.zdim)?)
            }
            None => None,
        };
        let prior_in = if policy.detach_prior_input { g.detach(xhat) } else { xhat };
        let p = match cfg.prior_mode {
            PriorMode::Separate => {
                let out = bottleneck(g, b, &format!("{prefix}.p"), prior_in, k)?;
                split_gaussian(g, out, cfg.zdim)?
            }
            PriorMode::SharedPseudoInput => {
                let pseudo = feedforward(g, b, &format!("{prefix}.ff1"), prior_in, k, self.ff_groups())?;
                let input = g.concat_channels(&[prior_in, pseudo])?;
                let out = bottleneck(g, b, &format!("{prefix}.q"), input, k)?;
                split_gaussian(g, out, cfg.zdim)?
            }
        };
        let eps = noise.draw(index, &[n, cfg.zdim, res, res])?;
        let eps = g.constant(eps);
        let (z, kl) = match q {
            Some(q) => (gaussian_sample(g, q, eps, T::one())?, Some(gaussian_kl(g, q, p)?)),
            None => (gaussian_sample(g, p, eps, T::lit(policy.temperature))?, None),
        };
        let zp = conv(g, b, &format!("{prefix}.zproj"), z, 1, 1)?;
        let u = g.add(xhat, zp)?;
        let delta = feedforward(g, b, &format!("{prefix}.ff2"), u, k, self.ff_groups())?;
        let out = g.add(u, delta)?;
        let record = LayerRecord {
            index,
            resolution: res,
            q,
            p,
            eps,
            z,
            kl,
        };
        Ok((out, record))
    }

    /// Top-down pass from the learned initial state. `acts` may be absent
    /// when no layer uses the posterior.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        acts: Option<&BTreeMap<usize, Var>>,
        batch: usize,
        policy: LatentPolicy,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<TopDownState> {
        let cfg = &self.config;
        let x0 = b.get("dec.x0")?;
        let mut xhat = g.broadcast(x0, &[batch, cfg.width, 1, 1])?;
        let mut cur = 1;
        let mut offsets = BTreeMap::new();
        let mut acc = 0;
        for &(res, count) in cfg.dec_spec.entries() {
            offsets.insert(res, acc);
            acc += count;
        }
        let mut layers = Vec::with_capacity(acc);
        for group in &self.plan.groups {
            let res = group.resolution;
            if res != cur {
                xhat = g.nn_upsample(xhat, res / cur)?;
                cur = res;
            }
            let h = if res <= policy.posterior_up_to {
                let a = acts
                    .and_then(|a| a.get(&res).copied())
                    .ok_or_else(|| Error::Invalid(format!("no encoder activations at resolution {res}")))?;
                Some(a)
            } else {
                None
            };
            let base = xhat;
            let mut next = base;
            for i in 0..group.len {
                let index = offsets[&res] + group.first + i;
                let (out, rec) = self.topdown_block(g, b, index, base, h, policy, noise)?;
                layers.push(rec);
                next = if group.len == 1 {
                    out
                } else {
                    let d = g.sub(out, base)?;
                    g.add(next, d)?
                };
            }
            xhat = next;
        }
        if cur != cfg.image_size {
            xhat = g.nn_upsample(xhat, cfg.image_size / cur)?;
        }
        Ok(TopDownState { layers, xhat })
    }

    /// 1x1 convolution from the final state to DMoL parameters.
    pub fn output_head<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, xhat: Var) -> Result<Var> {
        conv(g, b, "out", xhat, 1, 1)
    }

    /// Encoder, top-down decoder and output head on normalized input.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        policy: LatentPolicy,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<Forward> {
        let batch = g.shape(x)[0];
        let acts = if policy.posterior_up_to > 0 {
            Some(self.encode(g, b, x)?)
        } else {
            None
        };
        let state = self.decode(g, b, acts.as_ref(), batch, policy, noise)?;
        let dmol = self.output_head(g, b, state.xhat)?;
        Ok(Forward { state, dmol })
    }

    /// Unconditional pass; never touches the encoder.
    pub fn sample_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        batch: usize,
        temperature: f64,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<Forward> {
        let state = self.decode(g, b, None, batch, LatentPolicy::prior(temperature), noise)?;
        let dmol = self.output_head(g, b, state.xhat)?;
        Ok(Forward { state, dmol })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::BlockSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(prior: PriorMode) -> ModelConfig {
        ModelConfig {
            width: 8,
            bottleneck_ratio: 0.25,
            zdim: 2,
            enc_spec: BlockSpec::parse("8x1,4x1,1x1").unwrap(),
            dec_spec: BlockSpec::parse("1x1,4x2,8x2").unwrap(),
            image_size: 8,
            image_channels: 3,
            prior_mode: prior,
            ff_group_size: 4,
            dmol_mixtures: 2,
            residual_scaling: true,
            downsample: DownsampleMode::AvgPool,
            independent_group: 1,
        }
    }

    fn input(n: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[n, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn encoder_is_identity_at_init() {
        let m = Vdvae::new(config(PriorMode::Separate)).unwrap();
        let p: Parameters<f64> = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(input(2, 1));
        let acts = m.encode(&mut g, &b, x).unwrap();
        assert_eq!(acts.keys().copied().collect::<Vec<_>>(), vec![1, 4, 8]);
        let stem = conv(&mut g, &b, "enc.in", x, 3, 1).unwrap();
        assert_eq!(g.value(acts[&8]), g.value(stem));
        let pooled = g.avg_pool(stem, 2).unwrap();
        assert_eq!(g.value(acts[&4]), g.value(pooled));
        assert_eq!(g.shape(acts[&1]), &[2, 8, 1, 1]);
    }

    #[test]
    fn identical_rows_give_identical_activations() {
        let m = Vdvae::new(config(PriorMode::Separate)).unwrap();
        let mut p: Parameters<f64> = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // Perturb the zero-initialized convs so the blocks are not identities.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        let one = input(1, 4);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![2, 3, 8, 8], data).unwrap());
        let acts = m.encode(&mut g, &b, x).unwrap();
        for v in acts.values() {
            let d = g.value(*v).data();
            let (a, c) = d.split_at(d.len() / 2);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn zero_noise_gives_means_and_temperature_zero_gives_prior_mean() {
        for prior in [PriorMode::Separate, PriorMode::SharedPseudoInput] {
            let m = Vdvae::new(config(prior)).unwrap();
            let p: Parameters<f64> = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let x = g.constant(input(2, 1));
            let f = m.forward(&mut g, &b, x, LatentPolicy::posterior(), &mut ZeroNoise).unwrap();
            assert_eq!(f.state.layers.len(), 5);
            for rec in &f.state.layers {
                assert_eq!(g.value(rec.z), g.value(rec.q.unwrap().mean));
                assert!(g.value(rec.kl.unwrap()).data().iter().all(|&v| v >= -1e-12));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let s = m.sample_forward(&mut g, &b, 3, 0.0, &mut RngNoise(&mut rng)).unwrap();
            for rec in &s.state.layers {
                assert!(rec.q.is_none() && rec.kl.is_none());
                assert_eq!(g.value(rec.z), g.value(rec.p.mean));
            }
            assert_eq!(g.shape(s.dmol), &[3, m.dmol_layout().param_channels(), 8, 8]);
        }
    }

    #[test]
    fn shared_prior_equals_posterior_when_activations_match_pseudo_input() {
        let m = Vdvae::new(config(PriorMode::SharedPseudoInput)).unwrap();
        let p: Parameters<f64> = m.init_params(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let xhat = g.constant(Tensor::randn(&[1, 8, 4, 4], &mut ChaCha8Rng::seed_from_u64(3)));
        let pseudo = feedforward(&mut g, &b, "dec.b001.ff1", xhat, 3, 2).unwrap();
        let mut noise = ZeroNoise;
        let (_, rec) = m.topdown_block(&mut g, &b, 1, xhat, Some(pseudo), LatentPolicy::posterior(), &mut noise).unwrap();
        assert!(g.value(rec.kl.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partial_posterior_boundaries() {
        let m = Vdvae::new(config(PriorMode::Separate)).unwrap();
        let p: Parameters<f64> = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let run = |policy: LatentPolicy| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let x = g.constant(input(1, 1));
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let f = m.forward(&mut g, &b, x, policy, &mut RngNoise(&mut rng)).unwrap();
            let used: Vec<bool> = f.state.layers.iter().map(|r| r.q.is_some()).collect();
            (used, g.value(f.dmol).clone())
        };
        let (all, full) = run(LatentPolicy::posterior());
        assert!(all.iter().all(|&u| u));
        let (at_max, same) = run(LatentPolicy {
            posterior_up_to: 8,
            temperature: 0.3,
            ..LatentPolicy::posterior()
        });
        assert!(at_max.iter().all(|&u| u));
        assert_eq!(full, same);
        let (partial, _) = run(LatentPolicy {
            posterior_up_to: 4,
            temperature: 0.4,
            ..LatentPolicy::posterior()
        });
        assert_eq!(partial, vec![true, true, true, false, false]);
        let (none, _) = run(LatentPolicy::prior(1.0));
        assert!(none.iter().all(|&u| !u));
    }

    #[test]
    fn missing_activations_rejected() {
        let m = Vdvae::new(config(PriorMode::Separate)).unwrap();
        let p: Parameters<f64> = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        assert!(m.decode(&mut g, &b, None, 1, LatentPolicy::posterior(), &mut ZeroNoise).is_err());
    }

    #[test]
    fn grouped_plan_shares_inputs() {
        let mut c = config(PriorMode::Separate);
        c.dec_spec = BlockSpec::parse("1x2,4x2,8x4").unwrap();
        let seq = Vdvae::new(c.clone()).unwrap();
        c.independent_group = 2;
        let grouped = Vdvae::new(c).unwrap();
        assert_eq!(grouped.plan().stochastic_depth(), 4);
        let mut p: Parameters<f64> = seq.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        // Give the two 1x1 blocks identical parameters.
        let names: Vec<String> = p.names().filter(|n| n.starts_with("dec.b000.")).cloned().collect();
        for n in names {
            let t = p.get(&n).unwrap().clone();
            *p.get_mut(&n.replace("b000", "b001")).unwrap() = t;
        }
        let prior_means = |m: &Vdvae| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let s = m.sample_forward(&mut g, &b, 1, 1.0, &mut ZeroNoise).unwrap();
            assert_eq!(s.state.layers.len(), 8);
            let l = &s.state.layers;
            (g.value(l[0].p.mean).clone(), g.value(l[1].p.mean).clone())
        };
        let (a, b) = prior_means(&grouped);
        assert_eq!(a, b);
        let (a, b) = prior_means(&seq);
        assert_ne!(a, b);
    }
}
