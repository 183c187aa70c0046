//! Verification suites: finite-difference gradients of every differentiable
//! op and model block, DMoL normalization, and the two structural
//! properties of the top-down hierarchy.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{Bound, BlockSpec, LatentPolicy, DownsampleMode, ModelConfig, Parameters, PriorMode, Vdvae};
use crate::autodiff::gradcheck::{check, GradCase, GradReport, F32_RTOL, F32_STEP, F64_RTOL, F64_STEP};
use crate::autodiff::{ConvGeom, Graph, Scalar, Tensor, Var};
use crate::dist::{
    dmol_logprob, dmol_logprob_values, dmol_sample, gaussian_kl, gaussian_sample, kl_standard_normal, DmolLayout, DmolParams,
    GaussianVars, LOG_SCALE_MIN,
};
use crate::theory::{prop1_equivalence_check, prop2_jacobian_check, DiscreteArModel, Prop2Report};
use crate::error::Result;

/// Names of the checked operations, in suite order.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "tanh",
    "softplus",
    "gelu",
    "sum",
    "mean",
    "broadcast",
    "reshape",
    "concat",
    "slice",
    "linear",
    "conv2d",
    "avg_pool",
    "nn_upsample",
    "dmol_logprob",
    "gaussian_sample",
    "gaussian_kl",
    "kl_standard_normal",
    "encoder_block",
    "topdown_block",
];

#[derive(Clone, Debug)]
enum Kind {
    Binary(&'static str),
    Unary(&'static str),
    Scale(f64),
    AddScalar(f64),
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Concat,
    Slice(usize, usize),
    Linear,
    Conv(ConvGeom),
    Pool(usize),
    Upsample(usize),
    Dmol(DmolLayout, Tensor<f64>),
    Sample(Tensor<f64>, f64),
    Kl,
    KlStandard,
    Model(Box<ModelConfig>, Vec<String>, Box<Tensor<f64>>),
}

/// One randomly shaped instance of an operation.
#[derive(Clone, Debug)]
pub struct OpCase {
    op: &'static str,
    kind: Kind,
    inputs: Vec<Tensor<f64>>,
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

fn miniature(rng: &mut ChaCha8Rng, prior: PriorMode) -> ModelConfig {
    ModelConfig {
        width: 4,
        bottleneck_ratio: 0.5,
        zdim: rng.random_range(1..=2),
        enc_spec: BlockSpec::parse("2x1,1x1").expect("valid"),
        dec_spec: BlockSpec::parse("1x1,2x1").expect("valid"),
        image_size: 2,
        image_channels: 1,
        prior_mode: prior,
        ff_group_size: 2,
        dmol_mixtures: 1,
        residual_scaling: true,
        downsample: DownsampleMode::AvgPool,
        independent_group: 1,
    }
}

/// Randomized model parameters restricted to one block's prefix. Zero
/// initializations are perturbed so that every parameter matters.
fn block_params(rng: &mut ChaCha8Rng, cfg: &ModelConfig, prefix: &str) -> (Vec<String>, Vec<Tensor<f64>>) {
    let p = Parameters::<f64>::init(cfg, rng).expect("valid miniature");
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in p.iter() {
        if name.starts_with(prefix) {
            names.push(name.clone());
            tensors.push(t.clone());
        }
    }
    for t in tensors.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    (names, tensors)
}

impl OpCase {
    /// Draw a random instance of `op`.
    pub fn random(op: &'static str, rng: &mut ChaCha8Rng) -> OpCase {
        let r = |rng: &mut ChaCha8Rng| rng.random_range(1..=4usize);
        let shape4 = |rng: &mut ChaCha8Rng| random_shape(rng, 4, 3);
        let (kind, inputs) = match op {
            "add" | "sub" | "mul" => {
                let rank = r(rng);
                let s = random_shape(rng, rank, 4);
                let a = uniform(rng, &s, -2.0, 2.0);
                let b = uniform(rng, &s, -2.0, 2.0);
                (Kind::Binary(op), vec![a, b])
            }
            "exp" | "tanh" | "softplus" | "gelu" | "sum" | "mean" => {
                let rank = r(rng);
                let s = random_shape(rng, rank, 4);
                (Kind::Unary(op), vec![uniform(rng, &s, -2.5, 2.5)])
            }
            "log" => {
                let rank = r(rng);
                let s = random_shape(rng, rank, 4);
                (Kind::Unary(op), vec![uniform(rng, &s, 0.3, 3.0)])
            }
            "scale" | "add_scalar" => {
                let rank = r(rng);
                let s = random_shape(rng, rank, 4);
                let c = rng.random_range(-2.0..2.0);
                let kind = if op == "scale" { Kind::Scale(c) } else { Kind::AddScalar(c) };
                (kind, vec![uniform(rng, &s, -2.0, 2.0)])
            }
            "broadcast" => {
                let rank = r(rng);
                let dst = random_shape(rng, rank, 4);
                let src: Vec<usize> = dst.iter().map(|&d| if rng.random_bool(0.5) { 1 } else { d }).collect();
                (Kind::Broadcast(dst), vec![uniform(rng, &src, -1.0, 1.0)])
            }
            "reshape" => {
                let s = shape4(rng);
                let total: usize = s.iter().product();
                (Kind::Reshape(vec![total]), vec![uniform(rng, &s, -1.0, 1.0)])
            }
            "concat" => {
                let s = shape4(rng);
                let parts = rng.random_range(2..=3);
                let inputs = (0..parts)
                    .map(|_| {
                        let mut p = s.clone();
                        p[1] = rng.random_range(1..=3);
                        uniform(rng, &p, -1.0, 1.0)
                    })
                    .collect();
                (Kind::Concat, inputs)
            }
            "slice" => {
                let mut s = shape4(rng);
                s[1] = rng.random_range(2..=5);
                let start = rng.random_range(0..s[1]);
                let len = rng.random_range(1..=s[1] - start);
                (Kind::Slice(start, len), vec![uniform(rng, &s, -1.0, 1.0)])
            }
            "linear" => {
                let (n, fin, fout) = (r(rng), r(rng) + 1, r(rng));
                let x = uniform(rng, &[n, fin], -1.0, 1.0);
                let w = uniform(rng, &[fout, fin], -1.0, 1.0);
                let b = uniform(rng, &[fout], -1.0, 1.0);
                (Kind::Linear, vec![x, w, b])
            }
            "conv2d" => {
                let groups = rng.random_range(1..=2);
                let cin = groups * rng.random_range(1..=2);
                let cout = groups * rng.random_range(1..=2);
                let k = if rng.random_bool(0.5) { 1 } else { 3 };
                let stride = rng.random_range(1..=2);
                let padding = if k == 3 { rng.random_range(0..=1) } else { 0 };
                let side = rng.random_range(k.max(2)..=5);
                let n = rng.random_range(1..=2);
                let x = uniform(rng, &[n, cin, side, side], -1.0, 1.0);
                let w = uniform(rng, &[cout, cin / groups, k, k], -1.0, 1.0);
                let b = uniform(rng, &[cout], -1.0, 1.0);
                (Kind::Conv(ConvGeom::new(stride, padding, groups)), vec![x, w, b])
            }
            "avg_pool" => {
                let f = rng.random_range(1..=3);
                let (n, c, m) = (r(rng).min(2), r(rng), rng.random_range(1..=2));
                let x = uniform(rng, &[n, c, f * m, f * m], -1.0, 1.0);
                (Kind::Pool(f), vec![x])
            }
            "nn_upsample" => {
                let f = rng.random_range(1..=3);
                let s = shape4(rng);
                (Kind::Upsample(f), vec![uniform(rng, &s, -1.0, 1.0)])
            }
            "dmol_logprob" => {
                let channels = if rng.random_bool(0.5) { 1 } else { 3 };
                let layout = DmolLayout::new(rng.random_range(1..=3), channels);
                let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2));
                let mut raw = uniform(rng, &[n, layout.param_channels(), h, w], -1.0, 1.0);
                // Keep log-scales away from the clamp, where the gradient
                // is discontinuous.
                let hw = h * w;
                for b in 0..n {
                    for k in 0..layout.mixtures {
                        for c in 0..channels {
                            let ch = layout.log_scale(k, c);
                            for p in 0..hw {
                                raw.data_mut()[(b * layout.param_channels() + ch) * hw + p] = rng.random_range(-3.0..-0.5);
                            }
                        }
                    }
                }
                let target = Tensor::from_fn(&[n, channels, h, w], |_| {
                    let level: u32 = match rng.random_range(0..6) {
                        0 => 0,
                        1 => 255,
                        _ => rng.random_range(0..=255),
                    };
                    level as f64 / 127.5 - 1.0
                });
                (Kind::Dmol(layout, target), vec![raw])
            }
            "gaussian_sample" => {
                let s = shape4(rng);
                let eps = Tensor::randn(&s, rng);
                let t = rng.random_range(0.1..1.5);
                let m = uniform(rng, &s, -1.0, 1.0);
                let ls = uniform(rng, &s, -1.0, 1.0);
                (Kind::Sample(eps, t), vec![m, ls])
            }
            "gaussian_kl" => {
                let s = shape4(rng);
                let inputs = (0..4).map(|_| uniform(rng, &s, -1.0, 1.0)).collect();
                (Kind::Kl, inputs)
            }
            "kl_standard_normal" => {
                let s = shape4(rng);
                (Kind::KlStandard, vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)])
            }
            "encoder_block" | "topdown_block" => {
                let prior = if rng.random_bool(0.5) { PriorMode::Separate } else { PriorMode::SharedPseudoInput };
                let cfg = miniature(rng, prior);
                let (prefix, side) = if op == "encoder_block" { ("enc.b000.", 2) } else { ("dec.b001.", 2) };
                let (names, mut inputs) = block_params(rng, &cfg, prefix);
                let state = uniform(rng, &[1, cfg.width, side, side], -1.0, 1.0);
                inputs.push(state);
                if op == "topdown_block" {
                    inputs.push(uniform(rng, &[1, cfg.width, side, side], -1.0, 1.0));
                }
                let eps = Tensor::randn(&[1, cfg.zdim, side, side], rng);
                (Kind::Model(Box::new(cfg), names, Box::new(eps)), inputs)
            }
            other => panic!("unknown op {other}"),
        };
        OpCase { op, kind, inputs }
    }
}

struct EpsNoise<T>(Tensor<T>);

impl<T: Scalar> crate::arch::NoiseSource<T> for EpsNoise<T> {
    fn draw(&mut self, _layer: usize, _shape: &[usize]) -> Result<Tensor<T>> {
        Ok(self.0.clone())
    }
}

impl GradCase for OpCase {
    fn name(&self) -> String {
        let shapes: Vec<String> = self.inputs.iter().map(|t| format!("{:?}", t.shape())).collect();
        format!("{} {}", self.op, shapes.join(" "))
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.inputs.clone()
    }

    fn build<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        match &self.kind {
            Kind::Binary("add") => g.add(v[0], v[1]),
            Kind::Binary("sub") => g.sub(v[0], v[1]),
            Kind::Binary(_) => g.mul(v[0], v[1]),
            Kind::Unary("exp") => g.exp(v[0]),
            Kind::Unary("log") => g.log(v[0]),
            Kind::Unary("tanh") => g.tanh(v[0]),
            Kind::Unary("softplus") => g.softplus(v[0]),
            Kind::Unary("gelu") => g.gelu(v[0]),
            Kind::Unary("sum") => g.sum(v[0]),
            Kind::Unary(_) => g.mean(v[0]),
            Kind::Scale(c) => g.scale(v[0], T::lit(*c)),
            Kind::AddScalar(c) => g.add_scalar(v[0], T::lit(*c)),
            Kind::Broadcast(s) => g.broadcast(v[0], s),
            Kind::Reshape(s) => g.reshape(v[0], s),
            Kind::Concat => g.concat_channels(v),
            Kind::Slice(start, len) => g.slice_channels(v[0], *start, *len),
            Kind::Linear => g.linear(v[0], v[1], Some(v[2])),
            Kind::Conv(geom) => g.conv2d(v[0], v[1], Some(v[2]), *geom),
            Kind::Pool(f) => g.avg_pool(v[0], *f),
            Kind::Upsample(f) => g.nn_upsample(v[0], *f),
            Kind::Dmol(layout, target) => dmol_logprob(g, &target.cast(), v[0], *layout),
            Kind::Sample(eps, t) => {
                let e = g.constant(eps.cast());
                let p = GaussianVars { mean: v[0], log_std: v[1] };
                gaussian_sample(g, p, e, T::lit(*t))
            }
            Kind::Kl => {
                let q = GaussianVars { mean: v[0], log_std: v[1] };
                let p = GaussianVars { mean: v[2], log_std: v[3] };
                gaussian_kl(g, q, p)
            }
            Kind::KlStandard => kl_standard_normal(g, GaussianVars { mean: v[0], log_std: v[1] }),
            Kind::Model(cfg, names, eps) => {
                let model = Vdvae::new((**cfg).clone())?;
                let bound = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()).collect::<BTreeMap<_, _>>());
                let state = v[names.len()];
                if self.op == "encoder_block" {
                    model.encoder_block(g, &bound, 0, state)
                } else {
                    let h = v[names.len() + 1];
                    let mut noise = EpsNoise(eps.cast::<T>());
                    let (out, rec) = model.topdown_block(g, &bound, 1, state, Some(h), LatentPolicy::posterior(), &mut noise)?;
                    // Include the KL so the posterior and prior nets are
                    // checked through both paths.
                    let kl = rec.kl.expect("posterior layer");
                    let shape = g.shape(out).to_vec();
                    let kl = g.sum(kl)?;
                    let kl = g.reshape(kl, &[1, 1, 1, 1])?;
                    let kl = g.broadcast(kl, &shape)?;
                    g.add(out, kl)
                }
            }
        }
    }
}

/// Outcome of checking one case at one precision.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub op: &'static str,
    pub report: GradReport,
    pub tolerance: f64,
    pub passed: bool,
}

/// Check `per_op` random instances of every op in f64 and f32.
pub fn grad_suite(per_op: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (i, &op) in OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for _ in 0..per_op {
            let case = OpCase::random(op, &mut rng);
            let r64 = check::<f64, _>(&case, F64_STEP)?;
            out.push(CaseResult {
                op,
                passed: r64.max_rel_err < F64_RTOL,
                tolerance: F64_RTOL,
                report: r64,
            });
            let r32 = check::<f32, _>(&case, F32_STEP)?;
            out.push(CaseResult {
                op,
                passed: r32.max_rel_err < F32_RTOL,
                tolerance: F32_RTOL,
                report: r32,
            });
        }
    }
    Ok(out)
}

/// Largest deviation from one of the 256 bin masses summed, over `draws`
/// random single-channel mixtures. Every fourth draw pins a component to an
/// edge mean and the minimum log-scale.
pub fn dmol_mass_check(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins: Vec<f64> = (0..256).map(|i| i as f64 / 127.5 - 1.0).collect();
    let x = Tensor::new(vec![256, 1, 1, 1], bins)?;
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let layout = DmolLayout::new(rng.random_range(1..=5), 1);
        let mut p: Vec<f64> = (0..layout.param_channels()).map(|_| rng.random_range(-2.0..2.0)).collect();
        for k in 0..layout.mixtures {
            p[layout.mean(k, 0)] = rng.random_range(-1.1..1.1);
            p[layout.log_scale(k, 0)] = rng.random_range(-8.0..1.0);
        }
        if d % 4 == 0 {
            p[layout.mean(0, 0)] = if d % 8 == 0 { 1.0 } else { -1.0 };
            p[layout.log_scale(0, 0)] = LOG_SCALE_MIN;
        }
        let raw: Vec<f64> = (0..256).flat_map(|_| p.iter().copied()).collect();
        let params = DmolParams::new(layout, Tensor::new(vec![256, layout.param_channels(), 1, 1], raw)?)?;
        let total: f64 = dmol_logprob_values(&x, &params)?.iter().map(|l| l.exp()).sum();
        worst = worst.max((total - 1.0).abs());
    }
    Ok(worst)
}

/// Sampler histogram against bin masses for one logistic component.
#[derive(Clone, Debug)]
pub struct HistogramReport {
    pub samples: usize,
    /// Largest per-bin `|count - N p| / sqrt(N p (1 - p))`.
    pub max_sigma: f64,
    /// Pearson statistic over bins with expected count at least 5, the
    /// remaining bins pooled into one cell.
    pub chi2: f64,
    pub dof: usize,
}

impl HistogramReport {
    /// The statistic lies within three standard deviations of its
    /// expectation under the bin masses.
    pub fn passed(&self) -> bool {
        let dof = self.dof as f64;
        (self.chi2 - dof).abs() <= 3.0 * (2.0 * dof).sqrt()
    }
}

/// Compare a histogram of byte values with expected bin probabilities.
pub fn histogram_report(counts: &[usize], probs: &[f64]) -> HistogramReport {
    let n: f64 = counts.iter().sum::<usize>() as f64;
    let mut max_sigma: f64 = 0.0;
    let mut chi2 = 0.0;
    let mut cells = 0;
    let (mut pooled_count, mut pooled_p) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let c = c as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        let dev = (c - n * p).abs();
        if sd > 0.0 {
            max_sigma = max_sigma.max(dev / sd);
        } else if dev > 0.0 {
            max_sigma = f64::INFINITY;
        }
        if n * p >= 5.0 {
            chi2 += (c - n * p).powi(2) / (n * p);
            cells += 1;
        } else {
            pooled_count += c;
            pooled_p += p;
        }
    }
    if n * pooled_p > 0.0 {
        chi2 += (pooled_count - n * pooled_p).powi(2) / (n * pooled_p);
        cells += 1;
    } else if pooled_count > 0.0 {
        chi2 = f64::INFINITY;
    }
    HistogramReport {
        samples: n as usize,
        max_sigma,
        chi2,
        dof: cells.max(2) - 1,
    }
}

pub fn dmol_histogram_check(mean: f64, log_scale: f64, samples: usize, seed: u64) -> Result<HistogramReport> {
    let layout = DmolLayout::new(1, 1);
    let raw = Tensor::new(vec![samples, 3, 1, 1], [0.0, mean, log_scale].repeat(samples))?;
    let params = DmolParams::new(layout, raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 256];
    for b in dmol_sample(&params, &mut rng)? {
        counts[b as usize] += 1;
    }
    let bins: Vec<f64> = (0..256).map(|i| i as f64 / 127.5 - 1.0).collect();
    let one = DmolParams::new(layout, Tensor::new(vec![256, 3, 1, 1], [0.0, mean, log_scale].repeat(256))?)?;
    let probs: Vec<f64> = dmol_logprob_values(&Tensor::new(vec![256, 1, 1, 1], bins)?, &one)?
        .into_iter()
        .map(f64::exp)
        .collect();
    Ok(histogram_report(&counts, &probs))
}

/// Largest ELBO versus log-likelihood gap over `models` random binary
/// autoregressive models of dimension 1 to `max_dim`.
pub fn prop1_suite(models: usize, max_dim: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..models {
        let n = rng.random_range(1..=max_dim);
        let ar = DiscreteArModel::random(n, &mut rng)?;
        worst = worst.max(prop1_equivalence_check(&ar));
    }
    Ok(worst)
}

/// Jacobian structure of the prior map at `inits` random miniatures.
pub fn prop2_suite(inits: usize, layers: usize, zdim: usize, tolerance: f64, seed: u64) -> Result<Vec<Prop2Report>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..inits)
        .map(|_| prop2_jacobian_check(layers, zdim, tolerance, &mut rng))
        .collect()
}
