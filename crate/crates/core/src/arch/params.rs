use std::collections::BTreeMap;

use rand::Rng;

use super::config::{DownsampleMode, ModelConfig, PriorMode};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::dist::DmolLayout;
use crate::error::{Error, Result};

/// Named parameter tensors. Keys are fixed at construction and iterate in
/// sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    FanIn(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

pub(crate) fn kernel_at(resolution: usize) -> usize {
    if resolution == 1 {
        1
    } else {
        3
    }
}

pub(crate) fn enc_block(i: usize) -> String {
    format!("enc.b{i:03}")
}

pub(crate) fn dec_block(j: usize) -> String {
    format!("dec.b{j:03}")
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn conv(&mut self, prefix: &str, cout: usize, cin_per_group: usize, k: usize, zero_weight: bool) {
        let fan_in = cin_per_group * k * k;
        self.0.push(ParamSpec {
            name: format!("{prefix}.w"),
            shape: vec![cout, cin_per_group, k, k],
            init: if zero_weight { Init::Zero } else { Init::FanIn(fan_in) },
        });
        self.0.push(ParamSpec {
            name: format!("{prefix}.b"),
            shape: vec![cout],
            init: Init::Zero,
        });
    }

    /// Four-conv bottleneck: 1x1 in->mid, two kxk mid->mid, 1x1 mid->out.
    fn bottleneck(&mut self, prefix: &str, cin: usize, mid: usize, cout: usize, k: usize, zero_last: bool) {
        self.conv(&format!("{prefix}.c1"), mid, cin, 1, false);
        self.conv(&format!("{prefix}.c2"), mid, mid, k, false);
        self.conv(&format!("{prefix}.c3"), mid, mid, k, false);
        self.conv(&format!("{prefix}.c4"), cout, mid, 1, zero_last);
    }

    fn feedforward(&mut self, prefix: &str, width: usize, group: usize, k: usize) {
        self.conv(&format!("{prefix}.c1"), width, group, k, false);
        self.conv(&format!("{prefix}.c2"), width, group, k, false);
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let w = cfg.width;
    let mid = cfg.bottleneck();
    let mut s = Specs(Vec::new());
    s.conv("enc.in", w, cfg.image_channels, 3, false);
    let mut i = 0;
    let mut prev: Option<usize> = None;
    for &(res, count) in cfg.enc_spec.entries() {
        if let (Some(p), DownsampleMode::StridedConv) = (prev, cfg.downsample) {
            s.conv(&format!("enc.down{res:03}"), w, w, p / res, false);
        }
        for _ in 0..count {
            s.bottleneck(&enc_block(i), w, mid, w, kernel_at(res), true);
            i += 1;
        }
        prev = Some(res);
    }
    s.0.push(ParamSpec {
        name: "dec.x0".into(),
        shape: vec![1, w, 1, 1],
        init: Init::Zero,
    });
    let mut j = 0;
    for &(res, count) in cfg.dec_spec.entries() {
        let k = kernel_at(res);
        for _ in 0..count {
            let b = dec_block(j);
            s.bottleneck(&format!("{b}.q"), 2 * w, mid, 2 * cfg.zdim, k, false);
            match cfg.prior_mode {
                PriorMode::Separate => s.bottleneck(&format!("{b}.p"), w, mid, 2 * cfg.zdim, k, false),
                PriorMode::SharedPseudoInput => s.feedforward(&format!("{b}.ff1"), w, cfg.ff_group_size, k),
            }
            s.conv(&format!("{b}.zproj"), w, cfg.zdim, 1, true);
            s.feedforward(&format!("{b}.ff2"), w, cfg.ff_group_size, k);
            j += 1;
        }
    }
    let out = DmolLayout::new(cfg.dmol_mixtures, cfg.image_channels).param_channels();
    s.conv("out", out, w, 1, false);
    s.0
}

/// Whether `name` is the weight of the last convolution of a residual block.
pub fn is_residual_output(name: &str) -> bool {
    (name.starts_with("enc.b") && name.ends_with(".c4.w")) || (name.starts_with("dec.b") && name.ends_with(".ff2.c2.w"))
}

impl<T: Scalar> Parameters<T> {
    /// Fresh parameters: zero where the architecture demands it, fan-in
    /// scaled uniform elsewhere, then residual scaling if enabled.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = match spec.init {
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::uniform(&spec.shape, -bound, bound, rng)
                }
            };
            tensors.insert(spec.name, t);
        }
        let mut params = Parameters { tensors };
        if cfg.residual_scaling {
            params.apply_residual_scaling(cfg.residual_depth());
        }
        Ok(params)
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Parameters { tensors }
    }

    /// Multiply the final convolution of every residual block by `1/sqrt(n)`.
    pub fn apply_residual_scaling(&mut self, n: usize) {
        let scale = T::lit(residual_scale(n));
        for (name, t) in self.tensors.iter_mut() {
            if is_residual_output(name) {
                for v in t.data_mut() {
                    *v = *v * scale;
                }
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Parameters {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    /// CRC32 over names and shapes; equal for any two configs with the same
    /// parameter layout.
    pub fn layout_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_layout<U: Scalar>(&self, other: &Parameters<U>) -> Result<()> {
        let a: Vec<_> = self.tensors.iter().map(|(k, v)| (k, v.shape())).collect();
        let b: Vec<_> = other.tensors.iter().map(|(k, v)| (k, v.shape())).collect();
        if a != b {
            return Err(Error::Invalid("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// Register every tensor on the graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

pub fn residual_scale(n: usize) -> f64 {
    1.0 / (n.max(1) as f64).sqrt()
}

/// Parameter count of a config without allocating it.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Graph handles for a bound parameter set.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}
