//! The computation tape: forward ops record themselves, `backward` replays
//! the record in reverse and accumulates gradients additively.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::conv::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op with a hand-written vector-Jacobian product, for fused kernels
/// that live outside this module.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, or `None` where not needed.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Broadcast(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed ops in order. One graph per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let phi = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    x * phi
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat output index, the flat source index under broadcasting.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let total: usize = dst.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for axis in (0..dst.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < dst[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    map
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// A graph whose every op fails with [`Error::NonFinite`] when it
    /// produces NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Graph {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Value-identical copy through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, out, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |v| v * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |v| v + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |v| v.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |v| v.ln(), Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// Exact GELU, `x * Phi(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = T::lit(v.len() as f64);
        let s: T = v.data().iter().copied().sum();
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    /// Numpy-style broadcast to `shape`; the input must have the same rank
    /// with each extent either equal or 1.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(Error::shape("broadcast", format!("{src:?} -> {shape:?}")));
        }
        let map = broadcast_index_map(&src, shape);
        let v = self.value(a).data();
        let data = map.iter().map(|&i| v[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(a);
        self.push("broadcast", out, Op::Broadcast(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", out, Op::Reshape(a), rg)
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", "inputs need a channel axis"));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", out, Op::Concat(parts.to_vec()), rg)
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(Error::shape(
                "slice",
                format!("channels {start}..{} of {s:?}", start + len),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for b in 0..s[0] {
            let base = (b * s[1] + start) * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        self.push("slice", out, Op::Slice { input: a, start }, rg)
    }

    /// `input [n, in] x weight[out, in]^T + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", "bias must be [out]"));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(input).data(),
            fin as isize,
            1,
            self.value(weight).data(),
            1,
            fin as isize,
            T::zero(),
            &mut out,
            fout as isize,
            1,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o = *o + bb;
                }
            }
        }
        let out = Tensor::new(vec![n, fout], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push("linear", out, Op::Linear { input, weight, bias }, rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let out = conv::avg_pool_forward(self.value(a), factor)?;
        let rg = self.rg(a);
        self.push("avg_pool", out, Op::AvgPool(a, factor), rg)
    }

    pub fn nn_upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let out = conv::upsample_forward(self.value(a), factor)?;
        let rg = self.rg(a);
        self.push("nn_upsample", out, Op::Upsample(a, factor), rg)
    }

    /// Record the result of a fused kernel with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let rg = inputs.iter().any(|&i| self.rg(i));
        let name = op.name();
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Fail if `v` holds NaN or infinity.
    pub fn ensure_finite(&self, v: Var, what: &'static str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: what })
        }
    }

    /// Reverse pass from a single-element root. Afterwards every leaf that
    /// requires grad and influences the root holds its gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&self.nodes, node, &g, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let zip_map = |v: Var, f: &dyn Fn(T, T) -> T| -> Vec<T> {
        val(v).data().iter().zip(g).map(|(&x, &gg)| f(x, gg)).collect()
    };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&x| -x).collect());
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let ga = zip_map(*b, &|y, gg| y * gg);
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let gb = zip_map(*a, &|x, gg| x * gg);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|&x| x * *c).collect()),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Exp(a) => {
            let ga = out.data().iter().zip(g).map(|(&y, &gg)| y * gg).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Log(a) => accumulate(nodes, grads, *a, zip_map(*a, &|x, gg| gg / x)),
        Op::Tanh(a) => {
            let ga = out
                .data()
                .iter()
                .zip(g)
                .map(|(&y, &gg)| gg * (T::one() - y * y))
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softplus(a) => accumulate(nodes, grads, *a, zip_map(*a, &|x, gg| gg * sigmoid(x))),
        Op::Gelu(a) => accumulate(nodes, grads, *a, zip_map(*a, &|x, gg| gg * gelu_grad(x))),
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![g[0] / T::lit(n as f64); n]);
        }
        Op::Broadcast(a) => {
            let src = val(*a).shape();
            let map = broadcast_index_map(src, out.shape());
            let mut ga = vec![T::zero(); val(*a).len()];
            for (&i, &gg) in map.iter().zip(g) {
                ga[i] = ga[i] + gg;
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Concat(parts) => {
            let s = out.shape();
            let inner: usize = s[2..].iter().product();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).shape()[1];
                if rg(p) {
                    let mut gp = Vec::with_capacity(val(p).len());
                    for b in 0..s[0] {
                        let base = (b * s[1] + offset) * inner;
                        gp.extend_from_slice(&g[base..base + c * inner]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += c;
            }
        }
        Op::Slice { input, start } => {
            let s = val(*input).shape();
            let inner: usize = s[2..].iter().product();
            let len = out.shape()[1];
            let mut gi = vec![T::zero(); val(*input).len()];
            for b in 0..s[0] {
                let base = (b * s[1] + start) * inner;
                gi[base..base + len * inner].copy_from_slice(&g[b * len * inner..(b + 1) * len * inner]);
            }
            accumulate(nodes, grads, *input, gi);
        }
        Op::Linear { input, weight, bias } => {
            let (x, w) = (val(*input), val(*weight));
            let (n, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            if rg(*input) {
                let mut gx = vec![T::zero(); n * fin];
                T::gemm(n, fout, fin, T::one(), g, fout as isize, 1, w.data(), fin as isize, 1, T::zero(), &mut gx, fin as isize, 1);
                accumulate(nodes, grads, *input, gx);
            }
            if rg(*weight) {
                let mut gw = vec![T::zero(); fout * fin];
                T::gemm(fout, n, fin, T::one(), g, 1, fout as isize, x.data(), fin as isize, 1, T::zero(), &mut gw, fin as isize, 1);
                accumulate(nodes, grads, *weight, gw);
            }
            if let Some(b) = bias.filter(|&b| rg(b)) {
                let mut gb = vec![T::zero(); fout];
                for row in g.chunks(fout) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                accumulate(nodes, grads, b, gb);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let need = [rg(*input), rg(*weight), bias.is_some_and(&rg)];
            let cg = conv::conv2d_backward(val(*input), val(*weight), geom, g, need)?;
            if let Some(gx) = cg.input {
                accumulate(nodes, grads, *input, gx);
            }
            if let Some(gw) = cg.weight {
                accumulate(nodes, grads, *weight, gw);
            }
            if let (Some(b), Some(gb)) = (bias, cg.bias) {
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::AvgPool(a, f) => {
            let ga = conv::avg_pool_backward(val(*a).shape(), *f, g);
            accumulate(nodes, grads, *a, ga);
        }
        Op::Upsample(a, f) => {
            let ga = conv::upsample_backward(val(*a).shape(), *f, g);
            accumulate(nodes, grads, *a, ga);
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let needs: Vec<bool> = inputs.iter().map(|&i| rg(i)).collect();
            let gs = op.backward(&ins, out, g, &needs);
            for (&i, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    accumulate(nodes, grads, i, gi);
                }
            }
        }
    }
    Ok(())
}

/// Standard normal CDF in f64, shared with tests as a reference.
pub fn normal_cdf(x: f64) -> f64 {
    standard_normal_cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), ConvGeom::new(1, 1, 1)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 9.0);
    }

    #[test]
    fn identity_pointwise_conv() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f32>::new();
        let xv = Tensor::randn(&[2, 1, 4, 5], &mut rng);
        let x = g.constant(xv.clone());
        let w = g.param(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), ConvGeom::new(1, 0, 1)).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn gelu_reference_points() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[0.0, 1.0, 30.0, -30.0]));
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((v[2] - 30.0).abs() < 1e-12);
        assert!(v[3].abs() < 1e-12);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.softplus(x).unwrap();
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn avg_pool_of_block() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn upsample_scalar_to_block() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1, 1, 1], &[7.0]));
        let y = g.nn_upsample(x, 4).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 7.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[16.0]);

        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 1], &[1.0, 2.0]));
        let y = g.nn_upsample(x, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[5], &[1.0, -2.0, 3.0, 0.5, 9.0]));
        let m = g.mean(x).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 1, 2, 2], |i| -(i as f64)));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 2, 2]);
        let a2 = g.slice_channels(c, 0, 3).unwrap();
        let b2 = g.slice_channels(c, 3, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        assert!(g.slice_channels(c, 3, 2).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let d = g.detach(x);
        assert_eq!(g.value(d), g.value(x));
        let y = g.mul(d, d).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        // y = x*x + 3x, dy/dx = 2x + 3 via two consumers of x
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.5, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let tri = g.scale(x, 3.0).unwrap();
        let y = g.add(sq, tri).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, -1.0]);
    }

    #[test]
    fn broadcast_sums_in_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2, 1, 1], &[1.0, 2.0]));
        let y = g.broadcast(x, &[3, 2, 2, 2]).unwrap();
        assert_eq!(g.value(y).data()[..4], [1.0; 4]);
        assert_eq!(g.value(y).data()[4..8], [2.0; 4]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0, 12.0]);
        assert!(g.broadcast(x, &[3, 3, 1, 1]).is_err());
    }

    #[test]
    fn finite_checks_flag_nan() {
        let mut g = Graph::<f64>::with_finite_checks();
        let x = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[-1.0]));
        let y = g.log(x).unwrap();
        assert!(g.ensure_finite(y, "log").is_err());
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }
}
