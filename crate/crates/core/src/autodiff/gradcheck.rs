//! Central finite-difference oracle for the tape's analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::Result;

/// A differentiable computation that can be instantiated at any precision.
pub trait GradCase {
    fn name(&self) -> String;

    /// Inputs with respect to which gradients are checked.
    fn inputs(&self) -> Vec<Tensor<f64>>;

    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub case: String,
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Floor on the relative-error denominator, so entries with near-zero
/// gradient are compared absolutely.
pub const REL_FLOOR: f64 = 0.1;

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Projection weights turning an arbitrary output into a scalar objective.
fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn objective<T: Scalar, C: GradCase>(case: &C, inputs: &[Tensor<f64>], seed: u64) -> Result<(Graph<T>, Vec<Var>, Var)> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = case.build(&mut g, &vars)?;
    let r = projection(g.shape(out), seed);
    let rv = g.constant(r.cast());
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

fn numeric_objective<C: GradCase>(case: &C, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = case.build(&mut g, &vars)?;
    let r = projection(g.shape(out), seed);
    Ok(g.value(out)
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Compare analytic gradients computed at precision `T` with f64 central
/// differences of step `step`.
pub fn check<T: Scalar, C: GradCase>(case: &C, step: f64) -> Result<GradReport> {
    let inputs = case.inputs();
    let seed = 0x5eed;
    let (mut g, vars, loss) = objective::<T, C>(case, &inputs, seed)?;
    g.backward(loss)?;
    let mut report = GradReport {
        case: format!("{} [{}]", case.name(), T::NAME),
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad_slice(*v) {
            Some(gs) => gs.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= step;
            let numeric = (numeric_objective(case, &plus, seed)?
                - numeric_objective(case, &minus, seed)?)
                / (2.0 * step);
            let err = relative_error(analytic[j], numeric);
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst_input = i;
                report.worst_index = j;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Finite-difference step used in f64 checks.
pub const F64_STEP: f64 = 1e-5;
/// Finite-difference step used when checking f32 gradients.
pub const F32_STEP: f64 = 1e-3;
pub const F64_RTOL: f64 = 1e-6;
pub const F32_RTOL: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;

    struct Cube;

    impl GradCase for Cube {
        fn name(&self) -> String {
            "cube".into()
        }
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()]
        }
        fn build<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
            let sq = g.mul(v[0], v[0])?;
            g.mul(sq, v[0])
        }
    }

    /// A deliberately wrong backward: detach hides one factor.
    struct Broken;

    impl GradCase for Broken {
        fn name(&self) -> String {
            "broken".into()
        }
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![Tensor::new(vec![2], vec![1.5, -0.7]).unwrap()]
        }
        fn build<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
            let d = g.detach(v[0]);
            g.mul(v[0], d)
        }
    }

    #[test]
    fn accepts_correct_gradients() {
        let r = check::<f64, _>(&Cube, F64_STEP).unwrap();
        assert!(r.max_rel_err < F64_RTOL, "{r:?}");
        let r = check::<f32, _>(&Cube, F32_STEP).unwrap();
        assert!(r.max_rel_err < F32_RTOL, "{r:?}");
    }

    #[test]
    fn flags_wrong_gradients() {
        let r = check::<f64, _>(&Broken, F64_STEP).unwrap();
        assert!(r.max_rel_err > 0.1, "{r:?}");
    }
}
