//! Minimal reverse-mode automatic differentiation over dense tensors.

mod conv;
pub mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{normal_cdf, sigmoid, softplus, CustomOp, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// L2 norm over the concatenation of every gradient buffer. NaN anywhere
/// yields NaN.
pub fn global_grad_norm<T: Scalar>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

impl<T: Scalar> Graph<T> {
    /// [`global_grad_norm`] over the gradients of `params` after `backward`.
    pub fn global_grad_norm(&self, params: &[Var]) -> Result<f64> {
        let mut slices = Vec::with_capacity(params.len());
        for &p in params {
            let g = self
                .grad_slice(p)
                .ok_or_else(|| Error::MissingGradient(format!("var #{}", p.index())))?;
            slices.push(g);
        }
        Ok(global_grad_norm(&slices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_examples() {
        assert_eq!(global_grad_norm::<f32>(&[&[0.0, 0.0], &[0.0]]), 0.0);
        assert_eq!(global_grad_norm::<f64>(&[&[3.0], &[4.0]]), 5.0);
        assert!(global_grad_norm::<f32>(&[&[1.0], &[f32::NAN]]).is_nan());
    }

    #[test]
    fn graph_norm_requires_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let b = g.param(Tensor::new(vec![1], vec![4.0]).unwrap());
        let unused = g.param(Tensor::new(vec![1], vec![1.0]).unwrap());
        let s = g.add(a, b).unwrap();
        let sq = g.mul(s, s).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.global_grad_norm(&[a, b]).unwrap(), (2.0f64 * 196.0).sqrt());
        assert!(matches!(
            g.global_grad_norm(&[a, unused]),
            Err(Error::MissingGradient(_))
        ));
    }
}
