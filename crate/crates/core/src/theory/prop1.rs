use rand::Rng;

use crate::error::{Error, Result};

/// Largest sequence length enumerated exhaustively.
pub const MAX_AR_DIM: usize = 8;

/// A binary autoregressive model: `tables[i][prefix]` is
/// `p(x_i = 1 | x_<i = prefix)` with the prefix read as a little-endian
/// bit string.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteArModel {
    tables: Vec<Vec<f64>>,
}

fn bit(x: usize, i: usize) -> usize {
    (x >> i) & 1
}

fn prefix(x: usize, i: usize) -> usize {
    x & ((1 << i) - 1)
}

impl DiscreteArModel {
    pub fn new(tables: Vec<Vec<f64>>) -> Result<Self> {
        if tables.is_empty() || tables.len() > MAX_AR_DIM {
            return Err(Error::Invalid(format!(
                "binary AR models of length 1..={MAX_AR_DIM} are enumerable, got {}",
                tables.len()
            )));
        }
        for (i, t) in tables.iter().enumerate() {
            if t.len() != 1 << i || t.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                return Err(Error::Invalid(format!("table {i} must hold 2^{i} probabilities in (0, 1)")));
            }
        }
        Ok(DiscreteArModel { tables })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| vec![0.5; 1 << i]).collect())
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..n).map(|i| (0..1 << i).map(|_| rng.random_range(0.02..0.98)).collect()).collect())
    }

    pub fn dim(&self) -> usize {
        self.tables.len()
    }

    /// `p(x_i = v | x_<i)` for the prefix of `x`.
    pub fn conditional(&self, i: usize, x: usize, v: usize) -> f64 {
        let p1 = self.tables[i][prefix(x, i)];
        if v == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// Direct autoregressive log-likelihood `sum_i log p(x_i | x_<i)`.
    pub fn log_likelihood(&self, x: usize) -> f64 {
        (0..self.dim()).map(|i| self.conditional(i, x, bit(x, i)).ln()).sum()
    }
}

/// The N-layer latent variable model built from an AR model: prior
/// `p(z_i | z_<i)` is the AR conditional, the decoder copies `x_i = z_i`
/// with probability one, and the posterior puts all mass on `z = x`.
pub struct ArEquivalentVae<'a> {
    pub ar: &'a DiscreteArModel,
}

impl ArEquivalentVae<'_> {
    fn posterior(&self, i: usize, z: usize, x: usize) -> f64 {
        f64::from(bit(z, i) == bit(x, i))
    }

    fn decoder(&self, x: usize, z: usize) -> f64 {
        f64::from(x == z)
    }

    /// Exact ELBO of `x`: reconstruction expectation minus the per-layer
    /// KL terms, each a finite sum over the binary latent values and
    /// weighted by the posterior over earlier layers.
    pub fn elbo(&self, x: usize) -> f64 {
        let n = self.ar.dim();
        let mut recon = 0.0;
        let mut kl = 0.0;
        for z in 0..1usize << n {
            let qz: f64 = (0..n).map(|i| self.posterior(i, z, x)).product();
            if qz == 0.0 {
                continue;
            }
            recon += qz * self.decoder(x, z).ln();
        }
        for i in 0..n {
            // E_{q(z_<i | x)} KL(q(z_i | z_<i, x) || p(z_i | z_<i)).
            for zp in 0..1usize << i {
                let w: f64 = (0..i).map(|j| self.posterior(j, zp, x)).product();
                if w == 0.0 {
                    continue;
                }
                for v in 0..2 {
                    let z = zp | (v << i);
                    let q = self.posterior(i, z, x);
                    if q > 0.0 {
                        kl += w * q * (q.ln() - self.ar.conditional(i, zp, v).ln());
                    }
                }
            }
        }
        recon - kl
    }

    /// `p(x) = sum_z p(z) p(x | z)`.
    pub fn marginal(&self, x: usize) -> f64 {
        let n = self.ar.dim();
        (0..1usize << n)
            .map(|z| {
                let pz: f64 = (0..n).map(|i| self.ar.conditional(i, z, bit(z, i))).product();
                pz * self.decoder(x, z)
            })
            .sum()
    }
}

/// Largest `|ELBO(x) - log p_AR(x)|` over all `2^n` inputs.
pub fn prop1_equivalence_check(ar: &DiscreteArModel) -> f64 {
    let vae = ArEquivalentVae { ar };
    (0..1usize << ar.dim())
        .map(|x| (vae.elbo(x) - ar.log_likelihood(x)).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_variable() {
        let ar = DiscreteArModel::new(vec![vec![0.7]]).unwrap();
        let vae = ArEquivalentVae { ar: &ar };
        assert_eq!(vae.elbo(1), 0.7f64.ln());
    }

    #[test]
    fn uniform_tables() {
        let ar = DiscreteArModel::uniform(4).unwrap();
        let vae = ArEquivalentVae { ar: &ar };
        for x in 0..16 {
            assert!((vae.elbo(x) + 4.0 * 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn random_tables_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ar = DiscreteArModel::random(6, &mut rng).unwrap();
        assert!(prop1_equivalence_check(&ar) < 1e-12);
        let vae = ArEquivalentVae { ar: &ar };
        let total: f64 = (0..64).map(|x| vae.marginal(x)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_unenumerable() {
        assert!(DiscreteArModel::uniform(9).is_err());
        assert!(DiscreteArModel::new(vec![vec![1.0]]).is_err());
    }
}
