use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// Images made of a background color, one rectangle of another color, and
/// per-subpixel noise: one global, one mid-scale and many local factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub size: usize,
    pub palette_k: usize,
    /// Noise is uniform over the integers in `[-texture_scale, texture_scale]`.
    pub texture_scale: u8,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 2000,
            size: 8,
            palette_k: 6,
            texture_scale: 8,
            seed: 0,
        }
    }
}

/// The palette used by [`generate_synthetic`] for a given seed.
pub fn synthetic_palette(cfg: &SyntheticConfig) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.palette_k).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

/// Inclusive range of rectangle side lengths.
pub fn rect_sides(size: usize) -> (usize, usize) {
    ((size / 4).max(1), (size / 2).max(1))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if ![8, 16, 32].contains(&cfg.size) {
        return Err(Error::Invalid(format!("synthetic size {} not in {{8, 16, 32}}", cfg.size)));
    }
    if cfg.palette_k == 0 {
        return Err(Error::Invalid("palette_k must be positive".into()));
    }
    let palette = synthetic_palette(cfg);
    // Separate stream so the palette does not depend on n.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let s = cfg.size;
    let (lo, hi) = rect_sides(s);
    let t = cfg.texture_scale as i32;
    let mut pixels = Vec::with_capacity(cfg.n * s * s * 3);
    for _ in 0..cfg.n {
        let bg = rng.random_range(0..cfg.palette_k);
        let fg = if cfg.palette_k > 1 {
            (bg + rng.random_range(1..cfg.palette_k)) % cfg.palette_k
        } else {
            bg
        };
        let rw = rng.random_range(lo..=hi);
        let rh = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0..=s - rw);
        let y0 = rng.random_range(0..=s - rh);
        for y in 0..s {
            for x in 0..s {
                let inside = (x0..x0 + rw).contains(&x) && (y0..y0 + rh).contains(&y);
                let color = palette[if inside { fg } else { bg }];
                for &base in &color {
                    let noise = if t > 0 { rng.random_range(-t..=t) } else { 0 };
                    pixels.push((base as i32 + noise).clamp(0, 255) as u8);
                }
            }
        }
    }
    Dataset::new(
        pixels,
        cfg.n,
        s,
        s,
        3,
        format!(
            "synthetic:n={},size={},palette_k={},texture_scale={},seed={}",
            cfg.n, cfg.size, cfg.palette_k, cfg.texture_scale, cfg.seed
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_color_without_noise_is_constant() {
        let cfg = SyntheticConfig {
            n: 5,
            size: 8,
            palette_k: 1,
            texture_scale: 0,
            seed: 3,
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let c = synthetic_palette(&cfg)[0];
        for px in ds.pixels().chunks(3) {
            assert_eq!(px, c);
        }
    }

    #[test]
    fn seeded_and_sized() {
        let cfg = SyntheticConfig::default();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 1, ..cfg };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
        assert!(generate_synthetic(&SyntheticConfig { size: 12, ..cfg }).is_err());
    }
}
