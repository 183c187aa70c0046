use crate::autodiff::{Scalar, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Per-channel mean and standard deviation of raw pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn compute(ds: &Dataset) -> Result<Self> {
        let c = ds.channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in ds.pixels().chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let count = (ds.len() * ds.height() * ds.width()) as f64;
        if count == 0.0 {
            return Err(Error::Invalid("cannot compute statistics of an empty dataset".into()));
        }
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let m = sum[ch] / count;
            let var = (sq[ch] / count - m * m).max(0.0);
            if var == 0.0 {
                return Err(Error::Invalid(format!("channel {ch} is constant; cannot normalize")));
            }
            mean.push(m as f32);
            std.push(var.sqrt() as f32);
        }
        Ok(NormStats { mean, std })
    }

    /// `(x - mean) / std` per channel, from NHWC bytes to an NCHW tensor.
    pub fn normalize<T: Scalar>(&self, pixels: &[u8], n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let c = self.mean.len();
        if pixels.len() != n * h * w * c {
            return Err(Error::shape("normalize_input", format!("{} bytes for [{n}, {h}, {w}, {c}]", pixels.len())));
        }
        if let Some(ch) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Invalid(format!("channel {ch} has zero std")));
        }
        Ok(Tensor::from_fn(&[n, c, h, w], |i| {
            let (b, r) = (i / (c * h * w), i % (c * h * w));
            let (ch, p) = (r / (h * w), r % (h * w));
            let v = pixels[(b * h * w + p) * c + ch] as f32;
            T::lit(((v - self.mean[ch]) / self.std[ch]) as f64)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_is_rejected() {
        let ds = Dataset::new(vec![5, 1, 5, 2, 5, 3], 3, 1, 1, 2, "t").unwrap();
        assert!(NormStats::compute(&ds).is_err());
    }

    #[test]
    fn normalized_training_set_is_standardized() {
        let pixels: Vec<u8> = (0..600u32).map(|i| ((i * 37 + i / 3) % 256) as u8).collect();
        let ds = Dataset::new(pixels.clone(), 50, 2, 2, 3, "t").unwrap();
        let stats = NormStats::compute(&ds).unwrap();
        let t: Tensor<f64> = stats.normalize(&pixels, 50, 2, 2).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..50).flat_map(|b| (0..4).map(move |p| (b * 3 + ch) * 4 + p)).map(|i| t.data()[i]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4, "{m}");
            assert!((v.sqrt() - 1.0).abs() < 1e-4, "{v}");
        }
    }
}
