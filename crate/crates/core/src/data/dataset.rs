use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A stack of `u8` images in `(n, H, W, C)` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        pixels: Vec<u8>,
        n: usize,
        height: usize,
        width: usize,
        channels: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if pixels.len() != n * height * width * channels {
            return Err(Error::Invalid(format!(
                "{} bytes cannot hold {n} images of {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        Ok(Dataset {
            pixels,
            n,
            height,
            width,
            channels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let l = self.image_len();
        &self.pixels[i * l..(i + 1) * l]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            n: indices.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            provenance: self.provenance.clone(),
        }
    }

    /// Gather images into NHWC bytes.
    pub fn gather(&self, indices: &[usize]) -> Vec<u8> {
        self.subset(indices).pixels
    }

    /// `(train, holdout)` with `holdout` images chosen by a seeded shuffle.
    pub fn split_holdout(&self, holdout: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if holdout >= self.n {
            return Err(Error::Invalid(format!("holdout {holdout} leaves no training images out of {}", self.n)));
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val, train) = idx.split_at(holdout);
        let mut val = val.to_vec();
        let mut train = train.to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }
}

/// Training, validation and (optionally) test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

/// NHWC bytes to an NCHW tensor on the `[-1, 1]` grid used by the pixel
/// likelihood.
pub fn to_unit_range<T: Scalar>(pixels: &[u8], n: usize, h: usize, w: usize, c: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, c, h, w], |i| {
        let (b, r) = (i / (c * h * w), i % (c * h * w));
        let (ch, p) = (r / (h * w), r % (h * w));
        T::lit(pixels[(b * h * w + p) * c + ch] as f64 / 127.5 - 1.0)
    })
}
