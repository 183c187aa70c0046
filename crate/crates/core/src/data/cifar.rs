use std::fs;
use std::path::Path;

use super::dataset::{Dataset, Splits};
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
/// Validation images held out of the CIFAR-10 training batches.
pub const CIFAR_VAL: usize = 5000;

/// Decode CIFAR-10 binary records (label byte, then 1024 red, 1024 green
/// and 1024 blue bytes) into HWC images. Labels are dropped.
pub fn decode_cifar_records(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = vec![0u8; n * plane * 3];
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let img = &mut pixels[i * plane * 3..(i + 1) * plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                img[p * 3 + c] = rec[1 + c * plane + p];
            }
        }
    }
    Dataset::new(pixels, n, CIFAR_SIDE, CIFAR_SIDE, 3, path.display().to_string())
}

fn read_batch(dir: &Path, name: &str) -> Result<Dataset> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    decode_cifar_records(&bytes, &path)
}

fn concat(parts: &[Dataset], provenance: String) -> Result<Dataset> {
    let first = &parts[0];
    let pixels: Vec<u8> = parts.iter().flat_map(|d| d.pixels().iter().copied()).collect();
    let n = parts.iter().map(Dataset::len).sum();
    Dataset::new(pixels, n, first.height(), first.width(), first.channels(), provenance)
}

/// Load `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin`,
/// holding out [`CIFAR_VAL`] training images (fewer for tiny directories)
/// by a seeded shuffle.
pub fn load_cifar10_binary(dir: &Path, seed: u64) -> Result<Splits> {
    let batches = (1..=5)
        .map(|i| read_batch(dir, &format!("data_batch_{i}.bin")))
        .collect::<Result<Vec<_>>>()?;
    let all = concat(&batches, format!("cifar10:{}", dir.display()))?;
    let test = read_batch(dir, "test_batch.bin")?;
    let holdout = CIFAR_VAL.min(all.len() / 10).max(1);
    let (train, val) = all.split_holdout(holdout, seed)?;
    Ok(Splits {
        train,
        val,
        test: Some(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_plane_layout() {
        let mut rec = vec![7u8; CIFAR_RECORD];
        rec[1] = 10; // red of pixel 0
        rec[1 + 1024] = 20; // green of pixel 0
        rec[1 + 2048 + 33] = 30; // blue of pixel (1, 1)
        let ds = decode_cifar_records(&rec, Path::new("x")).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(&ds.image(0)[..3], &[10, 20, 7]);
        assert_eq!(ds.image(0)[33 * 3 + 2], 30);
        assert!(decode_cifar_records(&rec[..100], Path::new("x")).is_err());
    }
}
