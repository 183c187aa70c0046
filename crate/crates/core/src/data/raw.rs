use std::fs;
use std::path::Path;

use super::dataset::{Dataset, Splits};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"VDVT";

/// Holdout size for datasets without a published split.
pub fn default_holdout(n: usize) -> usize {
    (n / 10).clamp(1, 5000)
}

/// Serialize as `VDVT`, `n h w c` as little-endian u32, then HWC bytes.
pub fn encode_raw(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + ds.pixels().len());
    out.extend_from_slice(RAW_MAGIC);
    for d in [ds.len(), ds.height(), ds.width(), ds.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(ds.pixels());
    out
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..4] != RAW_MAGIC {
        return Err(fail("missing VDVT header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let want = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| fail("header dimensions overflow".into()))?;
    if bytes.len() - 20 != want {
        return Err(fail(format!("expected {want} pixel bytes, found {}", bytes.len() - 20)));
    }
    Dataset::new(bytes[20..].to_vec(), n, h, w, c, path.display().to_string())
}

pub fn save_raw(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_raw(ds))?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_raw(&bytes, path)
}

/// Raw file split into train and a seeded holdout.
pub fn load_raw_splits(path: &Path, seed: u64) -> Result<Splits> {
    let ds = load_raw(path)?;
    let (train, val) = ds.split_holdout(default_holdout(ds.len()), seed)?;
    Ok(Splits { train, val, test: None })
}
