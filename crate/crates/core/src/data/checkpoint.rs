use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::arch::{ModelConfig, Parameters};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::trainer::{NormStats, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VDVC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn kv_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Checkpoint(format!("malformed config line {l:?}")))
        })
        .collect()
}

fn put_blob(out: &mut Vec<u8>, text: &str) {
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialize a training state.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_blob(&mut out, &kv_text(&state.model.to_kv()));
    put_blob(&mut out, &kv_text(&state.config.to_kv()));
    let counters = vec![
        ("step".to_string(), state.step.to_string()),
        ("applied".to_string(), state.applied.to_string()),
        ("skip_count".to_string(), state.skip_count.to_string()),
    ];
    put_blob(&mut out, &kv_text(&counters));
    let groups: [(&str, &Parameters<f32>); 4] = [
        ("param/", &state.params),
        ("ema/", &state.ema),
        ("opt/m/", &state.adam_m),
        ("opt/v/", &state.adam_v),
    ];
    let count = groups.iter().map(|(_, p)| p.len()).sum::<usize>() + 2;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, p) in groups {
        for (name, t) in p.iter() {
            put_tensor(&mut out, &format!("{prefix}{name}"), t)?;
        }
    }
    let c = state.norm.mean.len();
    put_tensor(&mut out, "norm/mean", &Tensor::new(vec![c], state.norm.mean.clone())?)?;
    put_tensor(&mut out, "norm/std", &Tensor::new(vec![c], state.norm.std.clone())?)?;
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn blob(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
            shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let data = self
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Parse and validate a serialized training state.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a VDVC checkpoint".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: payload, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let model = ModelConfig::from_kv(&parse_kv(r.blob()?)?)?;
    let config = TrainConfig::from_kv(&parse_kv(r.blob()?)?)?;
    let counters = parse_kv(r.blob()?)?;
    let counter = |k: &str| -> Result<u64> {
        counters
            .iter()
            .find(|(key, _)| key == k)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing counter {k}")))
    };
    let count = r.u32()? as usize;
    let mut groups: [BTreeMap<String, Tensor<f32>>; 4] = Default::default();
    let (mut mean, mut std) = (None, None);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if let Some(rest) = name.strip_prefix("param/") {
            groups[0].insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("ema/") {
            groups[1].insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("opt/m/") {
            groups[2].insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("opt/v/") {
            groups[3].insert(rest.to_string(), t);
        } else if name == "norm/mean" {
            mean = Some(t.into_data());
        } else if name == "norm/std" {
            std = Some(t.into_data());
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }
    let [params, ema, m, v] = groups.map(Parameters::from_map);
    let reference = Parameters::<f32>::init(&model, &mut crate::trainer::init_rng(0))?;
    for p in [&params, &ema, &m, &v] {
        reference
            .check_layout(p)
            .map_err(|_| Error::Checkpoint("tensor table does not match the model config".into()))?;
    }
    let norm = NormStats {
        mean: mean.ok_or_else(|| Error::Checkpoint("missing norm/mean".into()))?,
        std: std.ok_or_else(|| Error::Checkpoint("missing norm/std".into()))?,
    };
    Ok(TrainState {
        model,
        config,
        params,
        ema,
        adam_m: m,
        adam_v: v,
        norm,
        step: counter("step")?,
        applied: counter("applied")?,
        skip_count: counter("skip_count")?,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    // Write beside the target and rename so readers never see a partial file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}
