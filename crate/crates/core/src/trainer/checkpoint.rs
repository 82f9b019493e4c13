//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SFCK" | version u32 | tensor count u32 | config length u32 | config (key=value text)
//! per tensor: name length u32 | name | rank u32 | dims u64.. | dtype u8 | offset u64 | elements u64
//! payload length u64 | payload (f64)
//! optional "SFTS" | step u64 | adam t u64 | has moments u8 | m payload | v payload
//!                 | has rng u8 | seed [32] | stream u64 | word position u128
//! ```

use std::fs;
use std::path::Path;

use super::optim::AdamState;
use crate::backbone::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const STATE_MAGIC: &[u8; 4] = b"SFTS";
const DTYPE_F64: u8 = 0;

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Optimizer and sampling state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: Option<AdamState>,
    pub rng: Option<RngState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_payload(out: &mut Vec<u8>, tensors: &[&Tensor]) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &Model, state: Option<&TrainState>) -> Vec<u8> {
    let params = model.params.params();
    let config = model.config.to_kv();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, params.len() as u32);
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(config.as_bytes());
    let mut offset = 0u64;
    for (name, t) in &params {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        out.push(DTYPE_F64);
        put_u64(&mut out, offset);
        put_u64(&mut out, t.len() as u64);
        offset += 8 * t.len() as u64;
    }
    put_u64(&mut out, offset);
    let tensors: Vec<&Tensor> = params.iter().map(|(_, t)| *t).collect();
    put_payload(&mut out, &tensors);

    if let Some(s) = state {
        out.extend_from_slice(STATE_MAGIC);
        put_u64(&mut out, s.step);
        match &s.adam {
            Some(a) => {
                put_u64(&mut out, a.t);
                out.push(1);
                put_payload(&mut out, &a.m.iter().collect::<Vec<_>>());
                put_payload(&mut out, &a.v.iter().collect::<Vec<_>>());
            }
            None => {
                put_u64(&mut out, 0);
                out.push(0);
            }
        }
        match &s.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                put_u64(&mut out, r.stream);
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
    }
    out
}

pub fn save_checkpoint(model: &Model, state: Option<&TrainState>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(model, state))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} of {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} {v}")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{what} too large")))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

struct Record {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Option<TrainState>)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = c.u32("tensor count")? as usize;
    let cfg_len = c.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(c.take(cfg_len, "config")?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(cfg_text)?;

    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let nlen = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(nlen, "tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?;
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.len("dimension")?);
        }
        let dtype = c.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("tensor {name} has unknown dtype {dtype}")));
        }
        let offset = c.len("offset")?;
        let len = c.len("element count")?;
        records.push(Record { name, shape, offset, len });
    }
    let payload_len = c.len("payload length")?;
    let payload = c.take(payload_len, "payload")?;

    let mut params = ModelParams::zeros(&config);
    {
        let slots = params.params_mut();
        if slots.len() != records.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, configuration needs {}",
                records.len(),
                slots.len()
            )));
        }
        for ((name, t), r) in slots.into_iter().zip(&records) {
            if name != r.name || t.shape() != r.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "stored tensor {} {:?} does not match configuration tensor {name} {:?}",
                    r.name,
                    r.shape,
                    t.shape()
                )));
            }
            let end = r.offset.checked_add(8 * r.len).filter(|&e| e <= payload.len() && r.len == t.len());
            let end = end.ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the payload", r.name)))?;
            for (v, chunk) in t.data_mut().iter_mut().zip(payload[r.offset..end].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    let model = Model { config, params };

    let state = if c.at == bytes.len() {
        None
    } else {
        if c.take(4, "state magic")? != STATE_MAGIC {
            return Err(Error::Checkpoint("unrecognized trailing data".into()));
        }
        let step = c.u64("step")?;
        let t = c.u64("optimizer step")?;
        let adam = if c.u8("moment flag")? == 1 {
            let mut read = |what: &str| -> Result<Vec<Tensor>> {
                records
                    .iter()
                    .map(|r| Tensor::new(r.shape.clone(), c.f64s(r.len, what)?))
                    .collect()
            };
            let m = read("first moments")?;
            let v = read("second moments")?;
            Some(AdamState { t, m, v })
        } else {
            None
        };
        let rng = if c.u8("rng flag")? == 1 {
            let seed: [u8; 32] = c.take(32, "rng seed")?.try_into().unwrap();
            let stream = c.u64("rng stream")?;
            let word_pos = u128::from_le_bytes(c.take(16, "rng position")?.try_into().unwrap());
            Some(RngState { seed, stream, word_pos })
        } else {
            None
        };
        if c.at != bytes.len() {
            return Err(Error::Checkpoint("unrecognized trailing data".into()));
        }
        Some(TrainState { step, adam, rng })
    };
    Ok((model, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<TrainState>)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint and checks that its tensors fit `expected`; the first
/// mismatched tensor is named in the error. `n_max` and `rope_scale` may
/// differ since they change no shapes.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<(Model, Option<TrainState>)> {
    let (model, state) = load_checkpoint(path)?;
    let want = ModelParams::zeros(expected);
    let want = want.params();
    let have = model.params.params();
    for (i, (name, t)) in want.iter().enumerate() {
        match have.get(i) {
            Some((n, h)) if n == name && h.shape() == t.shape() => {}
            Some((n, h)) => {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch at {name}: configuration wants {:?}, checkpoint has {n} {:?}",
                    t.shape(),
                    h.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("tensor {name} missing from checkpoint"))),
        }
    }
    if have.len() > want.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has extra tensor {}",
            have[want.len()].0
        )));
    }
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(model: &Model) -> TrainState {
        let mut adam = AdamState::new(&model.params);
        adam.t = 7;
        adam.m[0].fill(0.25);
        TrainState {
            step: 7,
            adam: Some(adam),
            rng: Some(RngState {
                seed: [3; 32],
                stream: 1,
                word_pos: 12345,
            }),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = Model::new(ModelConfig::tiny(), 4).unwrap();
        let st = state(&model);
        let bytes = encode_checkpoint(&model, Some(&st));
        let (m2, s2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m2, model);
        assert_eq!(s2.as_ref(), Some(&st));
        assert_eq!(encode_checkpoint(&m2, s2.as_ref()), bytes);
        let plain = encode_checkpoint(&model, None);
        assert!(decode_checkpoint(&plain).unwrap().1.is_none());
    }

    #[test]
    fn truncation_is_a_structured_error() {
        let model = Model::new(ModelConfig::tiny(), 4).unwrap();
        let bytes = encode_checkpoint(&model, Some(&state(&model)));
        for cut in [0, 3, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Checkpoint(_)) | Err(Error::Config(_)) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let model = Model::new(ModelConfig::tiny(), 4).unwrap();
        let mut bytes = encode_checkpoint(&model, None);
        bytes[4] = 9;
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::new(ModelConfig::tiny(), 4).unwrap(), None, &path).unwrap();
        let mut other = ModelConfig::tiny();
        other.patch_len = 8;
        let err = load_checkpoint_for(&path, &other).unwrap_err().to_string();
        assert!(err.contains("embedder.skip_w"), "{err}");
        let mut longer = ModelConfig::tiny();
        longer.n_max = 64;
        assert!(load_checkpoint_for(&path, &longer).is_ok());
    }
}
