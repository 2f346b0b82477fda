//! Versioned binary checkpoints: model weights, their configs, and a role
//! tag, with sha256 checksums for immutability auditing.
//!
//! Layout (integers little-endian):
//! ```text
//! magic "FMDT" | version u32 | precision u8 (byte width)
//! meta_len u64 | meta JSON (role + model config + encoder config)
//! n_params u64
//! per param: name_len u32 | name | ndim u32 | dims u64... | elements LE
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::conditioning::EncoderStubConfig;
use crate::dit::{DiTConfig, SparseDiT};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"FMDT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    /// what this set of weights is: "teacher", "student", "fake", ...
    pub role: String,
    pub dit: DiTConfig,
    pub encoder: EncoderStubConfig,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &SparseDiT<T>,
    encoder: &EncoderStubConfig,
    role: &str,
) -> Result<()> {
    let meta = CheckpointMeta {
        role: role.to_string(),
        dit: model.cfg.clone(),
        encoder: encoder.clone(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let params = model.named_params();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::PRECISION.byte_width() as u8);
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, p) in &params {
        let p = p.borrow();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &dim in p.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in p.data() {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read back a checkpoint written at the same precision. The model is
/// rebuilt from the stored config, then every stored parameter must match
/// the freshly built model by name and shape.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(SparseDiT<T>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let width = r.take(1)?[0] as usize;
    if width != T::PRECISION.byte_width() {
        let stored = match width {
            4 => "f32".to_string(),
            8 => "f64".to_string(),
            w => format!("{w}-byte"),
        };
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {stored} weights but {} was requested",
            T::PRECISION
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let model = SparseDiT::<T>::new(meta.dit.clone(), 0)?;
    let expected = model.named_params();
    let n_params = r.u64()? as usize;
    if n_params != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {n_params} parameters, model wants {}",
            expected.len()
        )));
    }
    for (name, p) in &expected {
        let name_len = r.u32()? as usize;
        let stored_name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        if stored_name != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: found `{stored_name}`, expected `{name}`"
            )));
        }
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let mut t = p.borrow_mut();
        if dims != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: stored shape {dims:?} != expected {:?}",
                t.shape()
            )));
        }
        let raw = r.take(t.numel() * width)?;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let x = T::read_le(&raw[i * width..]);
            if !x.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` holds a non-finite value"
                )));
            }
            *v = x;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok((model, meta))
}

/// sha256 over parameter names, shapes, and raw element bytes in the fixed
/// parameter order. Two models agree here iff their weights are bit-equal.
pub fn params_checksum<T: Scalar>(model: &SparseDiT<T>) -> String {
    let mut h = Sha256::new();
    for (name, p) in model.named_params() {
        let p = p.borrow();
        h.update(name.as_bytes());
        for &dim in p.shape() {
            h.update((dim as u64).to_le_bytes());
        }
        let mut bytes = Vec::with_capacity(p.numel() * T::PRECISION.byte_width());
        for &v in p.data() {
            v.write_le(&mut bytes);
        }
        h.update(&bytes);
    }
    hex(&h.finalize())
}

/// sha256 of a file's raw bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
